#include "cgc/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cgc/container.hpp"
#include "cgc/error.hpp"
#include "cgc/rng.hpp"

namespace cgc::sae {

using nlohmann::json;

namespace {

constexpr std::array<char, 4> kBankMagic{'C', 'G', 'C', 'S'};

// Indices of the k largest strictly positive values, ties to the lower index,
// returned in ascending index order.
void top_k_positive(const float* pre, int f, int k, std::vector<int>& scratch, std::vector<int>& out) {
  scratch.clear();
  for (int i = 0; i < f; ++i)
    if (pre[i] > 0.0f) scratch.push_back(i);
  auto better = [&](int a, int b) { return pre[a] > pre[b] || (pre[a] == pre[b] && a < b); };
  if (static_cast<int>(scratch.size()) > k) {
    std::nth_element(scratch.begin(), scratch.begin() + k, scratch.end(), better);
    scratch.resize(static_cast<std::size_t>(k));
  }
  out.assign(scratch.begin(), scratch.end());
  std::sort(out.begin(), out.end());
}

void renormalize_columns(Tensor& w_dec) {
  for (Eigen::Index f = 0; f < w_dec.cols(); ++f) {
    const float norm = w_dec.col(f).norm();
    if (norm > 0.0f) w_dec.col(f) /= norm;
  }
}

struct Adam {
  Tensor m, v;
  explicit Adam(const Tensor& like) : m(Tensor::Zero(like.rows(), like.cols())), v(Tensor::Zero(like.rows(), like.cols())) {}
  void step(Tensor& p, const Tensor& g, double lr, int t) {
    constexpr float b1 = 0.9f;
    constexpr float b2 = 0.999f;
    constexpr float eps = 1e-8f;
    const auto bc1 = static_cast<float>(1.0 - std::pow(0.9, t));
    const auto bc2 = static_cast<float>(1.0 - std::pow(0.999, t));
    const auto step = static_cast<float>(lr) / bc1;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const float gi = g.data()[i];
      m.data()[i] = b1 * m.data()[i] + (1.0f - b1) * gi;
      v.data()[i] = b2 * v.data()[i] + (1.0f - b2) * gi * gi;
      p.data()[i] -= step * m.data()[i] / (std::sqrt(v.data()[i] / bc2) + eps);
    }
  }
};

json config_json(const SaeConfig& c) {
  return {{"d_in", c.d_in},     {"dict_size", c.dict_size},   {"k", c.k},
          {"l1_coeff", c.l1_coeff}, {"lr", c.lr},             {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"seed", c.seed}};
}

SaeConfig config_from(const json& j) {
  SaeConfig c;
  c.d_in = j.at("d_in");
  c.dict_size = j.at("dict_size");
  c.k = j.at("k");
  c.l1_coeff = j.at("l1_coeff");
  c.lr = j.at("lr");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  return c;
}

json stats_to_json(const TrainStats& s) {
  return {{"epoch_loss", s.epoch_loss}, {"epoch_mse", s.epoch_mse}, {"dead_features", s.dead_features}};
}

}  // namespace

void SaeConfig::validate() const {
  if (d_in < 1) throw InvalidArgument("SAE d_in must be >= 1");
  if (k < 1 || k > dict_size) throw InvalidArgument("SAE requires 1 <= k <= dict_size");
  if (dict_size < d_in) throw InvalidArgument("SAE dictionary must be at least d_in wide");
  if (l1_coeff < 0.0) throw InvalidArgument("SAE l1_coeff must be nonnegative");
  if (!(lr > 0.0) || epochs < 1 || batch_size < 1) throw InvalidArgument("bad SAE optimizer settings");
}

Sae Sae::initialize(int d_in, int dict_size, std::uint64_t seed) {
  Rng rng(seed);
  Sae s;
  s.w_dec.resize(d_in, dict_size);
  for (Eigen::Index f = 0; f < dict_size; ++f) {
    float norm = 0.0f;
    while (norm == 0.0f) {
      for (Eigen::Index i = 0; i < d_in; ++i) s.w_dec(i, f) = static_cast<float>(rng.normal());
      norm = s.w_dec.col(f).norm();
    }
    s.w_dec.col(f) /= norm;
  }
  s.w_enc = s.w_dec.transpose();
  s.b_enc = Tensor::Zero(1, dict_size);
  s.b_dec = Tensor::Zero(1, d_in);
  return s;
}

void FeatureMatrix::set_row(std::size_t r, std::span<const int> idx, std::span<const float> val) {
  if (r + 1 >= row_ptr_.size() || row_ptr_[r] != indices_.size()) throw InvalidArgument("rows must be set in order");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= cols_ || !(val[i] > 0.0f)) {
      throw InvalidArgument("feature entries must be in range and positive");
    }
    if (i > 0 && idx[i] <= idx[i - 1]) throw InvalidArgument("feature indices must ascend");
  }
  indices_.insert(indices_.end(), idx.begin(), idx.end());
  values_.insert(values_.end(), val.begin(), val.end());
  for (std::size_t j = r + 1; j < row_ptr_.size(); ++j) row_ptr_[j] = indices_.size();
}

Tensor FeatureMatrix::dense() const {
  Tensor out = Tensor::Zero(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols_));
  for (std::size_t r = 0; r < rows(); ++r) {
    const auto idx = row_indices(r);
    const auto val = row_values(r);
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(r), idx[i]) = val[i];
  }
  return out;
}

FeatureMatrix FeatureMatrix::from_dense(const Tensor& dense) {
  FeatureMatrix fm(static_cast<std::size_t>(dense.rows()), static_cast<std::size_t>(dense.cols()));
  std::vector<int> idx;
  std::vector<float> val;
  for (Eigen::Index r = 0; r < dense.rows(); ++r) {
    idx.clear();
    val.clear();
    for (Eigen::Index c = 0; c < dense.cols(); ++c) {
      if (dense(r, c) < 0.0f) throw InvalidArgument("feature activations must be nonnegative");
      if (dense(r, c) > 0.0f) {
        idx.push_back(static_cast<int>(c));
        val.push_back(dense(r, c));
      }
    }
    fm.set_row(static_cast<std::size_t>(r), idx, val);
  }
  return fm;
}

std::pair<Sae, TrainStats> train_sae(const ActsView& acts, const SaeConfig& cfg) {
  cfg.validate();
  if (acts.cols() != cfg.d_in) throw InvalidArgument("activation width does not match SAE d_in");
  const auto t_rows = static_cast<std::size_t>(acts.rows());
  if (t_rows < static_cast<std::size_t>(cfg.batch_size)) throw InvalidArgument("fewer activation rows than batch_size");
  if (!acts.allFinite()) throw InvalidArgument("activations contain non-finite values");

  const int f = cfg.dict_size;
  const int d = cfg.d_in;
  Sae sae = Sae::initialize(d, f, derive_seed(cfg.seed, 1));
  Adam opt_we(sae.w_enc), opt_be(sae.b_enc), opt_wd(sae.w_dec), opt_bd(sae.b_dec);
  Rng shuffle_rng(derive_seed(cfg.seed, 2));

  std::vector<std::size_t> order(t_rows);
  std::iota(order.begin(), order.end(), 0);
  TrainStats stats;
  int step = 0;
  Tensor z, pre, a, zhat, dz, da, g_we, g_wd;
  std::vector<int> scratch, keep;
  std::vector<char> fired(static_cast<std::size_t>(f));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    std::fill(fired.begin(), fired.end(), 0);
    double loss_sum = 0.0;
    double mse_sum = 0.0;
    for (std::size_t start = 0; start < t_rows; start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto bsz = static_cast<Eigen::Index>(std::min<std::size_t>(cfg.batch_size, t_rows - start));
      z.resize(bsz, d);
      for (Eigen::Index i = 0; i < bsz; ++i) z.row(i) = acts.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)]));

      pre.noalias() = z * sae.w_enc.transpose();
      pre.rowwise() += sae.b_enc.row(0);
      a.setZero(bsz, f);
      double l1 = 0.0;
      for (Eigen::Index i = 0; i < bsz; ++i) {
        top_k_positive(pre.row(i).data(), f, cfg.k, scratch, keep);
        for (int j : keep) {
          a(i, j) = pre(i, j);
          l1 += pre(i, j);
          fired[static_cast<std::size_t>(j)] = 1;
        }
      }
      zhat.noalias() = a * sae.w_dec.transpose();
      zhat.rowwise() += sae.b_dec.row(0);
      dz = zhat - z;
      const double se = static_cast<double>(dz.cast<double>().squaredNorm());
      const double mse = se / static_cast<double>(bsz * d);
      const double loss = mse + cfg.l1_coeff * l1 / static_cast<double>(bsz);
      if (!std::isfinite(loss)) throw NumericError("non-finite SAE loss at epoch " + std::to_string(epoch));
      loss_sum += loss * static_cast<double>(bsz);
      mse_sum += mse * static_cast<double>(bsz);

      dz *= 2.0f / static_cast<float>(bsz * d);
      g_wd.noalias() = dz.transpose() * a;
      const Tensor g_bd = dz.colwise().sum();
      da.noalias() = dz * sae.w_dec;
      const auto l1_grad = static_cast<float>(cfg.l1_coeff / static_cast<double>(bsz));
      for (Eigen::Index i = 0; i < bsz; ++i)
        for (Eigen::Index j = 0; j < f; ++j) da(i, j) = a(i, j) > 0.0f ? da(i, j) + l1_grad : 0.0f;
      g_we.noalias() = da.transpose() * z;
      const Tensor g_be = da.colwise().sum();

      ++step;
      opt_we.step(sae.w_enc, g_we, cfg.lr, step);
      opt_be.step(sae.b_enc, g_be, cfg.lr, step);
      opt_wd.step(sae.w_dec, g_wd, cfg.lr, step);
      opt_bd.step(sae.b_dec, g_bd, cfg.lr, step);
      renormalize_columns(sae.w_dec);
    }
    stats.epoch_loss.push_back(loss_sum / static_cast<double>(t_rows));
    stats.epoch_mse.push_back(mse_sum / static_cast<double>(t_rows));
  }
  stats.dead_features = static_cast<int>(std::count(fired.begin(), fired.end(), 0));
  if (!sae.w_enc.allFinite() || !sae.w_dec.allFinite() || !sae.b_enc.allFinite() || !sae.b_dec.allFinite()) {
    throw NumericError("SAE training produced non-finite weights");
  }
  return {std::move(sae), std::move(stats)};
}

FeatureMatrix encode(const Sae& sae, const ActsView& acts, int k) {
  if (acts.cols() != sae.d_in()) throw InvalidArgument("activation width does not match SAE d_in");
  if (k < 1 || k > sae.dict_size()) throw InvalidArgument("k must be in [1, dict_size]");
  const int f = sae.dict_size();
  FeatureMatrix fm(static_cast<std::size_t>(acts.rows()), static_cast<std::size_t>(f));
  Tensor pre;
  std::vector<int> scratch, keep;
  std::vector<float> vals;
  constexpr Eigen::Index kBlock = 1024;
  for (Eigen::Index r0 = 0; r0 < acts.rows(); r0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, acts.rows() - r0);
    pre.noalias() = acts.middleRows(r0, n) * sae.w_enc.transpose();
    pre.rowwise() += sae.b_enc.row(0);
    for (Eigen::Index i = 0; i < n; ++i) {
      top_k_positive(pre.row(i).data(), f, k, scratch, keep);
      vals.clear();
      for (int j : keep) vals.push_back(pre(i, j));
      fm.set_row(static_cast<std::size_t>(r0 + i), keep, vals);
    }
  }
  return fm;
}

Tensor reconstruct(const Sae& sae, const FeatureMatrix& fm) {
  if (fm.cols() != static_cast<std::size_t>(sae.dict_size())) throw InvalidArgument("feature width does not match SAE");
  Tensor out(static_cast<Eigen::Index>(fm.rows()), sae.d_in());
  for (std::size_t r = 0; r < fm.rows(); ++r) {
    auto row = out.row(static_cast<Eigen::Index>(r));
    row = sae.b_dec.row(0);
    const auto idx = fm.row_indices(r);
    const auto val = fm.row_values(r);
    for (std::size_t i = 0; i < idx.size(); ++i) row += val[i] * sae.w_dec.col(idx[i]).transpose();
  }
  return out;
}

void normalize_decoder_preserving(Sae& sae) {
  for (Eigen::Index f = 0; f < sae.w_dec.cols(); ++f) {
    const float norm = sae.w_dec.col(f).norm();
    if (norm <= 0.0f) continue;
    sae.w_dec.col(f) /= norm;
    sae.w_enc.row(f) *= norm;
    sae.b_enc(0, f) *= norm;
  }
}

void save_bank(const SaeBank& bank, const std::string& path, const std::string& extra_json) {
  json directory = json::object();
  std::vector<container::TensorRecord> records;
  auto add = [&](const std::string& name, const Tensor& t) {
    records.push_back({name,
                       {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())},
                       {t.data(), static_cast<std::size_t>(t.size())}});
  };
  for (const auto& [c, e] : bank) {
    const auto label = c.label();
    directory[label] = {{"config", config_json(e.config)}, {"stats", stats_to_json(e.stats)}};
    add(label + ".w_enc", e.sae.w_enc);
    add(label + ".b_enc", e.sae.b_enc);
    add(label + ".w_dec", e.sae.w_dec);
    add(label + ".b_dec", e.sae.b_dec);
  }
  json header = {{"components", directory}, {"extra", json::parse(extra_json)}};
  container::write(path, kBankMagic, std::move(header), records);
}

SaeBank load_bank(const std::string& path) {
  const auto loaded = container::read(path, kBankMagic);
  SaeBank bank;
  try {
    for (const auto& [label, rec] : loaded.header.at("components").items()) {
      BankEntry e;
      e.config = config_from(rec.at("config"));
      e.config.validate();
      const auto& st = rec.at("stats");
      e.stats.epoch_loss = st.at("epoch_loss").get<std::vector<double>>();
      e.stats.epoch_mse = st.at("epoch_mse").get<std::vector<double>>();
      e.stats.dead_features = st.at("dead_features");
      const auto f = static_cast<std::size_t>(e.config.dict_size);
      const auto d = static_cast<std::size_t>(e.config.d_in);
      auto fetch = [&](const std::string& name, std::size_t r, std::size_t c) {
        const auto v = loaded.tensor(label + "." + name, {r, c});
        return Tensor(Eigen::Map<const Tensor>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
      };
      e.sae.w_enc = fetch("w_enc", f, d);
      e.sae.b_enc = fetch("b_enc", 1, f);
      e.sae.w_dec = fetch("w_dec", d, f);
      e.sae.b_dec = fetch("b_dec", 1, d);
      bank.emplace(lm::ComponentId::parse(label), std::move(e));
    }
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& ex) {
    throw ArtifactError(path + ": malformed SAE bank: " + ex.what());
  }
  return bank;
}

std::string load_bank_extra(const std::string& path) {
  return container::read_header(path, kBankMagic).value("extra", json::object()).dump();
}

std::string stats_json(const SaeBank& bank) {
  json out = json::object();
  for (const auto& [c, e] : bank) out[c.label()] = stats_to_json(e.stats);
  return out.dump(2);
}

}  // namespace cgc::sae
