#include "cgc/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

#include "cgc/container.hpp"
#include "cgc/error.hpp"
#include "cgc/rng.hpp"

namespace cgc::lm {

using nlohmann::json;

namespace {

constexpr float kLnEps = 1e-5f;
constexpr std::array<char, 4> kCheckpointMagic{'C', 'G', 'C', '1'};
constexpr std::array<char, 4> kDumpMagic{'C', 'G', 'C', 'A'};

Tensor row_vector(int n, float value) { return Tensor::Constant(1, n, value); }

void fill_normal(Tensor& t, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(rng.normal() * stddev);
}

// GELU, tanh approximation.
inline float gelu(float x) {
  constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
  constexpr float c = 0.7978845608028654f;
  const float inner = c * (x + 0.044715f * x * x * x);
  const float th = std::tanh(inner);
  const float sech2 = 1.0f - th * th;
  return 0.5f * (1.0f + th) + 0.5f * x * sech2 * c * (1.0f + 3.0f * 0.044715f * x * x);
}

void layer_norm(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& xhat, std::vector<float>& rstd, Tensor& y) {
  const auto n = x.rows();
  const auto d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const auto r = static_cast<float>(1.0 / std::sqrt(var + kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    for (Eigen::Index j = 0; j < d; ++j) {
      const float xh = (x(i, j) - static_cast<float>(mean)) * r;
      xhat(i, j) = xh;
      y(i, j) = xh * g(0, j) + b(0, j);
    }
  }
}

// Accumulates dg, db and returns dx for y = xhat * g + b.
void layer_norm_backward(const Tensor& dy, const Tensor& xhat, const std::vector<float>& rstd, const Tensor& g,
                         Tensor& dg, Tensor& db, Tensor& dx) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  dx.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    float mean_dxhat = 0.0f;
    float mean_dxhat_xhat = 0.0f;
    for (Eigen::Index j = 0; j < d; ++j) {
      const float dxh = dy(i, j) * g(0, j);
      dg(0, j) += dy(i, j) * xhat(i, j);
      db(0, j) += dy(i, j);
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xhat(i, j);
    }
    mean_dxhat /= static_cast<float>(d);
    mean_dxhat_xhat /= static_cast<float>(d);
    const float r = rstd[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < d; ++j) {
      const float dxh = dy(i, j) * g(0, j);
      dx(i, j) = r * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
    }
  }
}

struct LayerCache {
  Tensor x_in, xhat1, a1, q, k, v, ctx, x_mid, xhat2, a2, hpre, hact;
  std::vector<float> rstd1, rstd2;
  std::vector<Tensor> probs;  // n_seq * n_heads, each T x T (causal, zero above diagonal)
};

struct ForwardState {
  int n_seq = 0;
  int seq_len = 0;
  std::vector<LayerCache> layers;
  Tensor x_final, xhatf, af, logits;
  std::vector<float> rstdf;
};

using CtxHook = std::function<void(int layer, const Tensor& ctx)>;

// Runs the model over n_seq independent windows. With keep_all, every
// layer's intermediates are retained for backpropagation.
void run_forward(const Checkpoint& ck, std::span<const int> tokens, int n_seq, int seq_len, ForwardState& st,
                 bool keep_all, const CtxHook& on_ctx = {}) {
  const auto& cfg = ck.config;
  const int d = cfg.d_model();
  const int dh = cfg.d_head;
  const int heads = cfg.n_heads;
  const Eigen::Index n = static_cast<Eigen::Index>(n_seq) * seq_len;
  if (seq_len > cfg.context_len || seq_len < 1) throw InvalidArgument("sequence length exceeds model context");
  if (tokens.size() != static_cast<std::size_t>(n)) throw InvalidArgument("token count does not match n_seq*seq_len");

  st.n_seq = n_seq;
  st.seq_len = seq_len;
  st.layers.resize(keep_all ? static_cast<std::size_t>(cfg.n_layers) : 1);

  Tensor x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= cfg.vocab_size) throw InvalidArgument("token out of vocabulary");
    const auto pos = static_cast<Eigen::Index>(i % seq_len);
    x.row(i) = ck.tok_emb.row(tok) + ck.pos_emb.row(pos);
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = ck.layers[static_cast<std::size_t>(l)];
    auto& c = st.layers[keep_all ? static_cast<std::size_t>(l) : 0];
    c.x_in = x;
    layer_norm(c.x_in, w.ln1_g, w.ln1_b, c.xhat1, c.rstd1, c.a1);
    c.q.noalias() = c.a1 * w.w_q;
    c.k.noalias() = c.a1 * w.w_k;
    c.v.noalias() = c.a1 * w.w_v;
    c.ctx.setZero(n, d);
    c.probs.resize(static_cast<std::size_t>(n_seq) * heads);
    for (int b = 0; b < n_seq; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
      for (int h = 0; h < heads; ++h) {
        auto& p = c.probs[static_cast<std::size_t>(b) * heads + h];
        const auto qb = c.q.block(r0, h * dh, seq_len, dh);
        const auto kb = c.k.block(r0, h * dh, seq_len, dh);
        p.noalias() = qb * kb.transpose();
        for (int i = 0; i < seq_len; ++i) {
          float mx = -std::numeric_limits<float>::infinity();
          for (int j = 0; j <= i; ++j) mx = std::max(mx, p(i, j) * scale);
          float sum = 0.0f;
          for (int j = 0; j <= i; ++j) {
            const float e = std::exp(p(i, j) * scale - mx);
            p(i, j) = e;
            sum += e;
          }
          const float inv = 1.0f / sum;
          for (int j = 0; j <= i; ++j) p(i, j) *= inv;
          for (int j = i + 1; j < seq_len; ++j) p(i, j) = 0.0f;
        }
        c.ctx.block(r0, h * dh, seq_len, dh).noalias() = p * c.v.block(r0, h * dh, seq_len, dh);
      }
    }
    if (on_ctx) on_ctx(l, c.ctx);
    c.x_mid.noalias() = c.ctx * w.w_o;
    c.x_mid += c.x_in;
    layer_norm(c.x_mid, w.ln2_g, w.ln2_b, c.xhat2, c.rstd2, c.a2);
    c.hpre.noalias() = c.a2 * w.w_fc1;
    c.hpre.rowwise() += w.b_fc1.row(0);
    c.hact = c.hpre.unaryExpr([](float v) { return gelu(v); });
    x.noalias() = c.hact * w.w_fc2;
    x.rowwise() += w.b_fc2.row(0);
    x += c.x_mid;
  }
  st.x_final = std::move(x);
  layer_norm(st.x_final, ck.lnf_g, ck.lnf_b, st.xhatf, st.rstdf, st.af);
  st.logits.noalias() = st.af * ck.w_out;
}

// log-softmax NLL of `target` for one logits row, in double.
double row_nll(const Tensor& logits, Eigen::Index row, int target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < logits.cols(); ++j) mx = std::max(mx, static_cast<double>(logits(row, j)));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(static_cast<double>(logits(row, j)) - mx);
  return mx + std::log(sum) - static_cast<double>(logits(row, target));
}

// Gradient of mean cross-entropy w.r.t. every parameter. Returns mean loss.
double backward(const Checkpoint& ck, const ForwardState& st, std::span<const int> inputs,
                std::span<const int> targets, Checkpoint& grad) {
  const auto& cfg = ck.config;
  const int dh = cfg.d_head;
  const int heads = cfg.n_heads;
  const int seq_len = st.seq_len;
  const Eigen::Index n = st.logits.rows();
  const float inv_n = 1.0f / static_cast<float>(n);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  double loss = 0.0;
  Tensor dlogits(n, st.logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    float mx = st.logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < st.logits.cols(); ++j) {
      const float e = std::exp(st.logits(i, j) - mx);
      dlogits(i, j) = e;
      sum += e;
    }
    loss += std::log(sum) + mx - st.logits(i, t);
    const auto inv = static_cast<float>(1.0 / sum);
    for (Eigen::Index j = 0; j < st.logits.cols(); ++j) dlogits(i, j) *= inv * inv_n;
    dlogits(i, t) -= inv_n;
  }
  loss /= static_cast<double>(n);

  grad.w_out.noalias() += st.af.transpose() * dlogits;
  Tensor daf;
  daf.noalias() = dlogits * ck.w_out.transpose();
  Tensor dx;
  layer_norm_backward(daf, st.xhatf, st.rstdf, ck.lnf_g, grad.lnf_g, grad.lnf_b, dx);

  Tensor tmp, da, dhact, dctx, dq, dk, dv, dp, ds;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& w = ck.layers[static_cast<std::size_t>(l)];
    auto& g = grad.layers[static_cast<std::size_t>(l)];
    const auto& c = st.layers[static_cast<std::size_t>(l)];

    // FFN block; dx is the gradient w.r.t. the layer output.
    g.w_fc2.noalias() += c.hact.transpose() * dx;
    g.b_fc2 += dx.colwise().sum();
    dhact.noalias() = dx * w.w_fc2.transpose();
    for (Eigen::Index i = 0; i < dhact.size(); ++i) dhact.data()[i] *= gelu_grad(c.hpre.data()[i]);
    g.w_fc1.noalias() += c.a2.transpose() * dhact;
    g.b_fc1 += dhact.colwise().sum();
    da.noalias() = dhact * w.w_fc1.transpose();
    layer_norm_backward(da, c.xhat2, c.rstd2, w.ln2_g, g.ln2_g, g.ln2_b, tmp);
    Tensor dmid = dx + tmp;

    // Attention block.
    g.w_o.noalias() += c.ctx.transpose() * dmid;
    dctx.noalias() = dmid * w.w_o.transpose();
    dq.setZero(n, cfg.d_model());
    dk.setZero(n, cfg.d_model());
    dv.setZero(n, cfg.d_model());
    for (int b = 0; b < st.n_seq; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
      for (int h = 0; h < heads; ++h) {
        const auto& p = c.probs[static_cast<std::size_t>(b) * heads + h];
        const auto dctx_h = dctx.block(r0, h * dh, seq_len, dh);
        dp.noalias() = dctx_h * c.v.block(r0, h * dh, seq_len, dh).transpose();
        dv.block(r0, h * dh, seq_len, dh).noalias() = p.transpose() * dctx_h;
        ds.resize(seq_len, seq_len);
        for (int i = 0; i < seq_len; ++i) {
          float dot = 0.0f;
          for (int j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
          for (int j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
          for (int j = i + 1; j < seq_len; ++j) ds(i, j) = 0.0f;
        }
        dq.block(r0, h * dh, seq_len, dh).noalias() = ds * c.k.block(r0, h * dh, seq_len, dh);
        dk.block(r0, h * dh, seq_len, dh).noalias() = ds.transpose() * c.q.block(r0, h * dh, seq_len, dh);
      }
    }
    g.w_q.noalias() += c.a1.transpose() * dq;
    g.w_k.noalias() += c.a1.transpose() * dk;
    g.w_v.noalias() += c.a1.transpose() * dv;
    da.noalias() = dq * w.w_q.transpose();
    da.noalias() += dk * w.w_k.transpose();
    da.noalias() += dv * w.w_v.transpose();
    layer_norm_backward(da, c.xhat1, c.rstd1, w.ln1_g, g.ln1_g, g.ln1_b, tmp);
    dx = dmid + tmp;
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    grad.tok_emb.row(inputs[static_cast<std::size_t>(i)]) += dx.row(i);
    grad.pos_emb.row(i % seq_len) += dx.row(i);
  }
  return loss;
}

std::vector<Tensor*> tensor_list(Checkpoint& ck) {
  std::vector<Tensor*> out;
  ck.for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},         {"d_head", c.d_head},
          {"d_ffn", c.d_ffn},       {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::vector<std::size_t> shape_of(const Tensor& t) {
  return {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())};
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_head < 1 || d_ffn < 1 || vocab_size < 1) {
    throw InvalidArgument("model dimensions must all be >= 1");
  }
  if (context_len < 2) throw InvalidArgument("context_len must be >= 2");
}

std::string ComponentId::label() const {
  if (kind == ComponentKind::ffn) return "L" + std::to_string(layer) + "FFN";
  return "L" + std::to_string(layer) + "H" + std::to_string(head);
}

ComponentId ComponentId::parse(const std::string& label) {
  ComponentId c;
  int layer = -1;
  int head = -1;
  char tail[8] = {};
  if (std::sscanf(label.c_str(), "L%dH%d", &layer, &head) == 2 && layer >= 0 && head >= 0) {
    c.layer = layer;
    c.head = head;
    return c;
  }
  if (std::sscanf(label.c_str(), "L%d%3s", &layer, tail) == 2 && std::string(tail) == "FFN" && layer >= 0) {
    c.kind = ComponentKind::ffn;
    c.layer = layer;
    return c;
  }
  throw InvalidArgument("bad component label: " + label);
}

std::vector<ComponentId> head_components(const ModelConfig& config) {
  std::vector<ComponentId> out;
  out.reserve(static_cast<std::size_t>(config.n_layers * config.n_heads));
  for (int l = 0; l < config.n_layers; ++l)
    for (int h = 0; h < config.n_heads; ++h) out.push_back({ComponentKind::attention_head, l, h});
  return out;
}

std::size_t head_index(const ModelConfig& config, const ComponentId& c) {
  if (c.kind != ComponentKind::attention_head || c.layer < 0 || c.layer >= config.n_layers || c.head < 0 ||
      c.head >= config.n_heads) {
    throw InvalidArgument("unknown component " + c.label());
  }
  return static_cast<std::size_t>(c.layer * config.n_heads + c.head);
}

Checkpoint Checkpoint::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model();
  Checkpoint ck;
  ck.config = config;
  ck.tok_emb = Tensor::Zero(config.vocab_size, d);
  ck.pos_emb = Tensor::Zero(config.context_len, d);
  ck.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& w : ck.layers) {
    w.ln1_g = row_vector(d, 1.0f);
    w.ln1_b = row_vector(d, 0.0f);
    w.w_q = Tensor::Zero(d, d);
    w.w_k = Tensor::Zero(d, d);
    w.w_v = Tensor::Zero(d, d);
    w.w_o = Tensor::Zero(d, d);
    w.ln2_g = row_vector(d, 1.0f);
    w.ln2_b = row_vector(d, 0.0f);
    w.w_fc1 = Tensor::Zero(d, config.d_ffn);
    w.b_fc1 = row_vector(config.d_ffn, 0.0f);
    w.w_fc2 = Tensor::Zero(config.d_ffn, d);
    w.b_fc2 = row_vector(d, 0.0f);
  }
  ck.lnf_g = row_vector(d, 1.0f);
  ck.lnf_b = row_vector(d, 0.0f);
  ck.w_out = Tensor::Zero(d, config.vocab_size);
  return ck;
}

Checkpoint Checkpoint::initialize(const ModelConfig& config) {
  Checkpoint ck = zeros(config);
  Rng rng(config.seed);
  constexpr double std_base = 0.02;
  const double std_resid = std_base / std::sqrt(2.0 * config.n_layers);
  fill_normal(ck.tok_emb, rng, std_base);
  fill_normal(ck.pos_emb, rng, std_base);
  for (auto& w : ck.layers) {
    fill_normal(w.w_q, rng, std_base);
    fill_normal(w.w_k, rng, std_base);
    fill_normal(w.w_v, rng, std_base);
    fill_normal(w.w_o, rng, std_resid);
    fill_normal(w.w_fc1, rng, std_base);
    fill_normal(w.w_fc2, rng, std_resid);
  }
  fill_normal(ck.w_out, rng, std_base);
  return ck;
}

void Checkpoint::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "ln1_g", w.ln1_g);
    fn(p + "ln1_b", w.ln1_b);
    fn(p + "w_q", w.w_q);
    fn(p + "w_k", w.w_k);
    fn(p + "w_v", w.w_v);
    fn(p + "w_o", w.w_o);
    fn(p + "ln2_g", w.ln2_g);
    fn(p + "ln2_b", w.ln2_b);
    fn(p + "w_fc1", w.w_fc1);
    fn(p + "b_fc1", w.b_fc1);
    fn(p + "w_fc2", w.w_fc2);
    fn(p + "b_fc2", w.b_fc2);
  }
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
  fn("w_out", w_out);
}

void Checkpoint::for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Checkpoint*>(this)->for_each_tensor([&](const std::string& name, Tensor& t) { fn(name, t); });
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const Tensor& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

bool Checkpoint::all_finite() const {
  bool ok = true;
  for_each_tensor([&](const std::string&, const Tensor& t) { ok = ok && t.allFinite(); });
  return ok;
}

void Checkpoint::validate() const {
  config.validate();
  const Checkpoint ref = zeros(config);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> expected;
  ref.for_each_tensor([&](const std::string& name, const Tensor& t) { expected.emplace_back(name, shape_of(t)); });
  std::size_t i = 0;
  if (layers.size() != static_cast<std::size_t>(config.n_layers)) throw ArtifactError("layer count mismatch");
  for_each_tensor([&](const std::string& name, const Tensor& t) {
    if (shape_of(t) != expected[i].second) throw ArtifactError("tensor " + name + ": shape inconsistent with config");
    if (!t.allFinite()) throw ArtifactError("tensor " + name + ": non-finite values");
    ++i;
  });
}

Eigen::Block<Tensor> Checkpoint::head_slice(const ComponentId& c) {
  head_index(config, c);
  return layers[static_cast<std::size_t>(c.layer)].w_o.block(static_cast<Eigen::Index>(c.head) * config.d_head, 0,
                                                             config.d_head, config.d_model());
}

Eigen::Block<const Tensor> Checkpoint::head_slice(const ComponentId& c) const {
  head_index(config, c);
  const Tensor& w_o = layers[static_cast<std::size_t>(c.layer)].w_o;
  return w_o.block(static_cast<Eigen::Index>(c.head) * config.d_head, 0, config.d_head, config.d_model());
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (!(config == other.config)) return false;
  std::vector<const Tensor*> mine;
  std::vector<const Tensor*> theirs;
  for_each_tensor([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
  other.for_each_tensor([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols()) return false;
    if (std::memcmp(mine[i]->data(), theirs[i]->data(), sizeof(float) * static_cast<std::size_t>(mine[i]->size())))
      return false;
  }
  return true;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path, const std::string& extra_json) {
  std::vector<container::TensorRecord> records;
  ckpt.for_each_tensor([&](const std::string& name, const Tensor& t) {
    records.push_back({name, shape_of(t), {t.data(), static_cast<std::size_t>(t.size())}});
  });
  json header = {{"config", config_to_json(ckpt.config)}, {"extra", json::parse(extra_json)}};
  container::write(path, kCheckpointMagic, std::move(header), records);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto loaded = container::read(path, kCheckpointMagic);
  ModelConfig config;
  try {
    config = config_from_json(loaded.header.at("config"));
    config.validate();
  } catch (const std::exception& e) {
    throw ArtifactError(path + ": bad model config: " + e.what());
  }
  Checkpoint ck = Checkpoint::zeros(config);
  ck.for_each_tensor([&](const std::string& name, Tensor& t) {
    const auto values = loaded.tensor(name, shape_of(t));
    std::copy(values.begin(), values.end(), t.data());
  });
  ck.validate();
  return ck;
}

std::string load_checkpoint_extra(const std::string& path) {
  return container::read_header(path, kCheckpointMagic).value("extra", json::object()).dump();
}

Checkpoint train_lm(std::span<const int> tokens, const std::vector<std::pair<std::size_t, std::size_t>>& regions,
                    const ModelConfig& config, const TrainHyper& hyper, std::uint64_t seed, TrainLog* log,
                    const std::function<void(int, double)>& progress) {
  config.validate();
  const auto window = static_cast<std::size_t>(config.context_len) + 1;
  std::vector<std::size_t> region_starts;  // cumulative count of valid window starts
  std::size_t valid = 0;
  std::size_t total_tokens = 0;
  for (const auto& [b, e] : regions) {
    if (e > tokens.size() || b > e) throw InvalidArgument("training region out of bounds");
    total_tokens += e - b;
    valid += (e - b >= window) ? (e - b - window + 1) : 0;
    region_starts.push_back(valid);
  }
  if (total_tokens < 2 * static_cast<std::size_t>(config.context_len) || valid == 0) {
    throw InvalidArgument("corpus too short: need at least 2*context_len tokens");
  }
  if (hyper.batch_size < 1 || hyper.steps < 0) throw InvalidArgument("bad training hyperparameters");

  ModelConfig init_cfg = config;
  init_cfg.seed = seed;
  Checkpoint model = Checkpoint::initialize(init_cfg);
  model.config = config;
  Checkpoint grad = Checkpoint::zeros(config);
  Checkpoint m = Checkpoint::zeros(config);
  Checkpoint v = Checkpoint::zeros(config);
  for (auto* ckp : {&grad, &m, &v}) {
    for (auto* t : tensor_list(*ckp)) t->setZero();
  }
  std::vector<std::string> names;
  model.for_each_tensor([&](const std::string& name, Tensor&) { names.push_back(name); });
  auto params = tensor_list(model);
  auto grads = tensor_list(grad);
  auto ms = tensor_list(m);
  auto vs = tensor_list(v);
  std::vector<bool> decay(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) decay[i] = names[i].find("w_") != std::string::npos;

  Rng rng(derive_seed(seed, 0x7a11));
  const int t_len = config.context_len;
  const std::size_t n = static_cast<std::size_t>(hyper.batch_size) * t_len;
  std::vector<int> inputs(n);
  std::vector<int> targets(n);
  ForwardState st;

  for (int step = 0; step < hyper.steps; ++step) {
    for (int b = 0; b < hyper.batch_size; ++b) {
      std::size_t pick = rng.below(valid);
      const auto r = static_cast<std::size_t>(std::upper_bound(region_starts.begin(), region_starts.end(), pick) -
                                              region_starts.begin());
      const std::size_t before = r == 0 ? 0 : region_starts[r - 1];
      const std::size_t start = regions[r].first + (pick - before);
      for (int t = 0; t < t_len; ++t) {
        inputs[static_cast<std::size_t>(b * t_len + t)] = tokens[start + static_cast<std::size_t>(t)];
        targets[static_cast<std::size_t>(b * t_len + t)] = tokens[start + static_cast<std::size_t>(t) + 1];
      }
    }
    run_forward(model, inputs, hyper.batch_size, t_len, st, true);
    for (auto* g : grads) g->setZero();
    const double loss = backward(model, st, inputs, targets, grad);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite training loss at step " + std::to_string(step));
    }
    if (log) log->step_loss.push_back(loss);
    if (progress) progress(step, loss);

    double norm2 = 0.0;
    for (auto* g : grads) norm2 += static_cast<double>(g->cast<double>().squaredNorm());
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    const float clip = norm > hyper.grad_clip ? static_cast<float>(hyper.grad_clip / norm) : 1.0f;

    double lr = hyper.lr;
    if (step < hyper.warmup_steps) {
      lr *= static_cast<double>(step + 1) / hyper.warmup_steps;
    } else {
      const double span = std::max(1, hyper.steps - hyper.warmup_steps);
      const double progress_frac = static_cast<double>(step - hyper.warmup_steps) / span;
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac));
      lr *= hyper.min_lr_ratio + (1.0 - hyper.min_lr_ratio) * cosine;
    }
    const double bc1 = 1.0 - std::pow(hyper.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(hyper.beta2, step + 1);
    const auto b1 = static_cast<float>(hyper.beta1);
    const auto b2 = static_cast<float>(hyper.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(hyper.eps);
    const auto wd = static_cast<float>(lr * hyper.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      float* p = params[i]->data();
      const float* g = grads[i]->data();
      float* mm = ms[i]->data();
      float* vv = vs[i]->data();
      const auto size = params[i]->size();
      for (Eigen::Index j = 0; j < size; ++j) {
        const float gj = g[j] * clip;
        mm[j] = b1 * mm[j] + (1.0f - b1) * gj;
        vv[j] = b2 * vv[j] + (1.0f - b2) * gj * gj;
        if (decay[i]) p[j] -= wd * p[j];
        p[j] -= step_size * mm[j] / (std::sqrt(vv[j] * inv_bc2) + eps);
      }
    }
  }
  if (!model.all_finite()) throw NumericError("training produced non-finite weights");
  return model;
}

double loss_and_gradient(const Checkpoint& ckpt, std::span<const int> inputs, std::span<const int> targets, int n_seq,
                         int seq_len, Checkpoint& grad) {
  if (targets.size() != inputs.size()) throw InvalidArgument("inputs and targets differ in length");
  grad = Checkpoint::zeros(ckpt.config);
  for (auto* t : tensor_list(grad)) t->setZero();
  ForwardState st;
  run_forward(ckpt, inputs, n_seq, seq_len, st, true);
  return backward(ckpt, st, inputs, targets, grad);
}

Checkpoint train_lm(std::span<const int> tokens, const ModelConfig& config, const TrainHyper& hyper,
                    std::uint64_t seed, TrainLog* log) {
  return train_lm(tokens, {{0, tokens.size()}}, config, hyper, seed, log);
}

Tensor forward_logits(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len) {
  ForwardState st;
  run_forward(ckpt, tokens, n_seq, seq_len, st, false);
  return std::move(st.logits);
}

NllSum sequence_nll(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len) {
  if (seq_len < 2) throw InvalidArgument("sequences need at least 2 tokens");
  std::vector<double> per_seq(static_cast<std::size_t>(n_seq), 0.0);
  ForwardState st;
  // One window per forward pass: a sequence's NLL never depends on batching.
  for (int s = 0; s < n_seq; ++s) {
    const auto window = tokens.subspan(static_cast<std::size_t>(s) * seq_len, static_cast<std::size_t>(seq_len));
    run_forward(ckpt, window, 1, seq_len, st, false);
    double total = 0.0;
    for (int t = 0; t + 1 < seq_len; ++t) total += row_nll(st.logits, t, window[static_cast<std::size_t>(t) + 1]);
    per_seq[static_cast<std::size_t>(s)] = total;
  }
  // Sorted summation keeps the result independent of sequence order.
  std::sort(per_seq.begin(), per_seq.end());
  NllSum out;
  for (double v : per_seq) out.total += v;
  out.count = static_cast<std::size_t>(n_seq) * static_cast<std::size_t>(seq_len - 1);
  return out;
}

double evaluate_ppl(const Checkpoint& ckpt, std::span<const int> stream, int chunk_len, int n_chunks) {
  if (chunk_len < 2 || n_chunks < 1) throw InvalidArgument("need chunk_len >= 2 and n_chunks >= 1");
  const auto needed = static_cast<std::size_t>(chunk_len) * static_cast<std::size_t>(n_chunks);
  if (stream.size() < needed) {
    throw InvalidArgument("insufficient tokens: need " + std::to_string(needed) + ", have " +
                          std::to_string(stream.size()));
  }
  const auto nll = sequence_nll(ckpt, stream.first(needed), n_chunks, chunk_len);
  const double ppl = std::exp(nll.mean());
  if (!std::isfinite(ppl)) throw NumericError("non-finite perplexity");
  return ppl;
}

const ManifestEntry& ActivationDump::entry(const ComponentId& c) const {
  for (const auto& e : manifest)
    if (e.component == c) return e;
  throw InvalidArgument("component " + c.label() + " not in activation dump");
}

bool ActivationDump::contains(const ComponentId& c) const {
  return std::any_of(manifest.begin(), manifest.end(), [&](const ManifestEntry& e) { return e.component == c; });
}

Eigen::Map<const Tensor> ActivationDump::matrix(const ComponentId& c) const {
  const auto& e = entry(c);
  return {data.data() + e.offset, static_cast<Eigen::Index>(e.rows), static_cast<Eigen::Index>(e.cols)};
}

void ActivationDump::validate() const {
  std::size_t rows0 = manifest.empty() ? 0 : manifest.front().rows;
  for (const auto& e : manifest) {
    if (e.offset + e.rows * e.cols > data.size()) throw ArtifactError("dump entry " + e.component.label() + " out of bounds");
    if (e.rows != rows0) throw ArtifactError("dump entries have differing row counts");
  }
  if (category_labels.size() != sequence_boundaries.size()) throw ArtifactError("one category label per sequence required");
  std::size_t prev_end = 0;
  for (const auto& [b, e] : sequence_boundaries) {
    if (b < prev_end || e < b || e > rows0) throw ArtifactError("sequence boundaries overlap or exceed rows");
    prev_end = e;
  }
}

void save_dump(const ActivationDump& dump, const std::string& path, const std::string& extra_json) {
  dump.validate();
  json manifest = json::array();
  std::vector<container::TensorRecord> records;
  for (const auto& e : dump.manifest) {
    manifest.push_back({{"component", e.component.label()}, {"rows", e.rows}, {"cols", e.cols}});
    records.push_back({e.component.label(), {e.rows, e.cols}, {dump.data.data() + e.offset, e.rows * e.cols}});
  }
  json bounds = json::array();
  for (const auto& [b, e] : dump.sequence_boundaries) bounds.push_back({b, e});
  json header = {{"manifest", manifest},
                 {"corpus_fingerprint", dump.corpus_fingerprint},
                 {"sequence_boundaries", bounds},
                 {"category_labels", dump.category_labels},
                 {"sequence_starts", dump.sequence_starts},
                 {"extra", json::parse(extra_json)}};
  container::write(path, kDumpMagic, std::move(header), records);
}

ActivationDump load_dump(const std::string& path) {
  const auto loaded = container::read(path, kDumpMagic);
  ActivationDump dump;
  try {
    const auto& h = loaded.header;
    dump.corpus_fingerprint = h.at("corpus_fingerprint").get<std::uint64_t>();
    for (const auto& b : h.at("sequence_boundaries")) dump.sequence_boundaries.emplace_back(b.at(0), b.at(1));
    dump.category_labels = h.at("category_labels").get<std::vector<int>>();
    dump.sequence_starts = h.at("sequence_starts").get<std::vector<std::size_t>>();
    for (const auto& m : h.at("manifest")) {
      ManifestEntry e;
      e.component = ComponentId::parse(m.at("component").get<std::string>());
      e.rows = m.at("rows").get<std::size_t>();
      e.cols = m.at("cols").get<std::size_t>();
      const auto values = loaded.tensor(e.component.label(), {e.rows, e.cols});
      e.offset = dump.data.size();
      dump.data.insert(dump.data.end(), values.begin(), values.end());
      dump.manifest.push_back(e);
    }
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArtifactError(path + ": malformed manifest: " + e.what());
  }
  dump.validate();
  return dump;
}

std::string load_dump_extra(const std::string& path) {
  return container::read_header(path, kDumpMagic).value("extra", json::object()).dump();
}

CalibrationSample sample_calibration(const std::vector<std::pair<std::size_t, std::size_t>>& regions, int n_seq,
                                     int seq_len, std::uint64_t seed) {
  if (regions.empty() || n_seq < 1 || seq_len < 1) throw InvalidArgument("bad calibration request");
  Rng rng(seed);
  CalibrationSample out;
  const int per = n_seq / static_cast<int>(regions.size());
  const int extra = n_seq % static_cast<int>(regions.size());
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const int count = per + (static_cast<int>(r) < extra ? 1 : 0);
    const auto [b, e] = regions[r];
    if (e - b < static_cast<std::size_t>(seq_len)) throw InvalidArgument("calibration region shorter than seq_len");
    const std::size_t span = e - b - static_cast<std::size_t>(seq_len) + 1;
    for (int i = 0; i < count; ++i) {
      out.starts.push_back(b + rng.below(span));
      out.categories.push_back(static_cast<int>(r));
    }
  }
  return out;
}

ActivationDump capture_activations(const Checkpoint& ckpt, std::span<const int> tokens,
                                   const CalibrationSample& sample, int seq_len,
                                   const std::vector<ComponentId>& components) {
  const auto& cfg = ckpt.config;
  for (const auto& c : components) head_index(cfg, c);  // throws on unknown / non-head
  const std::size_t n_seq = sample.starts.size();
  const std::size_t rows = n_seq * static_cast<std::size_t>(seq_len);
  const auto dh = static_cast<std::size_t>(cfg.d_head);

  ActivationDump dump;
  dump.data.assign(rows * dh * components.size(), 0.0f);
  for (std::size_t i = 0; i < components.size(); ++i) {
    dump.manifest.push_back({components[i], i * rows * dh, rows, dh});
  }
  ForwardState st;
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto start = sample.starts[s];
    if (start + static_cast<std::size_t>(seq_len) > tokens.size()) throw InvalidArgument("calibration window out of range");
    const auto window = tokens.subspan(start, static_cast<std::size_t>(seq_len));
    run_forward(ckpt, window, 1, seq_len, st, false, [&](int layer, const Tensor& ctx) {
      for (const auto& e : dump.manifest) {
        if (e.component.layer != layer) continue;
        for (int t = 0; t < seq_len; ++t) {
          float* dst = dump.data.data() + e.offset + (s * static_cast<std::size_t>(seq_len) + static_cast<std::size_t>(t)) * dh;
          for (std::size_t j = 0; j < dh; ++j) dst[j] = ctx(t, static_cast<Eigen::Index>(e.component.head * cfg.d_head + j));
        }
      }
    });
    dump.sequence_boundaries.emplace_back(s * static_cast<std::size_t>(seq_len), (s + 1) * static_cast<std::size_t>(seq_len));
  }
  dump.category_labels = sample.categories;
  dump.sequence_starts = sample.starts;
  return dump;
}

ActivationDump capture_activations(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len,
                                   const std::vector<ComponentId>& components, std::uint64_t seed) {
  const auto sample = sample_calibration({{0, tokens.size()}}, n_seq, seq_len, seed);
  return capture_activations(ckpt, tokens, sample, seq_len, components);
}

Checkpoint ablate_head(const Checkpoint& ckpt, const ComponentId& c) {
  Checkpoint out = ckpt;
  out.head_slice(c).setZero();
  return out;
}

std::size_t kept_count(double xi, std::size_t n) {
  if (!(xi >= 0.0 && xi <= 1.0)) throw InvalidArgument("retention ratio outside [0,1]");
  // Tolerance absorbs representation error such as 0.7 * 10 = 7.000000000000001.
  const double raw = xi * static_cast<double>(n);
  const double k = std::ceil(raw - 1e-9 * std::max(1.0, raw));
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

Checkpoint apply_prune(const Checkpoint& ckpt, const PruneSpec& spec) {
  const auto heads = head_components(ckpt.config);
  if (spec.retention.size() != heads.size()) throw InvalidArgument("prune spec must cover every head component");
  for (double xi : spec.retention) kept_count(xi, 1);  // range check
  Checkpoint out = ckpt;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    auto slice = out.head_slice(heads[i]);
    const auto n = static_cast<std::size_t>(slice.size());
    const std::size_t keep = kept_count(spec.retention[i], n);
    if (keep == n) continue;
    std::vector<float> flat(n);
    for (Eigen::Index r = 0; r < slice.rows(); ++r)
      for (Eigen::Index col = 0; col < slice.cols(); ++col)
        flat[static_cast<std::size_t>(r * slice.cols() + col)] = slice(r, col);
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    // Largest |w| first, lower flat index on ties.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(flat[a]) > std::fabs(flat[b]); });
    for (std::size_t j = keep; j < n; ++j) {
      const auto idx = static_cast<Eigen::Index>(order[j]);
      slice(idx / slice.cols(), idx % slice.cols()) = 0.0f;
    }
  }
  return out;
}

double head_projection_density(const Checkpoint& ckpt) {
  std::size_t nonzero = 0;
  std::size_t total = 0;
  for (const auto& c : head_components(ckpt.config)) {
    const auto slice = ckpt.head_slice(c);
    total += static_cast<std::size_t>(slice.size());
    for (Eigen::Index r = 0; r < slice.rows(); ++r)
      for (Eigen::Index col = 0; col < slice.cols(); ++col) nonzero += slice(r, col) != 0.0f;
  }
  return total ? static_cast<double>(nonzero) / static_cast<double>(total) : 0.0;
}

}  // namespace cgc::lm
