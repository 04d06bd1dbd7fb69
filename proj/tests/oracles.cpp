#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace oracle {

namespace {

Mat to_mat(const cgc::Tensor& t) {
  Mat m(static_cast<std::size_t>(t.rows()), std::vector<double>(static_cast<std::size_t>(t.cols())));
  for (Eigen::Index i = 0; i < t.rows(); ++i)
    for (Eigen::Index j = 0; j < t.cols(); ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = t(i, j);
  return m;
}

std::vector<double> row0(const cgc::Tensor& t) { return to_mat(t)[0]; }

Mat layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

std::vector<double> ranks(const std::vector<double>& x) {
  // rank = 1 + (#less) + (#equal - 1) / 2
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      if (v < x[i]) ++less;
      if (v == x[i]) ++equal;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

}  // namespace

Forward forward(const cgc::lm::Checkpoint& ck, const std::vector<int>& tokens, int skip_layer, int skip_head) {
  const auto& cfg = ck.config;
  const int d = cfg.d_model(), dh = cfg.d_head;
  const std::size_t t_len = tokens.size();
  const Mat tok = to_mat(ck.tok_emb), pos = to_mat(ck.pos_emb);
  Mat x(t_len, std::vector<double>(static_cast<std::size_t>(d)));
  for (std::size_t t = 0; t < t_len; ++t)
    for (int j = 0; j < d; ++j) x[t][j] = tok[static_cast<std::size_t>(tokens[t])][j] + pos[t][j];

  Forward out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = ck.layers[static_cast<std::size_t>(l)];
    const Mat a = layer_norm(x, row0(w.ln1_g), row0(w.ln1_b));
    const Mat q = matmul(a, to_mat(w.w_q)), k = matmul(a, to_mat(w.w_k)), v = matmul(a, to_mat(w.w_v));
    Mat ctx(t_len, std::vector<double>(static_cast<std::size_t>(d), 0.0));
    for (int h = 0; h < cfg.n_heads; ++h) {
      for (std::size_t i = 0; i < t_len; ++i) {
        std::vector<double> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (int c = 0; c < dh; ++c) ctx[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
      }
    }
    out.ctx.push_back(ctx);
    Mat ctx_used = ctx;
    if (l == skip_layer)
      for (auto& row : ctx_used)
        for (int c = 0; c < dh; ++c) row[skip_head * dh + c] = 0.0;
    const Mat proj = matmul(ctx_used, to_mat(w.w_o));
    for (std::size_t i = 0; i < t_len; ++i)
      for (int j = 0; j < d; ++j) x[i][j] += proj[i][j];
    const Mat a2 = layer_norm(x, row0(w.ln2_g), row0(w.ln2_b));
    Mat hdn = matmul(a2, to_mat(w.w_fc1));
    const auto b1 = row0(w.b_fc1), b2 = row0(w.b_fc2);
    for (auto& row : hdn)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = gelu(row[j] + b1[j]);
    const Mat f = matmul(hdn, to_mat(w.w_fc2));
    for (std::size_t i = 0; i < t_len; ++i)
      for (int j = 0; j < d; ++j) x[i][j] += f[i][j] + b2[j];
  }
  out.logits = matmul(layer_norm(x, row0(ck.lnf_g), row0(ck.lnf_b)), to_mat(ck.w_out));
  return out;
}

Density density(const Mat& a, const std::vector<std::pair<std::size_t, std::size_t>>& sequences,
                const std::vector<int>& categories, double tau_min, double gamma, const std::array<double, 3>& alpha) {
  Density out;
  const std::size_t t_len = a.size(), f = a[0].size();
  std::vector<double> freq(f, 0.0);
  for (const auto& row : a)
    for (std::size_t j = 0; j < f; ++j)
      if (row[j] != 0.0) freq[j] += 1.0;
  for (double& p : freq) p /= static_cast<double>(t_len);
  for (double p : freq)
    if (p >= tau_min) ++out.beta;
  out.beta_norm = static_cast<double>(out.beta) / static_cast<double>(f);

  const double total = std::accumulate(freq.begin(), freq.end(), 0.0);
  if (total == 0.0) {
    out.degenerate = true;
  } else {
    for (double p : freq)
      if (p > 0.0) out.entropy -= p / total * std::log(p / total);
    out.entropy_norm = f > 1 ? out.entropy / std::log(static_cast<double>(f)) : 0.0;
  }

  std::vector<std::set<std::size_t>> active(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s)
    for (std::size_t t = sequences[s].first; t < sequences[s].second; ++t)
      for (std::size_t j = 0; j < f; ++j)
        if (a[t][j] != 0.0) active[s].insert(j);
  double sum = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    for (std::size_t j = i + 1; j < sequences.size(); ++j) {
      if (categories[i] == categories[j]) continue;
      std::size_t inter = 0;
      for (auto v : active[i]) inter += active[j].count(v);
      const std::size_t uni = active[i].size() + active[j].size() - inter;
      sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
      ++pairs;
    }
  }
  out.psi = sum / pairs;

  const double x[3] = {out.beta_norm, out.entropy_norm, out.psi};
  out.delta = 1.0;
  for (int i = 0; i < 3; ++i) out.delta *= x[i] > 0.0 ? std::pow(x[i], alpha[i] / gamma) : 0.0;
  if (out.degenerate) out.delta = 0.0;
  return out;
}

Mat wanda(const Mat& w, const std::vector<double>& norms) {
  Mat s = w;
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < w[i].size(); ++j) s[i][j] = std::fabs(w[i][j]) * norms[j];
  return s;
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double spearman_r(const std::vector<double>& x, const std::vector<double>& y) { return pearson_r(ranks(x), ranks(y)); }

double permutation_p(const std::vector<double>& x, const std::vector<double>& y, bool spearman) {
  auto coef = [&](const std::vector<double>& yy) { return spearman ? spearman_r(x, yy) : pearson_r(x, yy); };
  const double observed = std::fabs(coef(y));
  std::vector<std::size_t> idx(y.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::size_t hit = 0, total = 0;
  do {
    std::vector<double> yy;
    for (auto i : idx) yy.push_back(y[i]);
    if (std::fabs(coef(yy)) >= observed - 1e-12) ++hit;
    ++total;
  } while (std::next_permutation(idx.begin(), idx.end()));
  return static_cast<double>(hit) / static_cast<double>(total);
}

std::vector<GridPoint> feasible_grid(const std::vector<double>& grid, const std::vector<std::size_t>& sizes,
                                     int floor_level, const std::vector<int>& ceiling_levels, double budget,
                                     const std::function<double(const std::vector<double>&)>& fitness) {
  std::vector<GridPoint> out;
  std::vector<int> lv(sizes.size(), floor_level);
  for (;;) {
    double mass = 0.0;
    std::vector<double> r;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      r.push_back(grid[static_cast<std::size_t>(lv[c])]);
      mass += r.back() * static_cast<double>(sizes[c]);
    }
    if (mass <= budget + 1e-9) out.push_back({lv, fitness ? fitness(r) : 0.0});
    std::size_t c = 0;
    while (c < lv.size() && lv[c] == ceiling_levels[c]) lv[c++] = floor_level;
    if (c == lv.size()) break;
    ++lv[c];
  }
  return out;
}

double destruction(const Mat& directions, const std::vector<double>& weights, int removed, double eta) {
  const std::size_t d = directions[0].size();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
    if (__builtin_popcount(mask) != removed) continue;
    double hit = 0.0, total = 0.0;
    for (std::size_t f = 0; f < directions.size(); ++f) {
      double rem = 0.0, all = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double e = directions[f][i] * directions[f][i];
        all += e;
        if (mask & (1u << i)) rem += e;
      }
      if (rem / all > eta) hit += weights[f];
      total += weights[f];
    }
    sum += hit / total;
    ++count;
  }
  return sum / static_cast<double>(count);
}

}  // namespace oracle
