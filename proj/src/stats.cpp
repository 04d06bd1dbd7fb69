#include "cgc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "cgc/error.hpp"
#include "json.hpp"

namespace cgc::stats {

namespace {

void check_inputs(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("correlation inputs differ in length");
  if (x.size() < 3) throw InvalidArgument("correlation needs n >= 3");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InvalidArgument("correlation inputs must be finite");
  }
}

constexpr std::size_t kMaxPermutationN = 10;

// Fraction of the n! pairings whose |r| reaches the observed |r|.
template <typename Coef>
double permutation_p_value(std::span<const double> x, std::span<const double> y, double observed, Coef coef) {
  if (x.size() > kMaxPermutationN) throw InvalidArgument("exact permutation p-value limited to n <= 10");
  std::vector<std::size_t> perm(y.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> y_perm(y.size());
  const double threshold = std::fabs(observed) - 1e-12;
  std::size_t hits = 0;
  std::size_t total = 0;
  do {
    for (std::size_t i = 0; i < perm.size(); ++i) y_perm[i] = y[perm[i]];
    if (std::fabs(coef(x, std::span<const double>(y_perm))) >= threshold) ++hits;
    ++total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

std::vector<double> fractional_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson_coefficient(std::span<const double> x, std::span<const double> y) {
  check_inputs(x, y);
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw InvalidArgument("correlation undefined: zero variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double t_test_p_value(double r, std::size_t n) {
  if (n < 3) throw InvalidArgument("p-value needs n >= 3");
  const double dof = static_cast<double>(n - 2);
  if (std::fabs(r) >= 1.0) return 0.0;
  const double t = std::fabs(r) * std::sqrt(dof / (1.0 - r * r));
  const boost::math::students_t dist(dof);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), 0.0, 1.0);
}

CorrelationResult pearson(std::span<const double> x, std::span<const double> y, PValueMode mode) {
  CorrelationResult out;
  out.method = Method::pearson;
  out.n = x.size();
  out.coefficient = pearson_coefficient(x, y);
  out.p_value = mode == PValueMode::t_approx
                    ? t_test_p_value(out.coefficient, out.n)
                    : permutation_p_value(x, y, out.coefficient, [](auto a, auto b) { return pearson_coefficient(a, b); });
  return out;
}

CorrelationResult spearman(std::span<const double> x, std::span<const double> y, PValueMode mode) {
  check_inputs(x, y);
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  CorrelationResult out;
  out.method = Method::spearman;
  out.n = x.size();
  out.coefficient = pearson_coefficient(rx, ry);
  // Permuting y permutes its ranks, so the rank vectors are permuted directly.
  out.p_value = mode == PValueMode::t_approx
                    ? t_test_p_value(out.coefficient, out.n)
                    : permutation_p_value(rx, ry, out.coefficient, [](auto a, auto b) { return pearson_coefficient(a, b); });
  return out;
}

std::string method_name(Method m) { return m == Method::spearman ? "spearman" : "pearson"; }

std::string to_json(const CorrelationResult& r) {
  const nlohmann::json j = {{"method", method_name(r.method)}, {"coefficient", r.coefficient}, {"p_value", r.p_value}, {"n", r.n}};
  return j.dump(2);
}

}  // namespace cgc::stats
