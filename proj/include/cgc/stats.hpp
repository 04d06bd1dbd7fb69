#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cgc::stats {

enum class Method { spearman, pearson };

// How the two-sided p-value is obtained.
enum class PValueMode {
  t_approx,     // t = r * sqrt((n-2)/(1-r^2)) against Student t with n-2 dof
  permutation,  // exact enumeration of all n! pairings; n <= 10 only
};

struct CorrelationResult {
  double coefficient = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
  Method method = Method::pearson;
};

// Average (fractional) ranks, 1-based.
std::vector<double> fractional_ranks(std::span<const double> x);

// Product-moment coefficient. Throws InvalidArgument on length mismatch,
// n < 3, or zero variance in either input.
double pearson_coefficient(std::span<const double> x, std::span<const double> y);

CorrelationResult pearson(std::span<const double> x, std::span<const double> y,
                          PValueMode mode = PValueMode::t_approx);
CorrelationResult spearman(std::span<const double> x, std::span<const double> y,
                           PValueMode mode = PValueMode::t_approx);

// Two-sided p-value of a correlation coefficient under the t approximation.
double t_test_p_value(double r, std::size_t n);

std::string method_name(Method m);
std::string to_json(const CorrelationResult& r);

}  // namespace cgc::stats
