#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <vector>

namespace wsc {

// Greedy rank detection on a Gram matrix G = X^T X. Walks columns in order and
// keeps a column only if its Schur complement against the kept set exceeds
// rel_tol * G(c, c). Earlier columns win ties, so callers should place columns
// that must survive (intercept, treatment indicator) first.
std::vector<std::size_t> greedy_rank_prune(const Eigen::MatrixXd& gram,
                                           double rel_tol = 1e-10);

// Linear-interpolation quantile on an already sorted vector, matching the
// common statistical-package default. p in [0, 1].
double sorted_quantile(const std::vector<double>& sorted, double p);

// Two-sided tail probability of a standard normal at |z|.
inline double two_sided_normal_p(double z) {
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Unbiased sample variance; zero for fewer than two values.
inline double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (const double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double sample_sd(const std::vector<double>& v) { return std::sqrt(sample_variance(v)); }

}  // namespace wsc
