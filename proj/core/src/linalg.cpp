#include "wsc/linalg.hpp"

#include <algorithm>

#include "wsc/errors.hpp"

namespace wsc {

std::vector<std::size_t> greedy_rank_prune(const Eigen::MatrixXd& gram, double rel_tol) {
  const std::size_t p = static_cast<std::size_t>(gram.rows());
  std::vector<std::size_t> kept;
  if (p == 0) return kept;

  // Incremental Cholesky of the kept-set Gram matrix. A candidate column is
  // dependent when its residual norm against the kept set vanishes.
  Eigen::MatrixXd l(p, p);
  for (std::size_t c = 0; c < p; ++c) {
    const double diag = gram(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
    if (!(diag > 0.0)) continue;
    const std::size_t k = kept.size();
    Eigen::VectorXd w(k);
    for (std::size_t i = 0; i < k; ++i)
      w(static_cast<Eigen::Index>(i)) = gram(static_cast<Eigen::Index>(kept[i]),
                                             static_cast<Eigen::Index>(c));
    if (k > 0) {
      l.topLeftCorner(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k))
          .triangularView<Eigen::Lower>()
          .solveInPlace(w);
    }
    const double schur = diag - w.squaredNorm();
    if (schur <= rel_tol * diag) continue;
    l.row(static_cast<Eigen::Index>(k)).head(static_cast<Eigen::Index>(k)) = w.transpose();
    l(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) = std::sqrt(schur);
    kept.push_back(c);
  }
  return kept;
}

double sorted_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ArgumentError("quantile of an empty vector");
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  const double frac = h - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace wsc
