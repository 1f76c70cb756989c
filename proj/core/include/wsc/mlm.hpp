#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

namespace wsc {

// Per-cluster sufficient statistics for a Gaussian random-intercept model
// y = X b + a_cluster + e. All REML quantities reduce to these because the
// marginal precision is block diagonal with blocks I - (r/(1+r n_j)) J.
struct ClusterStats {
  std::size_t n = 0;
  Eigen::MatrixXd xtx;   // X_j^T X_j
  Eigen::VectorXd xty;   // X_j^T y_j
  Eigen::VectorXd xsum;  // column sums of X_j
  double ysum = 0.0;
  double yty = 0.0;
};

struct MlmData {
  std::size_t n_obs = 0;
  std::size_t n_params = 0;
  std::vector<ClusterStats> clusters;

  // cluster[i] maps observation i to a cluster index in [0, n_clusters).
  static MlmData build(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const std::vector<std::size_t>& cluster);
};

struct MlmFitResult {
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  double sigma2_resid = 0.0;
  double sigma2_cluster = 0.0;
  double ratio = 0.0;  // sigma2_cluster / sigma2_resid
  double criterion = 0.0;
  int evaluations = 0;
  bool converged = false;
  std::vector<std::pair<double, double>> trace;  // (ratio, criterion) evaluations
};

// Profiled REML for the random-intercept model. The single free parameter is
// the variance ratio; a bracketing grid scan is refined by golden-section
// search on the log scale. Throws NumericError with the evaluation trace if
// the budget of max_evaluations is exhausted before the bracket shrinks.
MlmFitResult fit_random_intercept(const MlmData& data,
                                  std::optional<double> forced_ratio = std::nullopt,
                                  int max_evaluations = 200);

}  // namespace wsc
