#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace wsc {

// One side of a matching problem: unit ids, propensity logit scores, and the
// feature rows used for Mahalanobis distance, all index-aligned.
struct MatchInput {
  std::vector<std::string> ids;
  std::vector<double> logits;
  Eigen::MatrixXd features;  // ids.size() rows
};

struct TrimResult {
  std::vector<std::size_t> kept;  // indices into the pool input
  std::size_t dropped = 0;
  double logit_min = 0.0;  // treated-side support bounds applied
  double logit_max = 0.0;
};

// Common-support trim: keeps pool units whose logit lies inside the closed
// range spanned by the treated-side logits. Throws NoOverlapError when the
// trimmed pool is empty.
TrimResult trim_common_support(const std::vector<double>& treated_logits,
                               const std::vector<double>& pool_logits);

// Caliper width as a multiple of the logit standard deviation over the
// trimmed pool. Throws NumericError when the spread is zero.
double caliper_from_logits(const std::vector<double>& trimmed_pool_logits,
                           double factor = 0.2);

// Inverse of the ridge-stabilized sample covariance of the pool feature rows.
// Throws NumericError when the matrix is not positive definite after the
// ridge, naming the offending eigenvalue.
Eigen::MatrixXd pool_covariance_inverse(const Eigen::MatrixXd& pool_features,
                                        double ridge = 1e-8);

double mahalanobis_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                            const Eigen::MatrixXd& cov_inverse);

struct MatchedPair {
  std::string treated_id;
  std::string control_id;
  double distance = 0.0;
  double logit_gap = 0.0;
};

struct UnmatchedUnit {
  std::string treated_id;
  std::size_t candidates_in_caliper = 0;  // free candidates when processed
};

struct MatchedSample {
  std::vector<MatchedPair> pairs;        // sorted by treated_id
  std::vector<UnmatchedUnit> unmatched;  // sorted by treated_id
  double caliper_width = 0.0;
  std::uint64_t order_seed = 0;
  std::uint64_t order_unit = 0;
  std::vector<std::string> trimmed_pool_ids;  // support for balance denominators
};

// Greedy one-to-one caliper matching without replacement. Treated units are
// processed in a seeded random order (substream (order_seed, order_unit));
// each takes its nearest free pool unit within the caliper by Mahalanobis
// distance, breaking exact ties toward the smaller control id. The pool must
// already be support-trimmed. strict turns unmatched treated units into a
// MatchingError.
MatchedSample match_one_to_one(const MatchInput& treated, const MatchInput& pool,
                               const Eigen::MatrixXd& cov_inverse, double caliper_width,
                               std::uint64_t order_seed, std::uint64_t order_unit = 0,
                               bool strict = false);

}  // namespace wsc
