#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wsc/synthpop.hpp"

namespace wsc {

struct MetaCell {
  std::string intervention_id;
  Outcome outcome = Outcome::math;
  double beta_hat = 0.0;
  double sigma2_hat = 0.0;  // sampling variance from the null reference
};

struct MetaInput {
  std::vector<MetaCell> cells;
};

// Within-intervention correlation of the bias estimates: a random-intercept
// model of beta_hat grouped by intervention, fitted with the same REML
// engine as the outcome models.
double estimate_icc(const MetaInput& input);

// Design-effect adjustment: K = n_cells / (1 + (k_outcomes - 1) * rho).
double effective_sample_size(std::size_t n_cells, std::size_t k_outcomes, double rho_hat);

struct MomResult {
  double tau2_hat = 0.0;
  double q = 0.0;
  double beta_bar = 0.0;  // fixed-effect precision-weighted mean
};

// Method-of-moments between-cell variance with an effective cell count:
// tau2 = max(0, (Q - (K-1)) / (sum w - sum w^2 / sum w)), w = 1/sigma2.
MomResult tau2_mom(const MetaInput& input, double k_effective);

// Random-effects pooled mean with weights (sigma2 + tau2)^-1.
double pooled_mean_nu(const MetaInput& input, double tau2_hat);

struct EbResult {
  std::vector<double> shrunken;     // beta* = lambda nu + (1 - lambda) beta
  std::vector<double> constrained;  // affine rescale of beta* to variance tau2
  std::vector<double> lambdas;      // shrinkage factors sigma2 / (sigma2 + tau2)
};

// Empirical-Bayes shrinkage toward nu_hat followed by the variance-matching
// rescale; with tau2_hat = 0 every constrained estimate collapses to the
// mean of the shrunken ones.
EbResult eb_constrained(const MetaInput& input, double nu_hat, double tau2_hat);

struct MetaResult {
  double nu_hat = 0.0;
  double tau2_hat = 0.0;
  double q = 0.0;
  double k_effective = 0.0;
  double rho_hat = 0.0;
  std::vector<double> shrunken;
  std::vector<double> constrained;
  std::vector<double> lambdas;
  std::vector<double> weights;  // omega = (sigma2 + tau2)^-1
  double mean_abs_constrained = 0.0;
};

// The full cell-level meta-analysis in estimator order: ICC, effective K,
// method-of-moments tau2, pooled mean, shrinkage.
MetaResult run_meta(const MetaInput& input);

struct InterventionMeta {
  double tau2_hat = 0.0;
  double q = 0.0;
  double beta_bar = 0.0;
  std::size_t n_interventions = 0;
  std::array<double, 2> ci95{};  // test-inversion interval for tau2
};

// Sensitivity analysis at the intervention level: beta and sigma (not
// sigma^2) averaged across the three outcomes per intervention, plain
// intervention count as K, and a tau2 confidence interval by inverting the
// simulated null distribution of Q over a grid.
InterventionMeta intervention_level_meta(const MetaInput& input, std::uint64_t ci_seed);

enum class BiasPredictor { outcome_dummies, sample_size, violation_count };

struct RegressionCell {
  Outcome outcome = Outcome::math;
  double sample_size_thousands = 0.0;
  double violation_count = 0.0;
};

struct RegressionFit {
  std::vector<std::string> names;  // includes the intercept
  Eigen::VectorXd coefficients;
  Eigen::VectorXd standard_errors;
  double r2 = 0.0;
  double f_stat = 0.0;
  std::size_t df1 = 0;
  std::size_t df2 = 0;
  std::size_t n = 0;
};

// One of the three canned magnitude regressions of |beta| on cell
// descriptors, by ordinary least squares with conventional errors. Throws
// NumericError naming the collinear columns when the design is rank
// deficient.
RegressionFit predict_bias_magnitude(const std::vector<double>& abs_bias,
                                     const std::vector<RegressionCell>& cells,
                                     BiasPredictor predictors);

// JSON scalars plus a per-cell CSV (beta, sigma2, lambda, shrunken,
// constrained).
void save_meta(const MetaResult& result, const MetaInput& input, const std::string& json_path,
               const std::string& csv_path);

}  // namespace wsc
