#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wsc/covariates.hpp"
#include "wsc/matching.hpp"

namespace wsc {

enum class SpecKind { baseline, interacted, flexible };

constexpr std::array<const char*, 3> kSpecNames = {"baseline", "interacted", "flexible"};

// A natural cubic spline block for one continuous covariate: 5 knots yield 3
// nonlinear basis columns alongside the linear main effect.
struct SplineTerm {
  std::size_t column = 0;           // design column index
  std::array<double, 5> knots{};    // strictly increasing
};

struct PropensitySpec {
  SpecKind kind = SpecKind::baseline;
  std::vector<std::size_t> main_effects;  // design column indices
  std::vector<std::pair<std::size_t, std::size_t>> interactions;
  std::vector<SplineTerm> splines;
};

struct FittedPropensity {
  PropensitySpec spec;
  std::vector<std::string> column_names;  // model-matrix columns after pruning
  std::vector<std::string> dropped_columns;
  Eigen::VectorXd coefficients;  // aligned with column_names
  Eigen::VectorXd standard_errors;
  bool converged = false;
  int iterations = 0;
  double final_score_norm = 0.0;
};

// Model matrix for a spec over the given design rows: intercept first, then
// mains, pairwise products, and spline basis columns.
struct ModelMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> names;
};
ModelMatrix build_model_matrix(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                               const PropensitySpec& spec);

// Logistic regression by iteratively reweighted least squares. Columns that
// are constant or aliased on the fit rows are pruned before fitting; the
// linear predictor is clipped at +/-15 so separated fits stay finite and are
// reported with converged=false.
FittedPropensity fit_logistic(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                              const std::vector<std::uint8_t>& labels, const PropensitySpec& spec);

// Clipped linear predictor for arbitrary design rows under a fitted model.
std::vector<double> propensity_logits(const FittedPropensity& fit, const DesignMatrix& design,
                                      const std::vector<std::size_t>& rows);

PropensitySpec baseline_spec(const DesignMatrix& design);

struct CandidateSpecs {
  std::array<PropensitySpec, 3> specs;  // baseline, interacted, flexible
  std::vector<Warning> warnings;
};

// Builds the three-spec ladder from a fitted baseline model: covariates with
// two-sided p below alpha gain pairwise interactions with every other
// covariate; the flexible spec adds spline blocks for continuous covariates
// with enough distinct values on the fit rows.
CandidateSpecs enumerate_candidate_specs(const DesignMatrix& design,
                                         const std::vector<std::size_t>& fit_rows,
                                         const FittedPropensity& baseline, double alpha = 0.05);

struct BalanceEntry {
  std::string covariate;
  double smd = 0.0;
  bool violation = false;
  bool degenerate = false;  // zero pool spread, smd reported as zero
};

struct BalanceReport {
  std::vector<BalanceEntry> entries;
  int violation_count = 0;
};

// Standardized mean differences between matched treated and control rows on
// the raw covariate scale, with the spread taken over the trimmed pool.
// Violation threshold: |smd| > 0.25.
BalanceReport balance_report(const MatchedSample& matched, const DesignMatrix& design);

struct SpecSelection {
  std::size_t selected = 0;  // index into the candidate array
  std::array<bool, 3> feasible{};
  std::array<int, 3> violations{};
  std::array<FittedPropensity, 3> fits;
  std::array<MatchedSample, 3> matched;
  std::array<BalanceReport, 3> balance;
  std::vector<Warning> warnings;
};

// Fits, matches, and scores every candidate spec, then picks the one with the
// fewest balance violations; ties go to the simpler spec (array order). The
// matcher callback maps a fitted model to a matched sample and may throw
// NoOverlapError or MatchingError, which marks that candidate infeasible.
// Throws NoOverlapError when no candidate is feasible.
SpecSelection select_spec(
    const DesignMatrix& design, const std::vector<std::size_t>& fit_rows,
    const std::vector<std::uint8_t>& labels, const CandidateSpecs& candidates,
    const std::function<MatchedSample(const FittedPropensity&)>& matcher);

}  // namespace wsc
