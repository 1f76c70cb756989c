#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wsc/covariates.hpp"
#include "wsc/matching.hpp"
#include "wsc/synthpop.hpp"

namespace wsc {

// A selection-bias estimate for one intervention and outcome, on the pooled
// standard-deviation (effect size) scale.
struct BiasEstimate {
  std::string intervention_id;
  Outcome outcome = Outcome::math;
  std::string kind;  // "naive" or "match"
  double value = 0.0;
  double se = 0.0;  // NaN when the estimator carries no model SE
  std::size_t n_treated_schools = 0;
  std::size_t n_control_schools = 0;
  std::size_t n_students = 0;
};

// Student-level standard deviation of one outcome over the whole snapshot.
double pooled_outcome_sd(const PopulationSnapshot& pop, Outcome outcome);

// Unadjusted contrast: mean outcome of students in the trial-control schools
// minus mean outcome of students in every unselected school.
BiasEstimate naive_bias(const PopulationSnapshot& pop, const std::string& intervention_id,
                        const std::vector<std::string>& trial_control_ids, Outcome outcome);

// Per-school outcome sums plus pool totals, precomputed once so that repeated
// naive contrasts (the placebo reference) cost O(trial schools) each.
struct OutcomeSums {
  std::vector<std::array<double, kNumOutcomes>> school_sum;  // aligned with pop.schools
  std::vector<std::uint32_t> school_count;
  std::array<double, kNumOutcomes> pool_sum{};
  std::size_t pool_students = 0;
  std::size_t pool_schools = 0;
  std::array<double, kNumOutcomes> pooled_sd{};
};

OutcomeSums build_outcome_sums(const PopulationSnapshot& pop);

BiasEstimate naive_bias(const PopulationSnapshot& pop, const OutcomeSums& sums,
                        const std::string& intervention_id,
                        const std::vector<std::string>& trial_control_ids, Outcome outcome);

// Multilevel adjustment summary for a matched contrast.
struct AdjustedFit {
  double beta = 0.0;  // group-indicator coefficient, effect-size scale
  double se = 0.0;
  double sigma2_school = 0.0;
  double sigma2_resid = 0.0;
  bool converged = false;
  int evaluations = 0;
  std::size_t n_schools = 0;
  std::size_t n_students = 0;
};

// Matched contrast: a random-intercept model of the standardized outcome on a
// group indicator plus student and school covariates over the matched
// schools. The group coefficient is the matched bias estimate.
std::pair<BiasEstimate, AdjustedFit> matched_bias(
    const PopulationSnapshot& pop, const DesignMatrix& design, const StudentDesignInfo& student_info,
    const MatchedSample& matched, const std::string& intervention_id, Outcome outcome);

// naive = observable + unobservable: the matched estimate stands in for the
// unobservable component and the remainder is attributed to covariates.
struct BiasDecomposition {
  double naive = 0.0;
  double matched = 0.0;
  double delta_x = 0.0;  // naive - matched
  double delta_u = 0.0;  // matched
};

BiasDecomposition decompose_bias(const BiasEstimate& naive, const BiasEstimate& matched);

}  // namespace wsc
