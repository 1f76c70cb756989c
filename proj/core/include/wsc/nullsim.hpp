#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wsc/biasest.hpp"
#include "wsc/covariates.hpp"
#include "wsc/propensity.hpp"
#include "wsc/synthpop.hpp"

namespace wsc {

struct InterventionSpec {
  std::string id;
  int n_trial_controls = 0;
};

struct AnalysisSettings {
  std::optional<double> caliper_width;  // fixed override; otherwise factor * SD
  double caliper_factor = 0.2;
  bool strict = false;      // unmatched treated schools become errors
  double alpha = 0.05;      // significance threshold for interaction anchors
  bool include_treated_in_fit = true;  // treated trial arm enters the propensity fit
};

// Everything produced by one treated-draw analysis: the propensity spec
// search, the matched sample under the selected spec, and the naive and
// matched bias estimates for each outcome.
struct MatchedAnalysis {
  SpecSelection selection;
  std::size_t trimmed_pool_size = 0;
  std::size_t trim_dropped = 0;
  std::array<BiasEstimate, kNumOutcomes> naive;
  std::array<BiasEstimate, kNumOutcomes> matched;
  std::array<AdjustedFit, kNumOutcomes> fits;
};

// Full analysis for one draw of trial-control schools against the comparison
// pool: fit the three propensity specifications, trim to common support,
// match within the caliper, keep the spec with fewest balance violations,
// then estimate naive and multilevel matched bias per outcome. extra_trial_ids
// (the treated trial arm) enter the propensity fit with trial labels but are
// never matched; placebo analyses pass an empty list. The match-order
// substream is (order_seed, order_unit). Throws NoOverlapError when every
// specification fails, MatchingError under strict settings.
MatchedAnalysis analyze_intervention(const PopulationSnapshot& pop, const DesignMatrix& design,
                                     const StudentDesignInfo& student_info,
                                     const std::string& intervention_id,
                                     const std::vector<std::string>& trial_control_ids,
                                     const std::vector<std::string>& extra_trial_ids,
                                     const AnalysisSettings& settings, std::uint64_t order_seed,
                                     std::uint64_t order_unit);

enum class NullMode { naive, match };

struct NullReference {
  NullMode mode = NullMode::naive;
  int replicates = 0;
  std::vector<std::string> intervention_ids;
  // draws[r][w * kNumOutcomes + k]; NaN marks a failed cell.
  std::vector<std::vector<double>> draws;
  std::vector<double> mu_null;     // per replicate; NaN when flagged
  std::vector<double> sigma_null;  // per replicate; NaN when flagged
  std::vector<double> per_cell_variance;
  std::uint64_t master_seed = 0;
  int failed_replicates = 0;  // replicates with at least one failed cell

  std::size_t cell(std::size_t intervention, Outcome outcome) const {
    return intervention * static_cast<std::size_t>(kNumOutcomes) +
           static_cast<std::size_t>(outcome);
  }
};

// Placebo reference distribution: per replicate and intervention, draw a
// placebo control group from the comparison pool and run either the naive
// contrast or the full matched pipeline. Draw substreams are indexed by
// (master_seed, mode, replicate, intervention), so any replicate is
// reproducible in isolation and results do not depend on thread count.
// Matching failures flag the replicate and are excluded from summaries.
NullReference run_null_reference(const PopulationSnapshot& pop, const DesignMatrix& design,
                                 const std::vector<InterventionSpec>& interventions,
                                 NullMode mode, int replicates, std::uint64_t master_seed,
                                 const AnalysisSettings& settings = {}, int threads = 0);

struct NullSummary {
  double mu_hat = 0.0;
  double sigma_hat = 0.0;
};

// Signed mean and n-1 standard deviation of one set of cell values.
NullSummary summarize_reference(const std::vector<double>& cells);

// Two-sided placebo p-value with add-one correction, centered at the
// reference mean. NaN reference entries (failed replicates) are skipped.
double p_value(double observed, const std::vector<double>& reference);

// One CSV of draws (replicate x cell) plus a JSON summary sidecar.
void save_null_reference(const NullReference& ref, const std::string& csv_path,
                         const std::string& json_path);
NullReference load_null_reference(const std::string& csv_path, const std::string& json_path);

}  // namespace wsc
