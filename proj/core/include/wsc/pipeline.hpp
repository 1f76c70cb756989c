#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsc/biasest.hpp"
#include "wsc/covariates.hpp"
#include "wsc/meta.hpp"
#include "wsc/nullsim.hpp"
#include "wsc/propensity.hpp"
#include "wsc/synthpop.hpp"

namespace wsc {

// Analysis settings shared by the observed run and the placebo references.
// All randomness in a pipeline run derives from scenario.rng_seed.
struct AnalysisConfig {
  std::vector<InterventionSpec> interventions;
  int replicates = 500;
  double caliper_factor = 0.2;
  std::optional<double> caliper_width;
  bool strict_matching = false;
  double alpha = 0.05;
  bool include_treated_in_fit = true;
  int threads = 0;

  AnalysisSettings settings() const;
};

struct PipelineConfig {
  ScenarioConfig scenario;
  AnalysisConfig analysis;

  // Parses the config file and applies dotted-path overrides
  // (e.g. "analysis.replicates=50", "scenario.rng_seed=7") on top.
  static PipelineConfig load(const std::string& path, const std::vector<std::string>& overrides);
  static PipelineConfig from_json_text(const std::string& text,
                                       const std::vector<std::string>& overrides);
  nlohmann::ordered_json to_json() const;
  void validate() const;
};

// Canonical layout of one run directory.
struct StagePaths {
  std::string out_dir;
  explicit StagePaths(std::string dir) : out_dir(std::move(dir)) {}

  std::string population_dir() const { return out_dir + "/population"; }
  std::string design_csv() const { return out_dir + "/design.csv"; }
  std::string design_manifest() const { return out_dir + "/design_manifest.json"; }
  std::string interventions_json() const { return out_dir + "/interventions.json"; }
  std::string pairs_csv(const std::string& id) const { return out_dir + "/pairs_" + id + ".csv"; }
  std::string balance_csv(const std::string& id) const {
    return out_dir + "/balance_" + id + ".csv";
  }
  std::string bias_csv() const { return out_dir + "/bias_estimates.csv"; }
  std::string null_draws_csv(NullMode mode) const {
    return out_dir + (mode == NullMode::naive ? "/null_naive_draws.csv" : "/null_match_draws.csv");
  }
  std::string null_summary_json(NullMode mode) const {
    return out_dir +
           (mode == NullMode::naive ? "/null_naive_summary.json" : "/null_match_summary.json");
  }
  std::string meta_json() const { return out_dir + "/meta.json"; }
  std::string meta_cells_csv() const { return out_dir + "/meta_cells.csv"; }
  std::string report_json() const { return out_dir + "/report.json"; }
  std::string timings_json() const { return out_dir + "/timings.json"; }
  std::string config_echo_json() const { return out_dir + "/config_used.json"; }
};

struct ObservedCell {
  std::string intervention_id;
  Outcome outcome = Outcome::math;
  BiasEstimate naive;
  BiasEstimate matched;
  AdjustedFit fit;
  double true_bias = 0.0;
};

struct ObservedIntervention {
  InterventionSpec spec;
  std::vector<std::string> trial_control_ids;
  std::vector<std::string> trial_treated_ids;
  std::size_t selected_spec = 0;
  std::array<bool, 3> feasible{};
  std::array<int, 3> violations{};
  std::size_t n_pairs = 0;
  std::size_t n_unmatched = 0;
  double caliper_width = 0.0;
  std::size_t trimmed_pool_size = 0;
  MatchedSample matched;
  BalanceReport balance;
  std::vector<Warning> warnings;
};

struct ObservedResults {
  std::vector<ObservedIntervention> interventions;
  std::vector<ObservedCell> cells;
  // Machine-readable per-intervention failures: id, category, message.
  std::vector<std::array<std::string, 3>> failures;
};

// Stage functions; each persists its artifacts under `paths` and returns the
// in-memory result so callers can chain without reloading.
PopulationSnapshot stage_generate(const PipelineConfig& config, const StagePaths& paths);
DesignMatrix stage_prepare(const PopulationSnapshot& pop, const StagePaths& paths);
ObservedResults stage_match_estimate(const PipelineConfig& config, const PopulationSnapshot& pop,
                                     const DesignMatrix& design, const StagePaths& paths);
NullReference stage_nullsim(const PipelineConfig& config, const PopulationSnapshot& pop,
                            const DesignMatrix& design, NullMode mode, const StagePaths& paths);

struct MetaOutputs {
  MetaInput input;
  MetaResult result;
  InterventionMeta intervention_level;
  std::array<RegressionFit, 3> regressions;  // outcome dummies, size, violations
  bool regressions_ok = false;
  std::string regressions_error;
};

MetaOutputs stage_meta(const PipelineConfig& config, const ObservedResults& observed,
                       const NullReference& match_ref, const StagePaths& paths);

nlohmann::ordered_json build_report(const PipelineConfig& config, const PopulationSnapshot& pop,
                                    const DesignMatrix& design, const ObservedResults& observed,
                                    const NullReference& naive_ref,
                                    const NullReference& match_ref, const MetaOutputs& meta,
                                    const StagePaths& paths);

// Reloaders for resumable stages.
ObservedResults load_observed(const PopulationSnapshot& pop, const DesignMatrix& design,
                              const StagePaths& paths);
void write_bias_estimates(const std::vector<ObservedCell>& cells, const std::string& path);

struct PipelineOutcome {
  bool ok = false;
  nlohmann::ordered_json report;
  std::string error;  // empty on success
};

// Runs every stage in order, writes all artifacts plus report.json and
// timings.json. On stage failure the partial outputs stay on disk, the error
// is recorded in the report, and ok is false.
PipelineOutcome run_pipeline(const PipelineConfig& config, const std::string& out_dir);

}  // namespace wsc
