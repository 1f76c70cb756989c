#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "wsc/errors.hpp"
#include "wsc/pipeline.hpp"

using namespace wsc;

namespace {

std::string tiny_config_text() {
  return R"({
    "scenario": {
      "n_schools": 250,
      "students_per_school_mean": 20,
      "students_per_school_dispersion": 5,
      "n_trial_controls": 25,
      "selection_coefficients": [0.4, 0.3, 0.5, 0.2, 0.3, 0.25],
      "rng_seed": 424242,
      "selection_base_rate": 0.25
    },
    "analysis": {
      "interventions": [
        {"id": "iv01", "n_trial_controls": 25},
        {"id": "iv02", "n_trial_controls": 25}
      ],
      "replicates": 6,
      "threads": 1
    }
  })";
}

std::filesystem::path fresh_dir(const std::string& leaf) {
  const auto dir = std::filesystem::temp_directory_path() / leaf;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("pipeline config parses with defaults and applies overrides") {
  const PipelineConfig base = PipelineConfig::from_json_text(tiny_config_text(), {});
  CHECK(base.scenario.n_schools == 250);
  CHECK(base.scenario.rng_seed == 424242);
  CHECK(base.analysis.replicates == 6);
  CHECK(base.analysis.caliper_factor == 0.2);
  CHECK_FALSE(base.analysis.caliper_width.has_value());
  CHECK_FALSE(base.analysis.strict_matching);
  CHECK(base.analysis.include_treated_in_fit);
  REQUIRE(base.analysis.interventions.size() == 2);
  CHECK(base.analysis.interventions[0].id == "iv01");
  CHECK(base.analysis.interventions[1].id == "iv02");

  const PipelineConfig tweaked = PipelineConfig::from_json_text(
      tiny_config_text(), {"scenario.rng_seed=7", "analysis.replicates=11",
                           "analysis.caliper_width=0.4", "analysis.strict_matching=true"});
  CHECK(tweaked.scenario.rng_seed == 7);
  CHECK(tweaked.analysis.replicates == 11);
  REQUIRE(tweaked.analysis.caliper_width.has_value());
  CHECK(*tweaked.analysis.caliper_width == 0.4);
  CHECK(tweaked.analysis.strict_matching);

  // Round trip through to_json preserves the settings.
  const PipelineConfig echoed =
      PipelineConfig::from_json_text(tweaked.to_json().dump(), {});
  CHECK(echoed.scenario.rng_seed == 7);
  CHECK(echoed.analysis.replicates == 11);
  CHECK(*echoed.analysis.caliper_width == 0.4);
}

TEST_CASE("pipeline config rejects malformed input") {
  CHECK_THROWS_AS(static_cast<void>(PipelineConfig::from_json_text("{not json", {})),
                  ConfigError);
  CHECK_THROWS_AS(static_cast<void>(PipelineConfig::from_json_text("{}", {})), ConfigError);
  CHECK_THROWS_AS(static_cast<void>(PipelineConfig::from_json_text(
                      tiny_config_text(), {"analysis.replicates"})),
                  ConfigError);  // override without '='

  PipelineConfig config = PipelineConfig::from_json_text(tiny_config_text(), {});
  config.analysis.replicates = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig::from_json_text(tiny_config_text(), {});
  config.analysis.interventions.push_back(config.analysis.interventions[0]);  // duplicate id
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig::from_json_text(tiny_config_text(), {});
  config.analysis.interventions[0].id = "bad id";
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig::from_json_text(tiny_config_text(), {});
  config.analysis.alpha = 1.5;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = PipelineConfig::from_json_text(tiny_config_text(), {});
  config.analysis.caliper_width = -1.0;
  CHECK_THROWS_AS(config.validate(), ConfigError);

  CHECK_THROWS_AS(static_cast<void>(PipelineConfig::load("/no/such/config.json", {})), Error);
}

TEST_CASE("a full tiny pipeline run writes every artifact and reloads") {
  const auto dir = fresh_dir("wsc_pipeline_tiny");
  const PipelineConfig config = PipelineConfig::from_json_text(tiny_config_text(), {});
  const PipelineOutcome outcome = run_pipeline(config, dir.string());
  REQUIRE(outcome.ok);
  CHECK(outcome.error.empty());

  const StagePaths paths(dir.string());
  for (const std::string& path :
       {paths.config_echo_json(), paths.design_csv(), paths.design_manifest(),
        paths.interventions_json(), paths.pairs_csv("iv01"), paths.balance_csv("iv01"),
        paths.pairs_csv("iv02"), paths.balance_csv("iv02"), paths.bias_csv(), paths.null_draws_csv(NullMode::naive),
        paths.null_summary_json(NullMode::naive), paths.null_draws_csv(NullMode::match),
        paths.null_summary_json(NullMode::match), paths.meta_json(), paths.meta_cells_csv(),
        paths.report_json(), paths.timings_json()}) {
    INFO("expecting ", path);
    CHECK(std::filesystem::exists(path));
  }
  CHECK(std::filesystem::exists(paths.population_dir() + "/schools.csv"));

  // The report carries one cell block per intervention and outcome with
  // coherent arithmetic.
  const nlohmann::ordered_json& report = outcome.report;
  REQUIRE(report.contains("cells"));
  REQUIRE(report["cells"].size() == 6);
  for (const auto& cell : report["cells"]) {
    const double naive = cell["naive"].get<double>();
    const double matched = cell["match"].get<double>();
    CHECK(cell["delta_x"].get<double>() == doctest::Approx(naive - matched).epsilon(1e-12));
    CHECK(cell["delta_u"].get<double>() == doctest::Approx(matched).epsilon(1e-12));
    CHECK(cell["p_naive"].get<double>() > 0.0);
    CHECK(cell["p_naive"].get<double>() <= 1.0);
  }
  CHECK_FALSE(report.contains("error"));

  // Reloading the persisted artifacts reproduces the observed results.
  const PopulationSnapshot pop = load_population(paths.population_dir());
  const DesignMatrix design = load_design(paths.design_csv(), paths.design_manifest());
  const ObservedResults observed = load_observed(pop, design, paths);
  REQUIRE(observed.interventions.size() == 2);
  CHECK(observed.interventions[0].spec.id == "iv01");
  CHECK(observed.interventions[1].spec.id == "iv02");
  CHECK(observed.interventions[0].n_pairs == observed.interventions[0].matched.pairs.size());
  REQUIRE(observed.cells.size() == 6);
  for (const ObservedCell& cell : observed.cells) {
    CHECK(cell.naive.kind == "naive");
    CHECK(cell.matched.kind == "match");
    CHECK(cell.true_bias == pop.true_bias[static_cast<std::size_t>(cell.outcome)]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage failures leave an error report instead of artifacts downstream") {
  const auto dir = fresh_dir("wsc_pipeline_fail");
  PipelineConfig config = PipelineConfig::from_json_text(tiny_config_text(), {});
  // Ask for more placebo controls than the comparison pool can supply: the
  // match stage itself works, but every null draw fails, and the meta stage
  // cannot price the observed cells.
  config.analysis.interventions[0].n_trial_controls = 8;
  config.scenario.n_trial_controls = 8;
  config.analysis.caliper_width = 1e-9;  // nothing can match
  config.analysis.strict_matching = true;
  const PipelineOutcome outcome = run_pipeline(config, dir.string());
  CHECK_FALSE(outcome.ok);
  CHECK_FALSE(outcome.error.empty());

  const StagePaths paths(dir.string());
  REQUIRE(std::filesystem::exists(paths.report_json()));
  std::ifstream in(paths.report_json());
  nlohmann::json report;
  in >> report;
  REQUIRE(report.contains("error"));
  CHECK(report["error"]["stage"].get<std::string>() == "match_estimate");
  CHECK_FALSE(report["error"]["message"].get<std::string>().empty());
  CHECK(std::filesystem::exists(paths.timings_json()));
  std::filesystem::remove_all(dir);
}
