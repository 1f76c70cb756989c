// Command-line driver for the selection-bias benchmark pipeline. Every
// subcommand reads/writes the canonical run-directory layout, so stages can be
// executed independently and resumed from persisted artifacts.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wsc/biasest.hpp"
#include "wsc/errors.hpp"
#include "wsc/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> replicates;
  std::optional<int> threads;
  bool strict_matching = false;
  std::optional<double> caliper;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Pipeline config JSON")->required();
  cmd->add_option("--out", args.out_dir, "Run directory for artifacts");
  cmd->add_option("--set", args.overrides,
                  "Dotted-path config override, e.g. analysis.replicates=50 (repeatable)");
  cmd->add_option("--seed", args.seed, "Override scenario.rng_seed");
  cmd->add_option("--replicates", args.replicates, "Override analysis.replicates");
  cmd->add_option("--threads", args.threads,
                  "Worker threads (0 = hardware). Default from WSCBENCH_THREADS if set");
  cmd->add_flag("--strict-matching", args.strict_matching,
                "Fail when any treated school cannot be matched");
  cmd->add_option("--caliper", args.caliper,
                  "Fixed caliper width on the logit scale (overrides the SD-based rule)");
}

wsc::PipelineConfig load_config(const CommonArgs& args) {
  std::vector<std::string> overrides = args.overrides;
  if (args.seed) overrides.push_back("scenario.rng_seed=" + std::to_string(*args.seed));
  if (args.replicates)
    overrides.push_back("analysis.replicates=" + std::to_string(*args.replicates));
  if (args.threads) overrides.push_back("analysis.threads=" + std::to_string(*args.threads));
  if (args.strict_matching) overrides.push_back("analysis.strict_matching=true");
  if (args.caliper) overrides.push_back("analysis.caliper_width=" + std::to_string(*args.caliper));

  wsc::PipelineConfig config = wsc::PipelineConfig::load(args.config_path, overrides);
  if (!args.threads && config.analysis.threads == 0) {
    if (const char* env = std::getenv("WSCBENCH_THREADS")) {
      const int n = std::atoi(env);
      if (n > 0) config.analysis.threads = n;
    }
  }
  return config;
}

wsc::PopulationSnapshot load_pop(const wsc::StagePaths& paths) {
  return wsc::load_population(paths.population_dir());
}

wsc::DesignMatrix load_design_files(const wsc::StagePaths& paths) {
  return wsc::load_design(paths.design_csv(), paths.design_manifest());
}

int cmd_generate(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = wsc::stage_generate(config, paths);
  std::cout << "generated " << pop.schools.size() << " schools, " << pop.students.size()
            << " students -> " << paths.population_dir() << "\n";
  return 0;
}

int cmd_prepare(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  (void)config;
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = wsc::stage_prepare(pop, paths);
  std::cout << "design: " << design.rows.size() << " rows, " << design.columns.size()
            << " columns, " << design.warnings.size() << " warnings -> " << paths.design_csv()
            << "\n";
  return 0;
}

int cmd_match(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = load_design_files(paths);
  const wsc::ObservedResults observed = wsc::stage_match_estimate(config, pop, design, paths);
  std::cout << "matched " << observed.interventions.size() << " interventions ("
            << observed.failures.size() << " failures) -> " << paths.interventions_json() << "\n";
  return observed.failures.empty() ? 0 : 1;
}

int cmd_estimate(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  (void)config;
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = load_design_files(paths);
  wsc::ObservedResults observed = wsc::load_observed(pop, design, paths);
  const wsc::StudentDesignInfo student_info = wsc::build_student_design_info(pop);

  observed.cells.clear();
  for (const wsc::ObservedIntervention& iv : observed.interventions) {
    for (int k = 0; k < wsc::kNumOutcomes; ++k) {
      const auto outcome = static_cast<wsc::Outcome>(k);
      wsc::ObservedCell cell;
      cell.intervention_id = iv.spec.id;
      cell.outcome = outcome;
      cell.naive = wsc::naive_bias(pop, iv.spec.id, iv.trial_control_ids, outcome);
      auto [est, fit] =
          wsc::matched_bias(pop, design, student_info, iv.matched, iv.spec.id, outcome);
      cell.matched = est;
      cell.fit = fit;
      cell.true_bias = pop.true_bias[static_cast<std::size_t>(k)];
      observed.cells.push_back(std::move(cell));
    }
  }
  wsc::write_bias_estimates(observed.cells, paths.bias_csv());
  std::cout << "estimated " << observed.cells.size() << " cells -> " << paths.bias_csv() << "\n";
  return 0;
}

int cmd_nullsim(const CommonArgs& args, const std::string& mode) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = load_design_files(paths);
  const auto run_mode = [&](wsc::NullMode m) {
    const wsc::NullReference ref = wsc::stage_nullsim(config, pop, design, m, paths);
    std::cout << "null " << (m == wsc::NullMode::naive ? "naive" : "match") << ": "
              << ref.replicates << " replicates (" << ref.failed_replicates << " failed) -> "
              << paths.null_draws_csv(m) << "\n";
  };
  if (mode == "naive" || mode == "both") run_mode(wsc::NullMode::naive);
  if (mode == "match" || mode == "both") run_mode(wsc::NullMode::match);
  return 0;
}

int cmd_meta(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = load_design_files(paths);
  const wsc::ObservedResults observed = wsc::load_observed(pop, design, paths);
  const wsc::NullReference match_ref = wsc::load_null_reference(
      paths.null_draws_csv(wsc::NullMode::match), paths.null_summary_json(wsc::NullMode::match));
  const wsc::MetaOutputs meta = wsc::stage_meta(config, observed, match_ref, paths);
  std::cout << "meta: tau2=" << meta.result.tau2_hat << " K_eff=" << meta.result.k_effective
            << " mean|constrained|=" << meta.result.mean_abs_constrained << " -> "
            << paths.meta_json() << "\n";
  return 0;
}

int cmd_report(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::StagePaths paths(args.out_dir);
  const wsc::PopulationSnapshot pop = load_pop(paths);
  const wsc::DesignMatrix design = load_design_files(paths);
  const wsc::ObservedResults observed = wsc::load_observed(pop, design, paths);
  const wsc::NullReference naive_ref = wsc::load_null_reference(
      paths.null_draws_csv(wsc::NullMode::naive), paths.null_summary_json(wsc::NullMode::naive));
  const wsc::NullReference match_ref = wsc::load_null_reference(
      paths.null_draws_csv(wsc::NullMode::match), paths.null_summary_json(wsc::NullMode::match));
  const wsc::MetaOutputs meta = wsc::stage_meta(config, observed, match_ref, paths);
  wsc::build_report(config, pop, design, observed, naive_ref, match_ref, meta, paths);
  std::cout << "report -> " << paths.report_json() << "\n";
  return 0;
}

int cmd_pipeline(const CommonArgs& args) {
  const wsc::PipelineConfig config = load_config(args);
  const wsc::PipelineOutcome outcome = wsc::run_pipeline(config, args.out_dir);
  const wsc::StagePaths paths(args.out_dir);
  if (!outcome.ok) {
    std::cerr << "pipeline failed: " << outcome.error << "\n";
    std::cerr << "partial artifacts kept under " << args.out_dir << "\n";
    return 1;
  }
  std::cout << "pipeline ok -> " << paths.report_json() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Within-study selection-bias benchmark on synthetic school populations"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string null_mode = "both";

  CLI::App* generate = app.add_subcommand("generate", "Generate and persist a population");
  add_common_options(generate, args);
  CLI::App* prepare = app.add_subcommand("prepare", "Build the school-level design matrix");
  add_common_options(prepare, args);
  CLI::App* match = app.add_subcommand(
      "match", "Select propensity specs, match, and estimate bias for each intervention");
  add_common_options(match, args);
  CLI::App* estimate =
      app.add_subcommand("estimate", "Recompute bias estimates from persisted pairs");
  add_common_options(estimate, args);
  CLI::App* nullsim = app.add_subcommand("nullsim", "Build placebo null references");
  add_common_options(nullsim, args);
  nullsim->add_option("--mode", null_mode, "naive, match, or both")
      ->check(CLI::IsMember({"naive", "match", "both"}));
  CLI::App* meta = app.add_subcommand("meta", "Random-effects meta-analysis of matched estimates");
  add_common_options(meta, args);
  CLI::App* report = app.add_subcommand("report", "Assemble report.json from persisted artifacts");
  add_common_options(report, args);
  CLI::App* pipeline = app.add_subcommand("pipeline", "Run every stage end to end");
  add_common_options(pipeline, args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) return cmd_generate(args);
    if (prepare->parsed()) return cmd_prepare(args);
    if (match->parsed()) return cmd_match(args);
    if (estimate->parsed()) return cmd_estimate(args);
    if (nullsim->parsed()) return cmd_nullsim(args, null_mode);
    if (meta->parsed()) return cmd_meta(args);
    if (report->parsed()) return cmd_report(args);
    if (pipeline->parsed()) return cmd_pipeline(args);
  } catch (const wsc::Error& e) {
    std::cerr << "error [" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
