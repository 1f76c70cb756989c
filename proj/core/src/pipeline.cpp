#include "wsc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "wsc/csv.hpp"
#include "wsc/errors.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using nlohmann::ordered_json;

ordered_json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  try {
    ordered_json j;
    is >> j;
    return j;
  } catch (const ordered_json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const ordered_json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << '\n';
  if (!os.flush()) throw IoError("write failed: " + path);
}

// "a.b.c=value" -> json[a][b][c] = value, parsing value as JSON when it is a
// valid literal and as a string otherwise.
void apply_override(ordered_json& j, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like path.to.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("override has an empty path segment: " + assignment);
    if (dot == std::string::npos) {
      ordered_json value = ordered_json::parse(raw, nullptr, false);
      if (value.is_discarded()) value = raw;
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::string outcome_name(Outcome outcome) {
  return kOutcomeNames[static_cast<std::size_t>(outcome)];
}

std::string spec_name(std::size_t index) { return kSpecNames[index]; }

std::vector<double> null_column(const NullReference& ref, std::size_t w, Outcome outcome) {
  std::vector<double> out;
  out.reserve(ref.draws.size());
  const std::size_t c = ref.cell(w, outcome);
  for (const auto& row : ref.draws) out.push_back(row[c]);
  return out;
}

std::size_t reference_index(const NullReference& ref, const std::string& intervention_id) {
  const auto it =
      std::find(ref.intervention_ids.begin(), ref.intervention_ids.end(), intervention_id);
  if (it == ref.intervention_ids.end())
    throw ArgumentError("null reference does not cover intervention " + intervention_id);
  return static_cast<std::size_t>(it - ref.intervention_ids.begin());
}

}  // namespace

AnalysisSettings AnalysisConfig::settings() const {
  AnalysisSettings s;
  s.caliper_width = caliper_width;
  s.caliper_factor = caliper_factor;
  s.strict = strict_matching;
  s.alpha = alpha;
  s.include_treated_in_fit = include_treated_in_fit;
  return s;
}

PipelineConfig PipelineConfig::load(const std::string& path,
                                    const std::vector<std::string>& overrides) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return from_json_text(buffer.str(), overrides);
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text,
                                              const std::vector<std::string>& overrides) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON");
  for (const std::string& assignment : overrides) apply_override(j, assignment);

  if (!j.contains("scenario")) throw ConfigError("config is missing the scenario section");
  if (!j.contains("analysis")) throw ConfigError("config is missing the analysis section");

  PipelineConfig config;
  config.scenario = ScenarioConfig::from_json(j.at("scenario").dump());

  const ordered_json& a = j.at("analysis");
  try {
    for (const auto& iv : a.at("interventions")) {
      InterventionSpec spec;
      spec.id = iv.at("id").get<std::string>();
      spec.n_trial_controls = iv.at("n_trial_controls").get<int>();
      config.analysis.interventions.push_back(std::move(spec));
    }
    config.analysis.replicates = a.value("replicates", 500);
    config.analysis.caliper_factor = a.value("caliper_factor", 0.2);
    if (a.contains("caliper_width") && !a.at("caliper_width").is_null())
      config.analysis.caliper_width = a.at("caliper_width").get<double>();
    config.analysis.strict_matching = a.value("strict_matching", false);
    config.analysis.alpha = a.value("alpha", 0.05);
    config.analysis.include_treated_in_fit = a.value("include_treated_in_fit", true);
    config.analysis.threads = a.value("threads", 0);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("analysis section: ") + e.what());
  }
  config.validate();
  return config;
}

ordered_json PipelineConfig::to_json() const {
  ordered_json j;
  j["schema_version"] = 1;
  j["scenario"] = ordered_json::parse(scenario.to_json());
  ordered_json a;
  ordered_json ivs = ordered_json::array();
  for (const InterventionSpec& iv : analysis.interventions) {
    ordered_json entry;
    entry["id"] = iv.id;
    entry["n_trial_controls"] = iv.n_trial_controls;
    ivs.push_back(entry);
  }
  a["interventions"] = ivs;
  a["replicates"] = analysis.replicates;
  a["caliper_factor"] = analysis.caliper_factor;
  if (analysis.caliper_width) a["caliper_width"] = *analysis.caliper_width;
  else a["caliper_width"] = nullptr;
  a["strict_matching"] = analysis.strict_matching;
  a["alpha"] = analysis.alpha;
  a["include_treated_in_fit"] = analysis.include_treated_in_fit;
  a["threads"] = analysis.threads;
  j["analysis"] = a;
  return j;
}

void PipelineConfig::validate() const {
  scenario.validate();
  if (analysis.interventions.empty())
    throw ConfigError("analysis.interventions must list at least one intervention");
  std::vector<std::string> ids;
  for (const InterventionSpec& iv : analysis.interventions) {
    if (iv.id.empty()) throw ConfigError("analysis.interventions entries need nonempty ids");
    if (iv.id.find_first_of("/\\ ,:") != std::string::npos)
      throw ConfigError("intervention id contains characters unsuitable for file names: " + iv.id);
    if (iv.n_trial_controls < 1)
      throw ConfigError("analysis.interventions." + iv.id + ".n_trial_controls must be positive");
    ids.push_back(iv.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw ConfigError("analysis.interventions ids must be unique");
  if (analysis.replicates < 1) throw ConfigError("analysis.replicates must be at least 1");
  if (analysis.caliper_factor <= 0.0) throw ConfigError("analysis.caliper_factor must be positive");
  if (analysis.caliper_width && *analysis.caliper_width <= 0.0)
    throw ConfigError("analysis.caliper_width must be positive when set");
  if (analysis.alpha <= 0.0 || analysis.alpha >= 1.0)
    throw ConfigError("analysis.alpha must lie in (0, 1)");
  if (analysis.threads < 0) throw ConfigError("analysis.threads must be nonnegative");
}

PopulationSnapshot stage_generate(const PipelineConfig& config, const StagePaths& paths) {
  PopulationSnapshot pop = generate_population(config.scenario, config.analysis.threads);
  std::filesystem::create_directories(paths.population_dir());
  save_population(pop, paths.population_dir());
  return pop;
}

DesignMatrix stage_prepare(const PopulationSnapshot& pop, const StagePaths& paths) {
  DesignMatrix design = prepare_design(pop);
  save_design(design, paths.design_csv(), paths.design_manifest());
  return design;
}

namespace {

void write_pairs_csv(const MatchedSample& matched, const std::string& path) {
  csv::Table table;
  table.header = {"treated_id", "control_id", "distance", "logit_gap"};
  for (const MatchedPair& pair : matched.pairs)
    table.rows.push_back({pair.treated_id, pair.control_id, csv::format_double(pair.distance),
                          csv::format_double(pair.logit_gap)});
  csv::write_file(path, table);
}

MatchedSample read_pairs_csv(const std::string& path) {
  const csv::Table table = csv::read_file(path);
  const std::size_t t = table.column("treated_id");
  const std::size_t c = table.column("control_id");
  const std::size_t d = table.column("distance");
  const std::size_t g = table.column("logit_gap");
  MatchedSample matched;
  for (const auto& row : table.rows)
    matched.pairs.push_back(
        {row[t], row[c], csv::parse_double(row[d]), csv::parse_double(row[g])});
  return matched;
}

void write_balance_csv(const BalanceReport& balance, const std::string& path) {
  csv::Table table;
  table.header = {"covariate", "smd", "violation", "degenerate"};
  for (const BalanceEntry& entry : balance.entries)
    table.rows.push_back({entry.covariate, csv::format_double(entry.smd),
                          entry.violation ? "1" : "0", entry.degenerate ? "1" : "0"});
  csv::write_file(path, table);
}

BalanceReport read_balance_csv(const std::string& path) {
  const csv::Table table = csv::read_file(path);
  const std::size_t cov = table.column("covariate");
  const std::size_t smd = table.column("smd");
  const std::size_t vio = table.column("violation");
  const std::size_t deg = table.column("degenerate");
  BalanceReport balance;
  for (const auto& row : table.rows) {
    BalanceEntry entry;
    entry.covariate = row[cov];
    entry.smd = csv::parse_double(row[smd]);
    entry.violation = row[vio] == "1";
    entry.degenerate = row[deg] == "1";
    if (entry.violation) ++balance.violation_count;
    balance.entries.push_back(std::move(entry));
  }
  return balance;
}

}  // namespace

void write_bias_estimates(const std::vector<ObservedCell>& cells, const std::string& path) {
  csv::Table table;
  table.header = {"intervention_id", "outcome",        "kind",
                  "value",           "se",             "n_treated_schools",
                  "n_control_schools", "n_students",   "sigma2_school",
                  "sigma2_resid",    "converged",      "evaluations",
                  "true_bias"};
  for (const ObservedCell& cell : cells) {
    const BiasEstimate& naive = cell.naive;
    table.rows.push_back({naive.intervention_id, outcome_name(naive.outcome), "naive",
                          csv::format_double(naive.value), "",
                          csv::format_int(static_cast<long long>(naive.n_treated_schools)),
                          csv::format_int(static_cast<long long>(naive.n_control_schools)),
                          csv::format_int(static_cast<long long>(naive.n_students)), "", "", "",
                          "", csv::format_double(cell.true_bias)});
    const BiasEstimate& matched = cell.matched;
    table.rows.push_back({matched.intervention_id, outcome_name(matched.outcome), "match",
                          csv::format_double(matched.value), csv::format_double(matched.se),
                          csv::format_int(static_cast<long long>(matched.n_treated_schools)),
                          csv::format_int(static_cast<long long>(matched.n_control_schools)),
                          csv::format_int(static_cast<long long>(matched.n_students)),
                          csv::format_double(cell.fit.sigma2_school),
                          csv::format_double(cell.fit.sigma2_resid),
                          cell.fit.converged ? "1" : "0",
                          csv::format_int(cell.fit.evaluations),
                          csv::format_double(cell.true_bias)});
  }
  csv::write_file(path, table);
}

namespace {

std::vector<ObservedCell> read_bias_csv(const std::string& path) {
  const csv::Table table = csv::read_file(path);
  const std::size_t iv = table.column("intervention_id");
  const std::size_t oc = table.column("outcome");
  const std::size_t kind = table.column("kind");
  const std::size_t value = table.column("value");
  const std::size_t se = table.column("se");
  const std::size_t nts = table.column("n_treated_schools");
  const std::size_t ncs = table.column("n_control_schools");
  const std::size_t ns = table.column("n_students");
  const std::size_t s2s = table.column("sigma2_school");
  const std::size_t s2r = table.column("sigma2_resid");
  const std::size_t conv = table.column("converged");
  const std::size_t evals = table.column("evaluations");
  const std::size_t tb = table.column("true_bias");

  std::vector<ObservedCell> cells;
  const auto find_cell = [&](const std::string& id, Outcome outcome) -> ObservedCell& {
    for (ObservedCell& cell : cells) {
      if (cell.intervention_id == id && cell.outcome == outcome) return cell;
    }
    cells.emplace_back();
    cells.back().intervention_id = id;
    cells.back().outcome = outcome;
    return cells.back();
  };

  for (const auto& row : table.rows) {
    const Outcome outcome = outcome_from_name(row[oc]);
    ObservedCell& cell = find_cell(row[iv], outcome);
    cell.true_bias = csv::parse_double(row[tb]);
    BiasEstimate est;
    est.intervention_id = row[iv];
    est.outcome = outcome;
    est.kind = row[kind];
    est.value = csv::parse_double(row[value]);
    est.se = csv::parse_double_or_nan(row[se]);
    est.n_treated_schools = static_cast<std::size_t>(csv::parse_int(row[nts]));
    est.n_control_schools = static_cast<std::size_t>(csv::parse_int(row[ncs]));
    est.n_students = static_cast<std::size_t>(csv::parse_int(row[ns]));
    if (est.kind == "match") {
      cell.fit.beta = est.value;
      cell.fit.se = est.se;
      cell.fit.sigma2_school = csv::parse_double_or_nan(row[s2s]);
      cell.fit.sigma2_resid = csv::parse_double_or_nan(row[s2r]);
      cell.fit.converged = row[conv] == "1";
      cell.fit.evaluations = row[evals].empty() ? 0 : static_cast<int>(csv::parse_int(row[evals]));
      cell.fit.n_schools = est.n_treated_schools + est.n_control_schools;
      cell.fit.n_students = est.n_students;
      cell.matched = std::move(est);
    } else if (est.kind == "naive") {
      cell.naive = std::move(est);
    } else {
      throw IoError("bias estimates: unknown kind " + est.kind);
    }
  }
  return cells;
}

void write_interventions_json(const ObservedResults& observed, const std::string& path) {
  ordered_json j;
  j["schema_version"] = 1;
  ordered_json arr = ordered_json::array();
  for (const ObservedIntervention& iv : observed.interventions) {
    ordered_json entry;
    entry["id"] = iv.spec.id;
    entry["n_trial_controls"] = iv.spec.n_trial_controls;
    entry["trial_control_ids"] = iv.trial_control_ids;
    entry["trial_treated_ids"] = iv.trial_treated_ids;
    entry["selected_spec"] = spec_name(iv.selected_spec);
    ordered_json specs = ordered_json::array();
    for (std::size_t s = 0; s < 3; ++s) {
      ordered_json spec;
      spec["name"] = spec_name(s);
      spec["feasible"] = iv.feasible[s];
      spec["balance_violations"] = iv.feasible[s] ? ordered_json(iv.violations[s])
                                                  : ordered_json(nullptr);
      specs.push_back(spec);
    }
    entry["specifications"] = specs;
    entry["n_pairs"] = iv.n_pairs;
    entry["n_unmatched"] = iv.n_unmatched;
    entry["caliper_width"] = iv.caliper_width;
    entry["trimmed_pool_size"] = iv.trimmed_pool_size;
    entry["order_seed"] = iv.matched.order_seed;
    entry["order_unit"] = iv.matched.order_unit;
    ordered_json warnings = ordered_json::array();
    for (const Warning& w : iv.warnings) {
      ordered_json warning;
      warning["code"] = w.code;
      warning["detail"] = w.detail;
      warnings.push_back(warning);
    }
    entry["warnings"] = warnings;
    arr.push_back(entry);
  }
  j["interventions"] = arr;
  ordered_json failures = ordered_json::array();
  for (const auto& f : observed.failures) {
    ordered_json failure;
    failure["intervention_id"] = f[0];
    failure["category"] = f[1];
    failure["message"] = f[2];
    failures.push_back(failure);
  }
  j["failures"] = failures;
  write_json_file(path, j);
}

std::size_t spec_index_from_name(const std::string& name) {
  for (std::size_t s = 0; s < kSpecNames.size(); ++s) {
    if (name == kSpecNames[s]) return s;
  }
  throw IoError("unknown specification name: " + name);
}

}  // namespace

ObservedResults stage_match_estimate(const PipelineConfig& config, const PopulationSnapshot& pop,
                                     const DesignMatrix& design, const StagePaths& paths) {
  const AnalysisSettings settings = config.analysis.settings();
  const std::uint64_t seed = config.scenario.rng_seed;
  const StudentDesignInfo student_info = build_student_design_info(pop);

  std::size_t treated_frame = 0;
  for (const SchoolUnit& school : pop.schools)
    treated_frame += school.selected && school.treated ? 1 : 0;

  ObservedResults out;
  for (std::size_t w = 0; w < config.analysis.interventions.size(); ++w) {
    const InterventionSpec& spec = config.analysis.interventions[w];
    try {
      const std::vector<std::string> ct_ids = draw_trial_controls(
          pop, spec.n_trial_controls, seed, SampleFrame::trial_controls, w);
      // The treated arm only informs the propensity fit; a small frame is
      // clamped rather than fatal.
      std::vector<std::string> tr_ids;
      const int tr_count =
          static_cast<int>(std::min<std::size_t>(treated_frame,
                                                 static_cast<std::size_t>(spec.n_trial_controls)));
      if (tr_count > 0 && config.analysis.include_treated_in_fit)
        tr_ids = draw_trial_controls(pop, tr_count, seed, SampleFrame::trial_treated, w);

      const MatchedAnalysis analysis = analyze_intervention(
          pop, design, student_info, spec.id, ct_ids, tr_ids, settings, seed, w);

      ObservedIntervention iv;
      iv.spec = spec;
      iv.trial_control_ids = ct_ids;
      iv.trial_treated_ids = tr_ids;
      iv.selected_spec = analysis.selection.selected;
      iv.feasible = analysis.selection.feasible;
      iv.violations = analysis.selection.violations;
      iv.matched = analysis.selection.matched[analysis.selection.selected];
      iv.balance = analysis.selection.balance[analysis.selection.selected];
      iv.n_pairs = iv.matched.pairs.size();
      iv.n_unmatched = iv.matched.unmatched.size();
      iv.caliper_width = iv.matched.caliper_width;
      iv.trimmed_pool_size = analysis.trimmed_pool_size;
      iv.warnings = analysis.selection.warnings;

      for (int k = 0; k < kNumOutcomes; ++k) {
        ObservedCell cell;
        cell.intervention_id = spec.id;
        cell.outcome = static_cast<Outcome>(k);
        cell.naive = analysis.naive[static_cast<std::size_t>(k)];
        cell.matched = analysis.matched[static_cast<std::size_t>(k)];
        cell.fit = analysis.fits[static_cast<std::size_t>(k)];
        cell.true_bias = pop.true_bias[static_cast<std::size_t>(k)];
        out.cells.push_back(std::move(cell));
      }

      write_pairs_csv(iv.matched, paths.pairs_csv(spec.id));
      write_balance_csv(iv.balance, paths.balance_csv(spec.id));
      out.interventions.push_back(std::move(iv));
    } catch (const Error& e) {
      out.failures.push_back({spec.id, std::string(e.category()), e.what()});
    }
  }

  write_interventions_json(out, paths.interventions_json());
  write_bias_estimates(out.cells, paths.bias_csv());

  // Partial failure is tolerated, but with no surviving intervention the
  // downstream stages have nothing to price; stop here with the details.
  if (out.interventions.empty()) {
    std::ostringstream os;
    os << "every intervention failed in the match stage:";
    for (const auto& f : out.failures) os << " [" << f[0] << "] " << f[1] << ": " << f[2];
    throw MatchingError(os.str());
  }
  return out;
}

ObservedResults load_observed(const PopulationSnapshot& pop, const DesignMatrix& design,
                              const StagePaths& paths) {
  (void)pop;
  (void)design;
  const ordered_json j = read_json_file(paths.interventions_json());
  ObservedResults out;
  for (const auto& entry : j.at("interventions")) {
    ObservedIntervention iv;
    iv.spec.id = entry.at("id").get<std::string>();
    iv.spec.n_trial_controls = entry.at("n_trial_controls").get<int>();
    iv.trial_control_ids = entry.at("trial_control_ids").get<std::vector<std::string>>();
    iv.trial_treated_ids = entry.at("trial_treated_ids").get<std::vector<std::string>>();
    iv.selected_spec = spec_index_from_name(entry.at("selected_spec").get<std::string>());
    const auto& specs = entry.at("specifications");
    for (std::size_t s = 0; s < 3 && s < specs.size(); ++s) {
      iv.feasible[s] = specs[s].at("feasible").get<bool>();
      iv.violations[s] = specs[s].at("balance_violations").is_null()
                             ? 0
                             : specs[s].at("balance_violations").get<int>();
    }
    iv.n_pairs = entry.at("n_pairs").get<std::size_t>();
    iv.n_unmatched = entry.at("n_unmatched").get<std::size_t>();
    iv.caliper_width = entry.at("caliper_width").get<double>();
    iv.trimmed_pool_size = entry.at("trimmed_pool_size").get<std::size_t>();
    iv.matched = read_pairs_csv(paths.pairs_csv(iv.spec.id));
    iv.matched.caliper_width = iv.caliper_width;
    iv.matched.order_seed = entry.at("order_seed").get<std::uint64_t>();
    iv.matched.order_unit = entry.at("order_unit").get<std::uint64_t>();
    iv.balance = read_balance_csv(paths.balance_csv(iv.spec.id));
    out.interventions.push_back(std::move(iv));
  }
  for (const auto& failure : j.at("failures"))
    out.failures.push_back({failure.at("intervention_id").get<std::string>(),
                            failure.at("category").get<std::string>(),
                            failure.at("message").get<std::string>()});
  if (std::filesystem::exists(paths.bias_csv())) out.cells = read_bias_csv(paths.bias_csv());
  return out;
}

NullReference stage_nullsim(const PipelineConfig& config, const PopulationSnapshot& pop,
                            const DesignMatrix& design, NullMode mode, const StagePaths& paths) {
  AnalysisSettings settings = config.analysis.settings();
  settings.strict = false;  // placebo failures are recorded, never fatal
  NullReference ref =
      run_null_reference(pop, design, config.analysis.interventions, mode,
                         config.analysis.replicates, config.scenario.rng_seed, settings,
                         config.analysis.threads);
  save_null_reference(ref, paths.null_draws_csv(mode), paths.null_summary_json(mode));
  return ref;
}

MetaOutputs stage_meta(const PipelineConfig& config, const ObservedResults& observed,
                       const NullReference& match_ref, const StagePaths& paths) {
  (void)config;
  MetaOutputs out;

  std::vector<double> abs_bias;
  std::vector<RegressionCell> reg_cells;
  for (const ObservedCell& cell : observed.cells) {
    const std::size_t w = reference_index(match_ref, cell.intervention_id);
    const double sigma2 = match_ref.per_cell_variance[match_ref.cell(w, cell.outcome)];
    if (!(sigma2 > 0.0)) {
      throw NumericError("meta stage: null reference variance is not positive for " +
                         cell.intervention_id + ":" + outcome_name(cell.outcome));
    }
    MetaCell mc;
    mc.intervention_id = cell.intervention_id;
    mc.outcome = cell.outcome;
    mc.beta_hat = cell.matched.value;
    mc.sigma2_hat = sigma2;
    out.input.cells.push_back(std::move(mc));

    abs_bias.push_back(std::abs(cell.matched.value));
    RegressionCell rc;
    rc.outcome = cell.outcome;
    rc.sample_size_thousands = static_cast<double>(cell.matched.n_students) / 1000.0;
    for (const ObservedIntervention& iv : observed.interventions) {
      if (iv.spec.id == cell.intervention_id) {
        rc.violation_count = static_cast<double>(iv.balance.violation_count);
        break;
      }
    }
    reg_cells.push_back(rc);
  }

  out.result = run_meta(out.input);
  out.intervention_level = intervention_level_meta(out.input, config.scenario.rng_seed);
  try {
    out.regressions[0] = predict_bias_magnitude(abs_bias, reg_cells,
                                                BiasPredictor::outcome_dummies);
    out.regressions[1] = predict_bias_magnitude(abs_bias, reg_cells, BiasPredictor::sample_size);
    out.regressions[2] =
        predict_bias_magnitude(abs_bias, reg_cells, BiasPredictor::violation_count);
    out.regressions_ok = true;
  } catch (const Error& e) {
    out.regressions_ok = false;
    out.regressions_error = std::string(e.category()) + ": " + e.what();
  }

  save_meta(out.result, out.input, paths.meta_json(), paths.meta_cells_csv());
  return out;
}

namespace {

ordered_json regression_to_json(const RegressionFit& fit) {
  ordered_json j;
  ordered_json terms = ordered_json::array();
  for (std::size_t c = 0; c < fit.names.size(); ++c) {
    ordered_json term;
    term["name"] = fit.names[c];
    term["coefficient"] = fit.coefficients(static_cast<Eigen::Index>(c));
    term["se"] = fit.standard_errors(static_cast<Eigen::Index>(c));
    terms.push_back(term);
  }
  j["terms"] = terms;
  j["r2"] = fit.r2;
  j["f_stat"] = fit.f_stat;
  j["df1"] = fit.df1;
  j["df2"] = fit.df2;
  j["n"] = fit.n;
  return j;
}

ordered_json null_section(const NullReference& ref, const std::vector<ObservedCell>& cells,
                          bool use_matched) {
  ordered_json j;
  j["mode"] = ref.mode == NullMode::naive ? "naive" : "match";
  j["replicates"] = ref.replicates;
  j["failed_replicates"] = ref.failed_replicates;

  std::vector<double> observed_values;
  for (const ObservedCell& cell : cells)
    observed_values.push_back(use_matched ? cell.matched.value : cell.naive.value);
  if (observed_values.size() >= 2) {
    const NullSummary summary = summarize_reference(observed_values);
    j["observed_mu"] = summary.mu_hat;
    j["observed_sigma"] = summary.sigma_hat;
    std::vector<double> mu_ref, sigma_ref;
    for (std::size_t r = 0; r < ref.mu_null.size(); ++r) {
      mu_ref.push_back(ref.mu_null[r]);
      sigma_ref.push_back(ref.sigma_null[r]);
    }
    j["p_mu"] = p_value(summary.mu_hat, mu_ref);
    j["p_sigma"] = p_value(summary.sigma_hat, sigma_ref);
  } else {
    j["observed_mu"] = nullptr;
    j["observed_sigma"] = nullptr;
    j["p_mu"] = nullptr;
    j["p_sigma"] = nullptr;
  }
  return j;
}

}  // namespace

ordered_json build_report(const PipelineConfig& config, const PopulationSnapshot& pop,
                          const DesignMatrix& design, const ObservedResults& observed,
                          const NullReference& naive_ref, const NullReference& match_ref,
                          const MetaOutputs& meta, const StagePaths& paths) {
  // Artifact references are relative to the run directory so that reruns into
  // different directories still produce byte-identical reports.
  const auto rel = [&](const std::string& path) { return path.substr(paths.out_dir.size() + 1); };
  ordered_json report;
  report["schema_version"] = 1;
  report["config"] = config.to_json();

  {
    ordered_json population;
    population["n_schools"] = pop.schools.size();
    population["n_students"] = pop.students.size();
    std::size_t selected = 0, treated = 0;
    for (const SchoolUnit& school : pop.schools) {
      selected += school.selected ? 1 : 0;
      treated += school.treated ? 1 : 0;
    }
    population["n_selected"] = selected;
    population["n_treated"] = treated;
    ordered_json tb = ordered_json::array();
    ordered_json xc = ordered_json::array();
    for (int k = 0; k < kNumOutcomes; ++k) {
      tb.push_back(pop.true_bias[static_cast<std::size_t>(k)]);
      xc.push_back(pop.generative.x_component[static_cast<std::size_t>(k)]);
    }
    population["true_bias"] = tb;
    population["x_component"] = xc;
    report["population"] = population;
  }

  {
    ordered_json d;
    ordered_json names = ordered_json::array();
    for (const ColumnInfo& info : design.columns) names.push_back(info.name);
    d["columns"] = names;
    d["n_rows"] = design.rows.size();
    d["n_warnings"] = design.warnings.size();
    report["design"] = d;
  }

  {
    ordered_json arr = ordered_json::array();
    for (const ObservedIntervention& iv : observed.interventions) {
      ordered_json entry;
      entry["id"] = iv.spec.id;
      entry["n_trial_controls"] = iv.spec.n_trial_controls;
      entry["n_treated_in_fit"] = iv.trial_treated_ids.size();
      entry["selected_spec"] = spec_name(iv.selected_spec);
      for (std::size_t s = 0; s < 3; ++s) {
        ordered_json spec;
        spec["feasible"] = iv.feasible[s];
        spec["balance_violations"] =
            iv.feasible[s] ? ordered_json(iv.violations[s]) : ordered_json(nullptr);
        entry["specifications"][spec_name(s)] = spec;
      }
      entry["n_pairs"] = iv.n_pairs;
      entry["n_unmatched"] = iv.n_unmatched;
      entry["caliper_width"] = iv.caliper_width;
      entry["trimmed_pool_size"] = iv.trimmed_pool_size;
      entry["balance_violations"] = iv.balance.violation_count;
      entry["files"]["pairs"] = rel(paths.pairs_csv(iv.spec.id));
      entry["files"]["balance"] = rel(paths.balance_csv(iv.spec.id));
      arr.push_back(entry);
    }
    report["interventions"] = arr;
  }

  {
    ordered_json arr = ordered_json::array();
    for (const ObservedCell& cell : observed.cells) {
      ordered_json entry;
      entry["intervention_id"] = cell.intervention_id;
      entry["outcome"] = outcome_name(cell.outcome);
      entry["naive"] = cell.naive.value;
      entry["match"] = cell.matched.value;
      entry["match_se"] = cell.matched.se;
      entry["match_converged"] = cell.fit.converged;
      entry["sigma2_school"] = cell.fit.sigma2_school;
      entry["sigma2_resid"] = cell.fit.sigma2_resid;
      entry["n_students_matched"] = cell.matched.n_students;
      entry["delta_x"] = cell.naive.value - cell.matched.value;
      entry["delta_u"] = cell.matched.value;
      entry["true_bias"] = cell.true_bias;
      entry["match_minus_truth"] = cell.matched.value - cell.true_bias;

      const std::size_t wn = reference_index(naive_ref, cell.intervention_id);
      const std::size_t wm = reference_index(match_ref, cell.intervention_id);
      entry["p_naive"] = p_value(cell.naive.value, null_column(naive_ref, wn, cell.outcome));
      entry["p_match"] = p_value(cell.matched.value, null_column(match_ref, wm, cell.outcome));
      entry["sigma2_null_naive"] =
          naive_ref.per_cell_variance[naive_ref.cell(wn, cell.outcome)];
      entry["sigma2_null_match"] =
          match_ref.per_cell_variance[match_ref.cell(wm, cell.outcome)];
      arr.push_back(entry);
    }
    report["cells"] = arr;
  }

  report["null"]["naive"] = null_section(naive_ref, observed.cells, false);
  report["null"]["match"] = null_section(match_ref, observed.cells, true);

  {
    ordered_json m;
    m["nu_hat"] = meta.result.nu_hat;
    m["tau2_hat"] = meta.result.tau2_hat;
    m["q"] = meta.result.q;
    m["k_effective"] = meta.result.k_effective;
    m["rho_hat"] = meta.result.rho_hat;
    m["mean_abs_constrained"] = meta.result.mean_abs_constrained;
    ordered_json il;
    il["tau2_hat"] = meta.intervention_level.tau2_hat;
    il["q"] = meta.intervention_level.q;
    il["beta_bar"] = meta.intervention_level.beta_bar;
    il["n_interventions"] = meta.intervention_level.n_interventions;
    il["ci95"] = {meta.intervention_level.ci95[0], meta.intervention_level.ci95[1]};
    m["intervention_level"] = il;
    if (meta.regressions_ok) {
      m["regressions"]["outcome_dummies"] = regression_to_json(meta.regressions[0]);
      m["regressions"]["sample_size"] = regression_to_json(meta.regressions[1]);
      m["regressions"]["violation_count"] = regression_to_json(meta.regressions[2]);
    } else {
      m["regressions"] = nullptr;
      m["regressions_error"] = meta.regressions_error;
    }
    report["meta"] = m;
  }

  {
    ordered_json failures = ordered_json::array();
    for (const auto& f : observed.failures) {
      ordered_json failure;
      failure["intervention_id"] = f[0];
      failure["category"] = f[1];
      failure["message"] = f[2];
      failures.push_back(failure);
    }
    report["failures"] = failures;
  }

  {
    ordered_json files;
    files["population_dir"] = rel(paths.population_dir());
    files["design"] = rel(paths.design_csv());
    files["design_manifest"] = rel(paths.design_manifest());
    files["interventions"] = rel(paths.interventions_json());
    files["bias_estimates"] = rel(paths.bias_csv());
    files["null_naive_draws"] = rel(paths.null_draws_csv(NullMode::naive));
    files["null_naive_summary"] = rel(paths.null_summary_json(NullMode::naive));
    files["null_match_draws"] = rel(paths.null_draws_csv(NullMode::match));
    files["null_match_summary"] = rel(paths.null_summary_json(NullMode::match));
    files["meta"] = rel(paths.meta_json());
    files["meta_cells"] = rel(paths.meta_cells_csv());
    report["files"] = files;
  }

  write_json_file(paths.report_json(), report);
  return report;
}

PipelineOutcome run_pipeline(const PipelineConfig& config, const std::string& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const StagePaths paths(out_dir);
  write_json_file(paths.config_echo_json(), config.to_json());

  PipelineOutcome outcome;
  ordered_json timings;
  std::string stage = "generate";
  const auto clock = [] { return std::chrono::steady_clock::now(); };
  auto stage_start = clock();
  const auto finish_stage = [&](const std::string& next) {
    const auto now = clock();
    timings[stage] =
        std::chrono::duration_cast<std::chrono::duration<double>>(now - stage_start).count();
    stage = next;
    stage_start = now;
  };

  try {
    const PopulationSnapshot pop = stage_generate(config, paths);
    finish_stage("prepare");
    const DesignMatrix design = stage_prepare(pop, paths);
    finish_stage("match_estimate");
    const ObservedResults observed = stage_match_estimate(config, pop, design, paths);
    finish_stage("nullsim_naive");
    const NullReference naive_ref =
        stage_nullsim(config, pop, design, NullMode::naive, paths);
    finish_stage("nullsim_match");
    const NullReference match_ref =
        stage_nullsim(config, pop, design, NullMode::match, paths);
    finish_stage("meta");
    const MetaOutputs meta = stage_meta(config, observed, match_ref, paths);
    finish_stage("report");
    outcome.report = build_report(config, pop, design, observed, naive_ref, match_ref, meta, paths);
    finish_stage("done");
    outcome.ok = true;
  } catch (const Error& e) {
    const std::string failed_stage = stage;
    finish_stage("failed");
    outcome.ok = false;
    outcome.error = std::string(e.category()) + ": " + e.what();
    ordered_json report;
    report["schema_version"] = 1;
    report["config"] = config.to_json();
    ordered_json error;
    error["stage"] = failed_stage;
    error["category"] = e.category();
    error["message"] = e.what();
    report["error"] = error;
    outcome.report = report;
    write_json_file(paths.report_json(), report);
  }

  write_json_file(paths.timings_json(), timings);
  return outcome;
}

}  // namespace wsc
