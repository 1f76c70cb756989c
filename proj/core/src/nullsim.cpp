#include "wsc/nullsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"
#include "wsc/linalg.hpp"
#include "wsc/matching.hpp"
#include "wsc/parallel.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::size_t> design_rows_for(const DesignMatrix& design,
                                         const std::vector<std::string>& ids) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (const std::string& id : ids) rows.push_back(design.row_index(id));
  return rows;
}

Eigen::MatrixXd features_for(const DesignMatrix& design, const std::vector<std::size_t>& rows) {
  const std::size_t p = design.columns.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < p; ++c)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          design.rows[rows[i]].features[c];
  return out;
}

}  // namespace

MatchedAnalysis analyze_intervention(const PopulationSnapshot& pop, const DesignMatrix& design,
                                     const StudentDesignInfo& student_info,
                                     const std::string& intervention_id,
                                     const std::vector<std::string>& trial_control_ids,
                                     const std::vector<std::string>& extra_trial_ids,
                                     const AnalysisSettings& settings, std::uint64_t order_seed,
                                     std::uint64_t order_unit) {
  if (trial_control_ids.empty()) throw ArgumentError("analysis: no trial-control schools");

  // Comparison pool: every unselected school not in the placebo draw.
  std::vector<std::string> ct_ids = trial_control_ids;
  std::sort(ct_ids.begin(), ct_ids.end());
  std::vector<std::string> pool_ids;
  for (const SchoolUnit& school : pop.schools) {
    if (school.selected) continue;
    if (std::binary_search(ct_ids.begin(), ct_ids.end(), school.school_id)) continue;
    pool_ids.push_back(school.school_id);
  }
  if (pool_ids.empty()) throw ArgumentError("analysis: empty comparison pool");

  const std::vector<std::size_t> ct_rows = design_rows_for(design, ct_ids);
  const std::vector<std::size_t> pool_rows = design_rows_for(design, pool_ids);

  // Propensity fit rows: trial controls, optional treated arm, then pool.
  std::vector<std::size_t> fit_rows = ct_rows;
  std::vector<std::uint8_t> labels(ct_rows.size(), 1);
  if (settings.include_treated_in_fit) {
    for (const std::string& id : extra_trial_ids) {
      fit_rows.push_back(design.row_index(id));
      labels.push_back(1);
    }
  }
  fit_rows.insert(fit_rows.end(), pool_rows.begin(), pool_rows.end());
  labels.resize(fit_rows.size(), 0);

  MatchedAnalysis out;

  // Shared matcher: trim to the treated support, derive the caliper, and run
  // greedy Mahalanobis matching under the candidate's scores.
  auto matcher = [&](const FittedPropensity& fit) {
    const std::vector<double> ct_logits = propensity_logits(fit, design, ct_rows);
    const std::vector<double> pool_logits = propensity_logits(fit, design, pool_rows);
    const TrimResult trim = trim_common_support(ct_logits, pool_logits);

    MatchInput treated;
    treated.ids = ct_ids;
    treated.logits = ct_logits;
    treated.features = features_for(design, ct_rows);

    MatchInput pool;
    pool.ids.reserve(trim.kept.size());
    pool.logits.reserve(trim.kept.size());
    std::vector<std::size_t> trimmed_rows;
    trimmed_rows.reserve(trim.kept.size());
    for (const std::size_t i : trim.kept) {
      pool.ids.push_back(pool_ids[i]);
      pool.logits.push_back(pool_logits[i]);
      trimmed_rows.push_back(pool_rows[i]);
    }
    pool.features = features_for(design, trimmed_rows);

    const double caliper = settings.caliper_width
                               ? *settings.caliper_width
                               : caliper_from_logits(pool.logits, settings.caliper_factor);
    const Eigen::MatrixXd cov_inverse = pool_covariance_inverse(pool.features);
    return match_one_to_one(treated, pool, cov_inverse, caliper, order_seed, order_unit,
                            settings.strict);
  };

  const CandidateSpecs candidates = [&] {
    const FittedPropensity baseline = fit_logistic(design, fit_rows, labels, baseline_spec(design));
    return enumerate_candidate_specs(design, fit_rows, baseline, settings.alpha);
  }();
  out.selection = select_spec(design, fit_rows, labels, candidates, matcher);

  const MatchedSample& matched = out.selection.matched[out.selection.selected];
  out.trimmed_pool_size = matched.trimmed_pool_ids.size();
  out.trim_dropped = pool_ids.size() - out.trimmed_pool_size;
  for (int k = 0; k < kNumOutcomes; ++k) {
    const Outcome outcome = static_cast<Outcome>(k);
    out.naive[static_cast<std::size_t>(k)] =
        naive_bias(pop, intervention_id, trial_control_ids, outcome);
    auto [est, fit] =
        matched_bias(pop, design, student_info, matched, intervention_id, outcome);
    out.matched[static_cast<std::size_t>(k)] = est;
    out.fits[static_cast<std::size_t>(k)] = fit;
  }
  return out;
}

NullReference run_null_reference(const PopulationSnapshot& pop, const DesignMatrix& design,
                                 const std::vector<InterventionSpec>& interventions,
                                 NullMode mode, int replicates, std::uint64_t master_seed,
                                 const AnalysisSettings& settings, int threads) {
  if (replicates < 1) throw ArgumentError("null reference: replicates must be at least 1");
  if (interventions.empty()) throw ArgumentError("null reference: no interventions");
  std::size_t pool_size = 0;
  for (const SchoolUnit& school : pop.schools) pool_size += school.selected ? 0 : 1;
  for (const InterventionSpec& iv : interventions) {
    if (iv.n_trial_controls < 1)
      throw ArgumentError("null reference: intervention " + iv.id + " has no trial controls");
    if (static_cast<std::size_t>(iv.n_trial_controls) > pool_size) {
      std::ostringstream os;
      os << "null reference: intervention " << iv.id << " needs " << iv.n_trial_controls
         << " placebo schools but the pool holds " << pool_size;
      throw ArgumentError(os.str());
    }
  }

  const std::size_t n_iv = interventions.size();
  const std::size_t n_cells = n_iv * static_cast<std::size_t>(kNumOutcomes);
  const StudentDesignInfo student_info = build_student_design_info(pop);
  // Naive draws are O(trial schools) each once the sums exist.
  const OutcomeSums sums = mode == NullMode::naive ? build_outcome_sums(pop) : OutcomeSums{};

  NullReference ref;
  ref.mode = mode;
  ref.replicates = replicates;
  for (const InterventionSpec& iv : interventions) ref.intervention_ids.push_back(iv.id);
  ref.master_seed = master_seed;
  ref.draws.assign(static_cast<std::size_t>(replicates), std::vector<double>(n_cells, kNaN));

  // Replicate x intervention jobs; each derives its own substream unit so
  // scheduling order cannot matter.
  const std::size_t jobs = static_cast<std::size_t>(replicates) * n_iv;
  const std::uint64_t mode_offset =
      mode == NullMode::match ? static_cast<std::uint64_t>(replicates) * n_iv : 0;
  parallel_for(jobs, threads, [&](std::size_t job) {
    const std::size_t r = job / n_iv;
    const std::size_t w = job % n_iv;
    const InterventionSpec& iv = interventions[w];
    const std::uint64_t unit = 1 + mode_offset + static_cast<std::uint64_t>(r) * n_iv + w;
    const std::vector<std::string> placebo_ids = draw_trial_controls(
        pop, iv.n_trial_controls, master_seed, SampleFrame::comparison_pool, unit);
    try {
      if (mode == NullMode::naive) {
        for (int k = 0; k < kNumOutcomes; ++k) {
          const BiasEstimate est =
              naive_bias(pop, sums, iv.id, placebo_ids, static_cast<Outcome>(k));
          ref.draws[r][ref.cell(w, static_cast<Outcome>(k))] = est.value;
        }
      } else {
        const MatchedAnalysis analysis =
            analyze_intervention(pop, design, student_info, iv.id, placebo_ids, {}, settings,
                                 master_seed, unit);
        for (int k = 0; k < kNumOutcomes; ++k)
          ref.draws[r][ref.cell(w, static_cast<Outcome>(k))] =
              analysis.matched[static_cast<std::size_t>(k)].value;
      }
    } catch (const Error&) {
      // Cells stay NaN; the replicate is flagged after the parallel section.
    }
  });

  ref.mu_null.assign(static_cast<std::size_t>(replicates), kNaN);
  ref.sigma_null.assign(static_cast<std::size_t>(replicates), kNaN);
  for (std::size_t r = 0; r < static_cast<std::size_t>(replicates); ++r) {
    bool complete = true;
    for (const double v : ref.draws[r]) complete &= !std::isnan(v);
    if (!complete) {
      ++ref.failed_replicates;
      continue;
    }
    const NullSummary summary = summarize_reference(ref.draws[r]);
    ref.mu_null[r] = summary.mu_hat;
    ref.sigma_null[r] = summary.sigma_hat;
  }

  ref.per_cell_variance.assign(n_cells, 0.0);
  for (std::size_t c = 0; c < n_cells; ++c) {
    std::vector<double> column;
    column.reserve(static_cast<std::size_t>(replicates));
    for (std::size_t r = 0; r < static_cast<std::size_t>(replicates); ++r) {
      if (!std::isnan(ref.draws[r][c])) column.push_back(ref.draws[r][c]);
    }
    ref.per_cell_variance[c] = sample_variance(column);
  }
  return ref;
}

NullSummary summarize_reference(const std::vector<double>& cells) {
  if (cells.size() < 2)
    throw ArgumentError("reference summary: spread undefined for fewer than 2 cells");
  NullSummary s;
  s.mu_hat = mean_of(cells);
  s.sigma_hat = sample_sd(cells);
  return s;
}

double p_value(double observed, const std::vector<double>& reference) {
  if (std::isnan(observed)) throw ArgumentError("p-value: observed value is NaN");
  std::vector<double> finite;
  finite.reserve(reference.size());
  for (const double v : reference) {
    if (!std::isnan(v)) finite.push_back(v);
  }
  if (finite.empty()) throw ArgumentError("p-value: empty reference");
  const double center = mean_of(finite);
  const double obs_dev = std::abs(observed - center);
  std::size_t at_least = 0;
  for (const double v : finite) at_least += std::abs(v - center) >= obs_dev ? 1 : 0;
  return static_cast<double>(1 + at_least) / static_cast<double>(finite.size() + 1);
}

void save_null_reference(const NullReference& ref, const std::string& csv_path,
                         const std::string& json_path) {
  csv::Table table;
  table.header.push_back("replicate");
  for (const std::string& iv : ref.intervention_ids)
    for (int k = 0; k < kNumOutcomes; ++k)
      table.header.push_back(iv + ":" + kOutcomeNames[static_cast<std::size_t>(k)]);
  for (std::size_t r = 0; r < ref.draws.size(); ++r) {
    std::vector<std::string> row;
    row.push_back(csv::format_int(static_cast<long long>(r)));
    for (const double v : ref.draws[r]) row.push_back(csv::format_double(v));
    table.rows.push_back(std::move(row));
  }
  csv::write_file(csv_path, table);

  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["mode"] = ref.mode == NullMode::naive ? "naive" : "match";
  j["replicates"] = ref.replicates;
  j["intervention_ids"] = ref.intervention_ids;
  j["master_seed"] = ref.master_seed;
  j["failed_replicates"] = ref.failed_replicates;
  // NaN (flagged replicate) maps to JSON null and back.
  const auto nullable = [](const std::vector<double>& v) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const double x : v) {
      if (std::isnan(x)) arr.push_back(nullptr);
      else arr.push_back(x);
    }
    return arr;
  };
  j["mu_null"] = nullable(ref.mu_null);
  j["sigma_null"] = nullable(ref.sigma_null);
  j["per_cell_variance"] = ref.per_cell_variance;
  std::ofstream os(json_path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + json_path);
  os << j.dump(2) << '\n';
  if (!os.flush()) throw IoError("write failed: " + json_path);
}

NullReference load_null_reference(const std::string& csv_path, const std::string& json_path) {
  std::ifstream is(json_path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + json_path);
  nlohmann::ordered_json j;
  try {
    is >> j;
  } catch (const nlohmann::ordered_json::exception& e) {
    throw IoError(std::string("null-reference summary parse: ") + e.what());
  }

  NullReference ref;
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "naive") ref.mode = NullMode::naive;
  else if (mode == "match") ref.mode = NullMode::match;
  else throw IoError("null-reference summary: unknown mode " + mode);
  ref.replicates = j.at("replicates").get<int>();
  ref.intervention_ids = j.at("intervention_ids").get<std::vector<std::string>>();
  ref.master_seed = j.at("master_seed").get<std::uint64_t>();
  ref.failed_replicates = j.at("failed_replicates").get<int>();
  const auto from_nullable = [](const nlohmann::ordered_json& arr) {
    std::vector<double> out;
    out.reserve(arr.size());
    for (const auto& x : arr) out.push_back(x.is_null() ? kNaN : x.get<double>());
    return out;
  };
  ref.mu_null = from_nullable(j.at("mu_null"));
  ref.sigma_null = from_nullable(j.at("sigma_null"));
  ref.per_cell_variance = j.at("per_cell_variance").get<std::vector<double>>();

  const csv::Table table = csv::read_file(csv_path);
  const std::size_t n_cells =
      ref.intervention_ids.size() * static_cast<std::size_t>(kNumOutcomes);
  if (table.header.size() != n_cells + 1)
    throw IoError("null-reference draws: header does not match the summary");
  ref.draws.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    std::vector<double> draws;
    draws.reserve(n_cells);
    for (std::size_t c = 1; c < row.size(); ++c) draws.push_back(csv::parse_double_or_nan(row[c]));
    ref.draws.push_back(std::move(draws));
  }
  if (ref.draws.size() != static_cast<std::size_t>(ref.replicates))
    throw IoError("null-reference draws: replicate count does not match the summary");
  return ref;
}

}  // namespace wsc
