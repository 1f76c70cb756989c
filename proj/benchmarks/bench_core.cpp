// Microbenchmarks for the pipeline's hot paths: population generation,
// propensity fitting, caliper matching, the random-intercept profile, and the
// fast naive placebo replicate.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "wsc/biasest.hpp"
#include "wsc/covariates.hpp"
#include "wsc/matching.hpp"
#include "wsc/mlm.hpp"
#include "wsc/nullsim.hpp"
#include "wsc/propensity.hpp"
#include "wsc/rng.hpp"
#include "wsc/synthpop.hpp"

namespace {

wsc::ScenarioConfig bench_config(int n_schools) {
  wsc::ScenarioConfig config;
  config.n_schools = n_schools;
  config.students_per_school_mean = 40.0;
  config.students_per_school_dispersion = 8.0;
  config.n_trial_controls = n_schools >= 1000 ? 50 : 10;
  config.selection_coefficients = {-0.25, 0.2, -0.25, -0.1, 0.2, 0.15};
  config.hidden_confounder_strength = -0.2;
  config.missingness_rate = 0.03;
  config.rng_seed = 20260823;
  config.selection_base_rate = 0.2;
  return config;
}

struct SharedData {
  wsc::PopulationSnapshot pop;
  wsc::DesignMatrix design;
  wsc::StudentDesignInfo student_info;
  std::vector<std::size_t> fit_rows;
  std::vector<std::uint8_t> labels;
  wsc::CandidateSpecs candidates;
  wsc::OutcomeSums sums;
  std::vector<std::string> trial_ids;
};

const SharedData& shared() {
  static const SharedData data = [] {
    SharedData d;
    d.pop = wsc::generate_population(bench_config(1000), 1);
    d.design = wsc::prepare_design(d.pop);
    d.student_info = wsc::build_student_design_info(d.pop);
    d.trial_ids = wsc::draw_trial_controls(d.pop, 50, d.pop.config.rng_seed,
                                           wsc::SampleFrame::trial_controls, 0);
    for (std::size_t i = 0; i < d.design.rows.size(); ++i) d.fit_rows.push_back(i);
    d.labels.assign(d.design.rows.size(), 0);
    for (const std::string& id : d.trial_ids) d.labels[d.design.row_index(id)] = 1;
    const wsc::FittedPropensity baseline =
        wsc::fit_logistic(d.design, d.fit_rows, d.labels, wsc::baseline_spec(d.design));
    d.candidates = wsc::enumerate_candidate_specs(d.design, d.fit_rows, baseline, 0.05);
    d.sums = wsc::build_outcome_sums(d.pop);
    return d;
  }();
  return data;
}

void BM_GeneratePopulation(benchmark::State& state) {
  const wsc::ScenarioConfig config = bench_config(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(wsc::generate_population(config, 1));
  }
}
BENCHMARK(BM_GeneratePopulation)->Arg(250)->Arg(1000);

void BM_LogisticFit(benchmark::State& state) {
  const SharedData& d = shared();
  const wsc::PropensitySpec& spec = d.candidates.specs[static_cast<std::size_t>(state.range(0))];
  for (auto _ : state) {
    benchmark::DoNotOptimize(wsc::fit_logistic(d.design, d.fit_rows, d.labels, spec));
  }
}
BENCHMARK(BM_LogisticFit)->Arg(0)->Arg(1)->Arg(2);

void BM_MatchOneToOne(benchmark::State& state) {
  const SharedData& d = shared();
  const wsc::FittedPropensity fit =
      wsc::fit_logistic(d.design, d.fit_rows, d.labels, d.candidates.specs[0]);
  const std::vector<double> all_logits = wsc::propensity_logits(fit, d.design, d.fit_rows);

  wsc::MatchInput treated, pool;
  std::vector<double> pool_logits;
  std::vector<std::size_t> pool_rows;
  for (std::size_t i = 0; i < d.design.rows.size(); ++i) {
    if (d.labels[i]) {
      treated.ids.push_back(d.design.rows[i].school_id);
      treated.logits.push_back(all_logits[i]);
    } else {
      pool.ids.push_back(d.design.rows[i].school_id);
      pool_logits.push_back(all_logits[i]);
      pool_rows.push_back(i);
    }
  }
  const wsc::TrimResult trim = wsc::trim_common_support(treated.logits, pool_logits);
  wsc::MatchInput trimmed;
  trimmed.features.resize(static_cast<Eigen::Index>(trim.kept.size()),
                          static_cast<Eigen::Index>(d.design.columns.size()));
  for (std::size_t k = 0; k < trim.kept.size(); ++k) {
    const std::size_t row = pool_rows[trim.kept[k]];
    trimmed.ids.push_back(d.design.rows[row].school_id);
    trimmed.logits.push_back(all_logits[row]);
    for (std::size_t c = 0; c < d.design.columns.size(); ++c)
      trimmed.features(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) =
          d.design.rows[row].features[c];
  }
  treated.features.resize(static_cast<Eigen::Index>(treated.ids.size()),
                          static_cast<Eigen::Index>(d.design.columns.size()));
  Eigen::Index t = 0;
  for (std::size_t i = 0; i < d.design.rows.size(); ++i) {
    if (!d.labels[i]) continue;
    for (std::size_t c = 0; c < d.design.columns.size(); ++c)
      treated.features(t, static_cast<Eigen::Index>(c)) = d.design.rows[i].features[c];
    ++t;
  }
  const Eigen::MatrixXd cov_inverse = wsc::pool_covariance_inverse(trimmed.features);
  const double caliper = wsc::caliper_from_logits(trimmed.logits, 0.2);

  for (auto _ : state) {
    benchmark::DoNotOptimize(
        wsc::match_one_to_one(treated, trimmed, cov_inverse, caliper, 777, 0));
  }
}
BENCHMARK(BM_MatchOneToOne);

void BM_RandomInterceptFit(benchmark::State& state) {
  const std::size_t n_clusters = static_cast<std::size_t>(state.range(0));
  const std::size_t cluster_size = 30;
  const std::size_t n = n_clusters * cluster_size;
  wsc::rng::Substream stream(20260823, wsc::rng::Tag::test_only, 7000);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 5);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  std::vector<std::size_t> cluster(n);
  Eigen::Index row = 0;
  for (std::size_t g = 0; g < n_clusters; ++g) {
    const double alpha = 0.5 * stream.next_normal();
    for (std::size_t i = 0; i < cluster_size; ++i) {
      x(row, 0) = 1.0;
      x(row, 1) = g < n_clusters / 2 ? 1.0 : 0.0;
      for (int c = 2; c < 5; ++c) x(row, c) = stream.next_normal();
      y(row) = 0.3 * x(row, 1) + alpha + stream.next_normal();
      cluster[static_cast<std::size_t>(row)] = g;
      ++row;
    }
  }
  const wsc::MlmData data = wsc::MlmData::build(x, y, cluster);
  for (auto _ : state) {
    benchmark::DoNotOptimize(wsc::fit_random_intercept(data));
  }
}
BENCHMARK(BM_RandomInterceptFit)->Arg(40)->Arg(100);

void BM_NaivePlaceboReplicate(benchmark::State& state) {
  const SharedData& d = shared();
  std::uint64_t unit = 0;
  for (auto _ : state) {
    const auto ids = wsc::draw_trial_controls(d.pop, 50, d.pop.config.rng_seed,
                                              wsc::SampleFrame::comparison_pool, ++unit);
    for (int k = 0; k < wsc::kNumOutcomes; ++k)
      benchmark::DoNotOptimize(
          wsc::naive_bias(d.pop, d.sums, "bench", ids, static_cast<wsc::Outcome>(k)));
  }
}
BENCHMARK(BM_NaivePlaceboReplicate);

}  // namespace

BENCHMARK_MAIN();
