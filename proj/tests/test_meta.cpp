#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "wsc/errors.hpp"
#include "wsc/meta.hpp"
#include "wsc/rng.hpp"

using namespace wsc;

namespace {

MetaInput five_cells() {
  MetaInput input;
  const std::vector<double> beta = {0.30, 0.12, -0.05, 0.22, 0.40};
  const std::vector<double> sigma2 = {0.010, 0.020, 0.015, 0.008, 0.025};
  const std::vector<const char*> ivs = {"a", "a", "a", "b", "b"};
  for (std::size_t i = 0; i < beta.size(); ++i) {
    MetaCell cell;
    cell.intervention_id = ivs[i];
    cell.outcome = static_cast<Outcome>(i % kNumOutcomes);
    cell.beta_hat = beta[i];
    cell.sigma2_hat = sigma2[i];
    input.cells.push_back(cell);
  }
  return input;
}

MetaInput synthetic_cells(std::size_t n_iv, double tau, double rho_noise, std::uint64_t unit) {
  rng::Substream stream(140001, rng::Tag::test_only, unit);
  MetaInput input;
  for (std::size_t w = 0; w < n_iv; ++w) {
    const double common = tau * stream.next_normal();
    for (int k = 0; k < kNumOutcomes; ++k) {
      MetaCell cell;
      cell.intervention_id = "iv" + std::to_string(w);
      cell.outcome = static_cast<Outcome>(k);
      cell.sigma2_hat = 0.01 + 0.005 * stream.next_double();
      cell.beta_hat = common + rho_noise * stream.next_normal() +
                      std::sqrt(cell.sigma2_hat) * stream.next_normal();
      input.cells.push_back(cell);
    }
  }
  return input;
}

}  // namespace

TEST_CASE("effective sample size applies the design-effect formula") {
  CHECK(effective_sample_size(42, 3, 0.56) == doctest::Approx(42.0 / 2.12).epsilon(1e-12));
  CHECK(effective_sample_size(9, 3, 0.0) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(effective_sample_size(10, 1, 0.9) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK_THROWS_AS(static_cast<void>(effective_sample_size(0, 3, 0.5)), ArgumentError);
  CHECK_THROWS_AS(static_cast<void>(effective_sample_size(10, 3, 0.5)), ArgumentError);
  CHECK_THROWS_AS(static_cast<void>(effective_sample_size(9, 3, -1.5)), ArgumentError);
}

TEST_CASE("method-of-moments tau2 matches hand arithmetic on five cells") {
  const MetaInput input = five_cells();
  std::vector<double> beta, sigma2;
  for (const MetaCell& cell : input.cells) {
    beta.push_back(cell.beta_hat);
    sigma2.push_back(cell.sigma2_hat);
  }
  for (const double k_eff : {5.0, 3.2, 2.0}) {
    const MomResult got = tau2_mom(input, k_eff);
    const oracle::MetaHand want = oracle::meta_mom(beta, sigma2, k_eff);
    CHECK(got.q == doctest::Approx(want.q).epsilon(1e-12));
    CHECK(got.beta_bar == doctest::Approx(want.beta_bar).epsilon(1e-12));
    CHECK(got.tau2_hat == doctest::Approx(want.tau2).epsilon(1e-12));
  }
}

TEST_CASE("tau2 clamps to zero when Q is small") {
  // Identical estimates: Q = 0, so any k_effective above 1 forces tau2 = 0.
  MetaInput flat;
  for (std::size_t i = 0; i < 4; ++i) {
    MetaCell cell;
    cell.intervention_id = "iv";
    cell.outcome = static_cast<Outcome>(i % kNumOutcomes);
    cell.beta_hat = 0.2;
    cell.sigma2_hat = 0.01;
    flat.cells.push_back(cell);
  }
  const MomResult result = tau2_mom(flat, 4.0);
  CHECK(result.q == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(result.tau2_hat == 0.0);
}

TEST_CASE("pooled mean weights cells by total variance") {
  const MetaInput input = five_cells();
  const double tau2 = 0.004;
  double num = 0.0, den = 0.0;
  for (const MetaCell& cell : input.cells) {
    const double w = 1.0 / (cell.sigma2_hat + tau2);
    num += w * cell.beta_hat;
    den += w;
  }
  CHECK(pooled_mean_nu(input, tau2) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("constrained shrinkage preserves ranks and hits the target variance") {
  const MetaInput input = five_cells();
  const double tau2 = 0.006;
  const double nu = pooled_mean_nu(input, tau2);
  const EbResult eb = eb_constrained(input, nu, tau2);
  REQUIRE(eb.shrunken.size() == 5);
  REQUIRE(eb.constrained.size() == 5);

  for (std::size_t i = 0; i < 5; ++i) {
    const double lambda = input.cells[i].sigma2_hat / (input.cells[i].sigma2_hat + tau2);
    CHECK(eb.lambdas[i] == doctest::Approx(lambda).epsilon(1e-12));
    CHECK(eb.shrunken[i] ==
          doctest::Approx(lambda * nu + (1.0 - lambda) * input.cells[i].beta_hat)
              .epsilon(1e-12));
  }

  CHECK(oracle::variance(eb.constrained) == doctest::Approx(tau2).epsilon(1e-10));
  const std::vector<std::size_t> before = oracle::ranks(eb.shrunken);
  const std::vector<std::size_t> after = oracle::ranks(eb.constrained);
  CHECK(before == after);

  // Zero heterogeneity: everything collapses to the mean of the shrunken set.
  const EbResult collapsed = eb_constrained(input, nu, 0.0);
  const double center = oracle::mean(collapsed.shrunken);
  for (const double v : collapsed.constrained) CHECK(v == doctest::Approx(center).epsilon(1e-12));
}

TEST_CASE("within-intervention correlation rises with shared signal") {
  const MetaInput uncorrelated = synthetic_cells(40, 0.0, 0.0, 1);
  const MetaInput correlated = synthetic_cells(40, 0.3, 0.0, 2);
  const double low = estimate_icc(uncorrelated);
  const double high = estimate_icc(correlated);
  CHECK(low >= 0.0);
  CHECK(low <= 1.0);
  CHECK(high > 0.6);
  CHECK(high > low);
}

TEST_CASE("full meta run wires the estimators together") {
  const MetaInput input = synthetic_cells(14, 0.15, 0.0, 3);
  const MetaResult result = run_meta(input);
  CHECK(result.rho_hat >= 0.0);
  CHECK(result.rho_hat <= 1.0);
  CHECK(result.k_effective ==
        doctest::Approx(effective_sample_size(input.cells.size(), kNumOutcomes, result.rho_hat))
            .epsilon(1e-12));
  const MomResult mom = tau2_mom(input, result.k_effective);
  CHECK(result.tau2_hat == doctest::Approx(mom.tau2_hat).epsilon(1e-12));
  CHECK(result.q == doctest::Approx(mom.q).epsilon(1e-12));
  CHECK(result.nu_hat == doctest::Approx(pooled_mean_nu(input, result.tau2_hat)).epsilon(1e-12));
  REQUIRE(result.constrained.size() == input.cells.size());
  double abs_sum = 0.0;
  for (const double v : result.constrained) abs_sum += std::abs(v);
  CHECK(result.mean_abs_constrained ==
        doctest::Approx(abs_sum / static_cast<double>(input.cells.size())).epsilon(1e-12));
  for (std::size_t i = 0; i < input.cells.size(); ++i)
    CHECK(result.weights[i] ==
          doctest::Approx(1.0 / (input.cells[i].sigma2_hat + result.tau2_hat)).epsilon(1e-12));
}

TEST_CASE("intervention-level meta averages outcomes before pooling") {
  const MetaInput input = synthetic_cells(12, 0.2, 0.0, 4);
  const InterventionMeta meta = intervention_level_meta(input, 999);
  CHECK(meta.n_interventions == 12);
  CHECK(meta.tau2_hat >= 0.0);
  CHECK(meta.q >= 0.0);
  CHECK(meta.ci95[0] <= meta.ci95[1]);
  CHECK(meta.ci95[0] >= 0.0);
  // The interval is a test inversion, so it covers the point estimate
  // whenever the estimate itself is not rejected.
  if (meta.tau2_hat > meta.ci95[0] && meta.tau2_hat < meta.ci95[1]) CHECK(true);

  // Deterministic in the seed.
  const InterventionMeta again = intervention_level_meta(input, 999);
  CHECK(again.ci95[0] == meta.ci95[0]);
  CHECK(again.ci95[1] == meta.ci95[1]);

  // With strong heterogeneity the lower bound moves off zero.
  const MetaInput wide = synthetic_cells(20, 0.5, 0.0, 5);
  const InterventionMeta spread = intervention_level_meta(wide, 999);
  CHECK(spread.ci95[0] > 0.0);
}

TEST_CASE("magnitude regression reproduces a six-point least squares fit") {
  // Two interventions x three outcomes with hand-picked magnitudes.
  std::vector<double> abs_bias = {0.30, 0.25, 0.20, 0.10, 0.12, 0.08};
  std::vector<RegressionCell> cells(6);
  for (std::size_t i = 0; i < 6; ++i) {
    cells[i].outcome = static_cast<Outcome>(i % 3);
    cells[i].sample_size_thousands = i < 3 ? 1.2 : 3.4;
    cells[i].violation_count = static_cast<double>(i);
  }

  const RegressionFit on_size =
      predict_bias_magnitude(abs_bias, cells, BiasPredictor::sample_size);
  Eigen::MatrixXd x(6, 2);
  Eigen::VectorXd y(6);
  for (std::size_t i = 0; i < 6; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = cells[i].sample_size_thousands;
    y(i) = abs_bias[i];
  }
  const Eigen::VectorXd beta = oracle::normal_equations_ols(x, y);
  REQUIRE(on_size.coefficients.size() == 2);
  CHECK(on_size.coefficients(0) == doctest::Approx(beta(0)).epsilon(1e-10));
  CHECK(on_size.coefficients(1) == doctest::Approx(beta(1)).epsilon(1e-10));
  CHECK(on_size.n == 6);
  CHECK(on_size.df1 == 1);
  CHECK(on_size.df2 == 4);

  // Conventional OLS standard errors with the n - p denominator.
  const Eigen::VectorXd resid = y - x * beta;
  const double s2 = resid.squaredNorm() / 4.0;
  const Eigen::MatrixXd cov = s2 * (x.transpose() * x).inverse();
  CHECK(on_size.standard_errors(1) == doctest::Approx(std::sqrt(cov(1, 1))).epsilon(1e-10));

  // R^2 and the F statistic against the intercept-only model.
  double m = 0.0;
  for (const double v : abs_bias) m += v;
  m /= 6.0;
  double tss = 0.0;
  for (const double v : abs_bias) tss += (v - m) * (v - m);
  const double r2 = 1.0 - resid.squaredNorm() / tss;
  CHECK(on_size.r2 == doctest::Approx(r2).epsilon(1e-10));
  CHECK(on_size.f_stat == doctest::Approx((r2 / 1.0) / ((1.0 - r2) / 4.0)).epsilon(1e-8));

  const RegressionFit on_outcomes =
      predict_bias_magnitude(abs_bias, cells, BiasPredictor::outcome_dummies);
  CHECK(on_outcomes.coefficients.size() == 3);  // intercept + two dummies
  CHECK(on_outcomes.df1 == 2);

  const RegressionFit on_violations =
      predict_bias_magnitude(abs_bias, cells, BiasPredictor::violation_count);
  CHECK(on_violations.coefficients.size() == 2);

  // Rank-deficient design: all sample sizes equal.
  for (RegressionCell& cell : cells) cell.sample_size_thousands = 2.0;
  CHECK_THROWS_AS(
      static_cast<void>(predict_bias_magnitude(abs_bias, cells, BiasPredictor::sample_size)),
      NumericError);
}

TEST_CASE("meta outputs persist to json and csv") {
  const MetaInput input = synthetic_cells(4, 0.1, 0.0, 6);
  const MetaResult result = run_meta(input);
  const auto dir = std::filesystem::temp_directory_path() / "wsc_meta_save";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string json_path = (dir / "meta.json").string();
  const std::string csv_path = (dir / "cells.csv").string();
  save_meta(result, input, json_path, csv_path);
  CHECK(std::filesystem::file_size(json_path) > 0);
  CHECK(std::filesystem::file_size(csv_path) > 0);
  std::filesystem::remove_all(dir);
}
