#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "wsc/errors.hpp"
#include "wsc/mlm.hpp"
#include "wsc/rng.hpp"

using namespace wsc;

namespace {

struct Simulated {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  std::vector<std::size_t> cluster;
  std::vector<oracle::GlsCluster> groups;  // per-cluster mean/size/arm
};

// Two-arm clustered data with known variance components: y = mu + tau*arm +
// alpha_cluster + eps. Covariates beyond the group indicator are omitted so
// the GLS contrast has a closed form.
Simulated simulate_two_arm(std::size_t n_clusters, double tau, double sd_alpha, double sd_eps,
                           std::uint64_t unit, bool balanced) {
  rng::Substream stream(31415926, rng::Tag::test_only, unit);
  Simulated out;
  std::vector<double> values;
  std::vector<std::size_t> sizes;
  for (std::size_t j = 0; j < n_clusters; ++j)
    sizes.push_back(balanced ? 8 : 4 + stream.next_below(9));
  std::size_t total = 0;
  for (const std::size_t s : sizes) total += s;
  out.x.resize(static_cast<Eigen::Index>(total), 2);
  out.y.resize(static_cast<Eigen::Index>(total));
  Eigen::Index row = 0;
  for (std::size_t j = 0; j < n_clusters; ++j) {
    const double arm = j < n_clusters / 2 ? 1.0 : 0.0;
    const double alpha = sd_alpha * stream.next_normal();
    double sum = 0.0;
    for (std::size_t i = 0; i < sizes[j]; ++i) {
      const double y = 0.3 + tau * arm + alpha + sd_eps * stream.next_normal();
      out.x(row, 0) = 1.0;
      out.x(row, 1) = arm;
      out.y(row) = y;
      out.cluster.push_back(j);
      sum += y;
      ++row;
    }
    out.groups.push_back({sum / static_cast<double>(sizes[j]), sizes[j], arm > 0.5});
  }
  return out;
}

}  // namespace

TEST_CASE("cluster sufficient statistics summarize the raw data") {
  const Simulated sim = simulate_two_arm(6, 0.4, 0.5, 1.0, 1, false);
  const MlmData data = MlmData::build(sim.x, sim.y, sim.cluster);
  CHECK(data.n_obs == static_cast<std::size_t>(sim.y.size()));
  CHECK(data.n_params == 2);
  REQUIRE(data.clusters.size() == 6);
  double yty = 0.0;
  for (Eigen::Index i = 0; i < sim.y.size(); ++i) yty += sim.y(i) * sim.y(i);
  double got_yty = 0.0;
  std::size_t got_n = 0;
  for (const ClusterStats& c : data.clusters) {
    got_yty += c.yty;
    got_n += c.n;
    CHECK(c.xtx.rows() == 2);
    CHECK(c.xsum(0) == doctest::Approx(static_cast<double>(c.n)).epsilon(1e-12));
  }
  CHECK(got_n == data.n_obs);
  CHECK(got_yty == doctest::Approx(yty).epsilon(1e-12));

  std::vector<std::size_t> bad = sim.cluster;
  bad.pop_back();
  CHECK_THROWS_AS(static_cast<void>(MlmData::build(sim.x, sim.y, bad)), ArgumentError);
}

TEST_CASE("forced zero ratio reproduces ordinary least squares") {
  const Simulated sim = simulate_two_arm(8, 0.5, 0.4, 1.0, 2, false);
  const MlmData data = MlmData::build(sim.x, sim.y, sim.cluster);
  const MlmFitResult fit = fit_random_intercept(data, 0.0);
  REQUIRE(fit.converged);
  CHECK(fit.ratio == 0.0);
  CHECK(fit.sigma2_cluster == 0.0);
  const Eigen::VectorXd ols = oracle::normal_equations_ols(sim.x, sim.y);
  CHECK(fit.beta(0) == doctest::Approx(ols(0)).epsilon(1e-10));
  CHECK(fit.beta(1) == doctest::Approx(ols(1)).epsilon(1e-10));
  // Residual variance under OLS with the REML denominator n - p.
  const double rss = (sim.y - sim.x * ols).squaredNorm();
  CHECK(fit.sigma2_resid ==
        doctest::Approx(rss / static_cast<double>(sim.y.size() - 2)).epsilon(1e-10));
}

TEST_CASE("any forced ratio matches the closed-form GLS contrast") {
  const Simulated sim = simulate_two_arm(10, 0.3, 0.6, 0.9, 3, false);
  const MlmData data = MlmData::build(sim.x, sim.y, sim.cluster);
  for (const double ratio : {0.05, 0.4, 1.7, 12.0}) {
    const MlmFitResult fit = fit_random_intercept(data, ratio);
    CHECK(fit.beta(1) ==
          doctest::Approx(oracle::gls_group_contrast(sim.groups, ratio)).epsilon(1e-9));
  }
}

TEST_CASE("estimated ratio sits at the REML criterion optimum") {
  const Simulated sim = simulate_two_arm(40, 0.4, 0.7, 1.0, 4, false);
  const MlmData data = MlmData::build(sim.x, sim.y, sim.cluster);
  const MlmFitResult fit = fit_random_intercept(data);
  REQUIRE(fit.converged);
  CHECK(fit.sigma2_cluster > 0.0);
  CHECK(fit.ratio == doctest::Approx(fit.sigma2_cluster / fit.sigma2_resid).epsilon(1e-12));
  CHECK(fit.evaluations > 0);
  CHECK(static_cast<std::size_t>(fit.evaluations) == fit.trace.size());

  // Nudging the ratio in either direction must not improve the criterion,
  // which the fitter minimizes.
  for (const double factor : {0.9, 1.1}) {
    const MlmFitResult nudged = fit_random_intercept(data, fit.ratio * factor);
    CHECK(nudged.criterion >= fit.criterion - 1e-7);
  }

  // The group contrast at the estimated ratio agrees with the closed form.
  CHECK(fit.beta(1) ==
        doctest::Approx(oracle::gls_group_contrast(sim.groups, fit.ratio)).epsilon(1e-9));
}

TEST_CASE("pure between-cluster noise drives the ratio up, pure noise down") {
  const Simulated noisy = simulate_two_arm(40, 0.0, 0.0, 1.0, 5, true);
  const MlmData flat = MlmData::build(noisy.x, noisy.y, noisy.cluster);
  const MlmFitResult flat_fit = fit_random_intercept(flat);
  CHECK(flat_fit.ratio < 0.15);

  const Simulated grouped = simulate_two_arm(40, 0.0, 2.0, 0.5, 6, true);
  const MlmData deep = MlmData::build(grouped.x, grouped.y, grouped.cluster);
  const MlmFitResult deep_fit = fit_random_intercept(deep);
  CHECK(deep_fit.ratio > 2.0);
}

TEST_CASE("exhausting the evaluation budget raises a traced error") {
  const Simulated sim = simulate_two_arm(12, 0.3, 0.5, 1.0, 7, false);
  const MlmData data = MlmData::build(sim.x, sim.y, sim.cluster);
  CHECK_THROWS_AS(static_cast<void>(fit_random_intercept(data, std::nullopt, 3)), NumericError);
}
