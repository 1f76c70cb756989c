#include "wsc/meta.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"
#include "wsc/linalg.hpp"
#include "wsc/mlm.hpp"
#include "wsc/rng.hpp"

namespace wsc {

namespace {

// Intervention ids in first-appearance order with per-cell group indices.
std::pair<std::vector<std::string>, std::vector<std::size_t>> group_cells(const MetaInput& input) {
  std::vector<std::string> ids;
  std::vector<std::size_t> group(input.cells.size());
  for (std::size_t i = 0; i < input.cells.size(); ++i) {
    const std::string& id = input.cells[i].intervention_id;
    const auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) {
      group[i] = ids.size();
      ids.push_back(id);
    } else {
      group[i] = static_cast<std::size_t>(it - ids.begin());
    }
  }
  return {ids, group};
}

}  // namespace

double estimate_icc(const MetaInput& input) {
  const auto [ids, group] = group_cells(input);
  std::vector<std::size_t> sizes(ids.size(), 0);
  for (const std::size_t g : group) ++sizes[g];
  std::size_t usable = 0;
  for (const std::size_t s : sizes) usable += s >= 2 ? 1 : 0;
  if (usable < 2)
    throw ArgumentError("ICC estimate needs at least 2 interventions with at least 2 outcomes");

  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(input.cells.size()), 1);
  Eigen::VectorXd y(static_cast<Eigen::Index>(input.cells.size()));
  for (std::size_t i = 0; i < input.cells.size(); ++i)
    y(static_cast<Eigen::Index>(i)) = input.cells[i].beta_hat;

  const MlmData data = MlmData::build(x, y, group);
  const MlmFitResult fit = fit_random_intercept(data);
  const double total = fit.sigma2_cluster + fit.sigma2_resid;
  if (!(total > 0.0)) return 0.0;
  const double rho = fit.sigma2_cluster / total;
  return std::clamp(rho, 0.0, 1.0 - 1e-12);
}

double effective_sample_size(std::size_t n_cells, std::size_t k_outcomes, double rho_hat) {
  if (n_cells == 0 || k_outcomes == 0 || n_cells % k_outcomes != 0)
    throw ArgumentError("effective sample size: cell count must be a positive multiple of the outcomes");
  if (rho_hat < 0.0 || rho_hat >= 1.0)
    throw ArgumentError("effective sample size: rho must lie in [0, 1)");
  return static_cast<double>(n_cells) /
         (1.0 + (static_cast<double>(k_outcomes) - 1.0) * rho_hat);
}

MomResult tau2_mom(const MetaInput& input, double k_effective) {
  if (input.cells.size() < 2) throw ArgumentError("tau2 estimate needs at least 2 cells");
  double sum_w = 0.0;
  double sum_w2 = 0.0;
  double sum_wb = 0.0;
  for (const MetaCell& cell : input.cells) {
    if (!(cell.sigma2_hat > 0.0))
      throw ArgumentError("tau2 estimate: nonpositive variance for " + cell.intervention_id);
    const double w = 1.0 / cell.sigma2_hat;
    sum_w += w;
    sum_w2 += w * w;
    sum_wb += w * cell.beta_hat;
  }
  const double beta_bar = sum_wb / sum_w;
  double q = 0.0;
  for (const MetaCell& cell : input.cells) {
    const double d = cell.beta_hat - beta_bar;
    q += d * d / cell.sigma2_hat;
  }
  const double denom = sum_w - sum_w2 / sum_w;
  if (!(denom > 0.0))
    throw ArgumentError("tau2 estimate: zero weight denominator (degenerate cell set)");

  MomResult out;
  out.q = q;
  out.beta_bar = beta_bar;
  out.tau2_hat = std::max(0.0, (q - (k_effective - 1.0)) / denom);
  return out;
}

double pooled_mean_nu(const MetaInput& input, double tau2_hat) {
  if (tau2_hat < 0.0) throw ArgumentError("pooled mean: tau2 must be nonnegative");
  if (input.cells.empty()) throw ArgumentError("pooled mean: no cells");
  double sum_w = 0.0;
  double sum_wb = 0.0;
  for (const MetaCell& cell : input.cells) {
    const double w = 1.0 / (cell.sigma2_hat + tau2_hat);
    sum_w += w;
    sum_wb += w * cell.beta_hat;
  }
  if (!(sum_w > 0.0)) throw NumericError("pooled mean: zero total weight");
  return sum_wb / sum_w;
}

EbResult eb_constrained(const MetaInput& input, double nu_hat, double tau2_hat) {
  if (tau2_hat < 0.0) throw ArgumentError("shrinkage: tau2 must be nonnegative");
  if (input.cells.empty()) throw ArgumentError("shrinkage: no cells");
  EbResult out;
  out.shrunken.reserve(input.cells.size());
  out.lambdas.reserve(input.cells.size());
  for (const MetaCell& cell : input.cells) {
    const double total = cell.sigma2_hat + tau2_hat;
    // sigma2 = tau2 = 0 leaves the estimate untouched.
    const double lambda = total > 0.0 ? cell.sigma2_hat / total : 0.0;
    out.lambdas.push_back(lambda);
    out.shrunken.push_back(lambda * nu_hat + (1.0 - lambda) * cell.beta_hat);
  }

  const double center = mean_of(out.shrunken);
  out.constrained.assign(out.shrunken.size(), center);
  if (tau2_hat > 0.0) {
    const double var = sample_variance(out.shrunken);
    if (!(var > 0.0))
      throw NumericError("shrinkage rescale is degenerate: shrunken estimates have no spread");
    const double c = std::sqrt(tau2_hat / var);
    for (std::size_t i = 0; i < out.shrunken.size(); ++i)
      out.constrained[i] = center + c * (out.shrunken[i] - center);
  }
  return out;
}

MetaResult run_meta(const MetaInput& input) {
  MetaResult result;
  result.rho_hat = estimate_icc(input);
  result.k_effective =
      effective_sample_size(input.cells.size(), static_cast<std::size_t>(kNumOutcomes),
                            result.rho_hat);
  const MomResult mom = tau2_mom(input, result.k_effective);
  result.tau2_hat = mom.tau2_hat;
  result.q = mom.q;
  result.nu_hat = pooled_mean_nu(input, result.tau2_hat);
  EbResult eb = eb_constrained(input, result.nu_hat, result.tau2_hat);
  result.shrunken = std::move(eb.shrunken);
  result.constrained = std::move(eb.constrained);
  result.lambdas = std::move(eb.lambdas);
  result.weights.reserve(input.cells.size());
  for (const MetaCell& cell : input.cells)
    result.weights.push_back(1.0 / (cell.sigma2_hat + result.tau2_hat));
  double abs_sum = 0.0;
  for (const double b : result.constrained) abs_sum += std::abs(b);
  result.mean_abs_constrained = abs_sum / static_cast<double>(result.constrained.size());
  return result;
}

InterventionMeta intervention_level_meta(const MetaInput& input, std::uint64_t ci_seed) {
  const auto [ids, group] = group_cells(input);
  std::vector<std::array<bool, static_cast<std::size_t>(kNumOutcomes)>> seen(
      ids.size(), {false, false, false});
  std::vector<double> beta_sum(ids.size(), 0.0), sigma_sum(ids.size(), 0.0);
  for (std::size_t i = 0; i < input.cells.size(); ++i) {
    const MetaCell& cell = input.cells[i];
    if (!(cell.sigma2_hat > 0.0))
      throw ArgumentError("intervention meta: nonpositive variance for " + cell.intervention_id);
    auto& flags = seen[group[i]];
    const std::size_t k = static_cast<std::size_t>(cell.outcome);
    if (flags[k])
      throw ArgumentError("intervention meta: duplicate outcome cell for " + cell.intervention_id);
    flags[k] = true;
    beta_sum[group[i]] += cell.beta_hat;
    // Appendix-style aggregation averages the SDs, not the variances.
    sigma_sum[group[i]] += std::sqrt(cell.sigma2_hat);
  }
  for (std::size_t g = 0; g < ids.size(); ++g) {
    if (!(seen[g][0] && seen[g][1] && seen[g][2]))
      throw ArgumentError("intervention meta: " + ids[g] + " is missing outcome cells");
  }

  MetaInput collapsed;
  for (std::size_t g = 0; g < ids.size(); ++g) {
    MetaCell cell;
    cell.intervention_id = ids[g];
    cell.beta_hat = beta_sum[g] / static_cast<double>(kNumOutcomes);
    const double sigma = sigma_sum[g] / static_cast<double>(kNumOutcomes);
    cell.sigma2_hat = sigma * sigma;
    collapsed.cells.push_back(std::move(cell));
  }

  InterventionMeta out;
  out.n_interventions = ids.size();
  const MomResult mom = tau2_mom(collapsed, static_cast<double>(ids.size()));
  out.tau2_hat = mom.tau2_hat;
  out.q = mom.q;
  out.beta_bar = mom.beta_bar;

  // Test inversion: for each candidate tau2, simulate the Q distribution with
  // the observed per-intervention variances and keep candidates whose
  // observed Q is inside the central 95%.
  const std::size_t k = collapsed.cells.size();
  std::vector<double> weights(k), sigmas2(k);
  for (std::size_t g = 0; g < k; ++g) {
    sigmas2[g] = collapsed.cells[g].sigma2_hat;
    weights[g] = 1.0 / sigmas2[g];
  }
  constexpr int kGridPoints = 1001;  // tau2 in [0, 1] step 1e-3
  constexpr int kDrawsPerPoint = 2000;
  bool any_retained = false;
  double lo = 0.0, hi = 0.0;
  for (int gi = 0; gi < kGridPoints; ++gi) {
    const double tau2 = static_cast<double>(gi) * 1e-3;
    rng::Substream rs(ci_seed, rng::Tag::meta_ci, static_cast<std::uint64_t>(gi));
    std::vector<double> q_draws(kDrawsPerPoint);
    std::vector<double> b(k);
    for (int d = 0; d < kDrawsPerPoint; ++d) {
      double sum_w = 0.0, sum_wb = 0.0;
      for (std::size_t g = 0; g < k; ++g) {
        b[g] = rs.next_normal() * std::sqrt(tau2 + sigmas2[g]);
        sum_w += weights[g];
        sum_wb += weights[g] * b[g];
      }
      const double bbar = sum_wb / sum_w;
      double q = 0.0;
      for (std::size_t g = 0; g < k; ++g) q += weights[g] * (b[g] - bbar) * (b[g] - bbar);
      q_draws[static_cast<std::size_t>(d)] = q;
    }
    std::sort(q_draws.begin(), q_draws.end());
    const double q_lo = sorted_quantile(q_draws, 0.025);
    const double q_hi = sorted_quantile(q_draws, 0.975);
    if (out.q >= q_lo && out.q <= q_hi) {
      if (!any_retained) lo = tau2;
      hi = tau2;
      any_retained = true;
    }
  }
  // An empty retained set collapses to the boundary point.
  out.ci95 = any_retained ? std::array<double, 2>{lo, hi} : std::array<double, 2>{0.0, 0.0};
  return out;
}

RegressionFit predict_bias_magnitude(const std::vector<double>& abs_bias,
                                     const std::vector<RegressionCell>& cells,
                                     BiasPredictor predictors) {
  if (abs_bias.size() != cells.size())
    throw ArgumentError("magnitude regression: responses and cells disagree");
  std::vector<std::string> names = {"(intercept)"};
  switch (predictors) {
    case BiasPredictor::outcome_dummies:
      names.push_back("reading");
      names.push_back("writing");
      break;
    case BiasPredictor::sample_size:
      names.push_back("sample_size_thousands");
      break;
    case BiasPredictor::violation_count:
      names.push_back("violation_count");
      break;
  }
  const std::size_t p = names.size();
  if (abs_bias.size() < p + 2)
    throw ArgumentError("magnitude regression: needs at least p + 2 observations");

  const Eigen::Index n = static_cast<Eigen::Index>(abs_bias.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(p));
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RegressionCell& cell = cells[static_cast<std::size_t>(i)];
    x(i, 0) = 1.0;
    switch (predictors) {
      case BiasPredictor::outcome_dummies:
        x(i, 1) = cell.outcome == Outcome::reading ? 1.0 : 0.0;
        x(i, 2) = cell.outcome == Outcome::writing ? 1.0 : 0.0;
        break;
      case BiasPredictor::sample_size:
        x(i, 1) = cell.sample_size_thousands;
        break;
      case BiasPredictor::violation_count:
        x(i, 1) = cell.violation_count;
        break;
    }
    y(i) = abs_bias[static_cast<std::size_t>(i)];
  }

  const Eigen::MatrixXd gram = x.transpose() * x;
  const std::vector<std::size_t> kept = greedy_rank_prune(gram);
  if (kept.size() != p) {
    std::ostringstream os;
    os << "magnitude regression: rank-deficient design; collinear columns:";
    for (std::size_t c = 0; c < p; ++c) {
      if (std::find(kept.begin(), kept.end(), c) == kept.end()) os << ' ' << names[c];
    }
    throw NumericError(os.str());
  }

  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::VectorXd beta = ldlt.solve(x.transpose() * y);
  const Eigen::VectorXd resid = y - x * beta;
  const double rss = resid.squaredNorm();
  const double ybar = y.mean();
  const double tss = (y.array() - ybar).matrix().squaredNorm();
  const std::size_t df2 = abs_bias.size() - p;
  const double sigma2 = rss / static_cast<double>(df2);
  const Eigen::MatrixXd cov =
      sigma2 * ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p),
                                                    static_cast<Eigen::Index>(p)));

  RegressionFit fit;
  fit.names = names;
  fit.coefficients = beta;
  fit.standard_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.r2 = tss > 0.0 ? 1.0 - rss / tss : 0.0;
  fit.df1 = p - 1;
  fit.df2 = df2;
  fit.n = abs_bias.size();
  fit.f_stat = tss > rss && rss > 0.0
                   ? ((tss - rss) / static_cast<double>(fit.df1)) /
                         (rss / static_cast<double>(df2))
                   : 0.0;
  return fit;
}

void save_meta(const MetaResult& result, const MetaInput& input, const std::string& json_path,
               const std::string& csv_path) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["nu_hat"] = result.nu_hat;
  j["tau2_hat"] = result.tau2_hat;
  j["q"] = result.q;
  j["k_effective"] = result.k_effective;
  j["rho_hat"] = result.rho_hat;
  j["mean_abs_constrained"] = result.mean_abs_constrained;
  j["n_cells"] = input.cells.size();
  std::ofstream os(json_path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + json_path);
  os << j.dump(2) << '\n';
  if (!os.flush()) throw IoError("write failed: " + json_path);

  csv::Table table;
  table.header = {"intervention_id", "outcome",   "beta_hat",   "sigma2_hat",
                  "lambda",          "shrunken",  "constrained"};
  for (std::size_t i = 0; i < input.cells.size(); ++i) {
    const MetaCell& cell = input.cells[i];
    table.rows.push_back({cell.intervention_id,
                          kOutcomeNames[static_cast<std::size_t>(cell.outcome)],
                          csv::format_double(cell.beta_hat), csv::format_double(cell.sigma2_hat),
                          csv::format_double(result.lambdas[i]),
                          csv::format_double(result.shrunken[i]),
                          csv::format_double(result.constrained[i])});
  }
  csv::write_file(csv_path, table);
}

}  // namespace wsc
