#include "wsc/propensity.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "wsc/errors.hpp"
#include "wsc/linalg.hpp"

namespace wsc {

namespace {

constexpr double kEtaClip = 15.0;

double clip_eta(double eta) { return std::clamp(eta, -kEtaClip, kEtaClip); }

// Natural cubic spline nonlinear basis on 5 knots. With the linear term
// supplied elsewhere, the three columns below complete the natural basis:
// d_j(x) - d_{K-1}(x), d_j(x) = [(x-k_j)+^3 - (x-k_K)+^3] / (k_K - k_j).
double spline_basis(const SplineTerm& term, std::size_t j, double x) {
  const auto cube_pos = [](double v) { return v > 0.0 ? v * v * v : 0.0; };
  const auto d = [&](std::size_t i) {
    return (cube_pos(x - term.knots[i]) - cube_pos(x - term.knots[4])) /
           (term.knots[4] - term.knots[i]);
  };
  return d(j) - d(3);
}

}  // namespace

ModelMatrix build_model_matrix(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                               const PropensitySpec& spec) {
  const std::size_t n = rows.size();
  const std::size_t p = 1 + spec.main_effects.size() + spec.interactions.size() +
                        3 * spec.splines.size();
  ModelMatrix mm;
  mm.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  mm.names.reserve(p);
  mm.names.push_back("(intercept)");
  for (const std::size_t c : spec.main_effects) mm.names.push_back(design.columns[c].name);
  for (const auto& [a, b] : spec.interactions)
    mm.names.push_back(design.columns[a].name + "*" + design.columns[b].name);
  for (const SplineTerm& term : spec.splines)
    for (int k = 1; k <= 3; ++k) {
      std::ostringstream os;
      os << "ns(" << design.columns[term.column].name << "," << k << ")";
      mm.names.push_back(os.str());
    }

  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double>& f = design.rows[rows[i]].features;
    Eigen::Index c = 0;
    mm.values(static_cast<Eigen::Index>(i), c++) = 1.0;
    for (const std::size_t m : spec.main_effects)
      mm.values(static_cast<Eigen::Index>(i), c++) = f[m];
    for (const auto& [a, b] : spec.interactions)
      mm.values(static_cast<Eigen::Index>(i), c++) = f[a] * f[b];
    for (const SplineTerm& term : spec.splines)
      for (std::size_t k = 0; k < 3; ++k)
        mm.values(static_cast<Eigen::Index>(i), c++) = spline_basis(term, k, f[term.column]);
  }
  return mm;
}

FittedPropensity fit_logistic(const DesignMatrix& design, const std::vector<std::size_t>& rows,
                              const std::vector<std::uint8_t>& labels,
                              const PropensitySpec& spec) {
  if (rows.size() != labels.size()) throw ArgumentError("logistic fit: rows and labels disagree");
  if (rows.empty()) throw ArgumentError("logistic fit: no rows");
  std::size_t positives = 0;
  for (const std::uint8_t y : labels) positives += y ? 1 : 0;
  if (positives == 0 || positives == labels.size())
    throw ArgumentError("logistic fit: outcome is constant across rows");

  const ModelMatrix full = build_model_matrix(design, rows, spec);

  // Prune constant and aliased columns via the Gram matrix; intercept first.
  Eigen::MatrixXd gram_lower = Eigen::MatrixXd::Zero(full.values.cols(), full.values.cols());
  gram_lower.selfadjointView<Eigen::Lower>().rankUpdate(full.values.transpose());
  Eigen::MatrixXd gram = gram_lower.selfadjointView<Eigen::Lower>();
  // Center all but the intercept so constants alias against it.
  {
    const double n = static_cast<double>(full.values.rows());
    const Eigen::VectorXd colsum = full.values.colwise().sum();
    gram -= (colsum * colsum.transpose()) / n;
    gram(0, 0) = n;  // keep the intercept selectable
  }
  const std::vector<std::size_t> kept = greedy_rank_prune(gram);

  FittedPropensity fit;
  fit.spec = spec;
  {
    std::set<std::size_t> kept_set(kept.begin(), kept.end());
    for (std::size_t c = 0; c < full.names.size(); ++c) {
      if (kept_set.count(c)) fit.column_names.push_back(full.names[c]);
      else fit.dropped_columns.push_back(full.names[c]);
    }
  }

  const Eigen::Index n = full.values.rows();
  const Eigen::Index p = static_cast<Eigen::Index>(kept.size());
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index c = 0; c < p; ++c)
    x.col(c) = full.values.col(static_cast<Eigen::Index>(kept[static_cast<std::size_t>(c)]));
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double score_norm = 0.0;
  int iter = 0;
  Eigen::MatrixXd hessian(p, p);
  bool numeric_ok = true;
  for (iter = 0; iter < 50; ++iter) {
    const Eigen::VectorXd eta = (x * beta).unaryExpr([](double e) { return clip_eta(e); });
    const Eigen::VectorXd prob =
        eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Eigen::VectorXd score = x.transpose() * (y - prob);
    score_norm = score.lpNorm<Eigen::Infinity>();
    // Extra internal precision; the reported convergence criterion is 1e-8.
    if (score_norm < 1e-12) break;
    const Eigen::VectorXd w = prob.array() * (1.0 - prob.array());
    hessian.noalias() = x.transpose() * w.asDiagonal() * x;
    const Eigen::VectorXd delta = hessian.ldlt().solve(score);
    if (!delta.allFinite()) {
      numeric_ok = false;
      break;
    }
    beta += delta;
    if (beta.lpNorm<Eigen::Infinity>() > 1e4) {
      numeric_ok = false;
      break;
    }
  }

  fit.coefficients = beta;
  fit.iterations = iter;
  fit.final_score_norm = score_norm;
  fit.converged = numeric_ok && score_norm < 1e-8;

  // Observed-information standard errors at the final coefficients.
  {
    const Eigen::VectorXd eta = (x * beta).unaryExpr([](double e) { return clip_eta(e); });
    const Eigen::VectorXd prob =
        eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
    const Eigen::VectorXd w = prob.array() * (1.0 - prob.array());
    hessian.noalias() = x.transpose() * w.asDiagonal() * x;
    const Eigen::MatrixXd cov = hessian.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
    fit.standard_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  }
  return fit;
}

std::vector<double> propensity_logits(const FittedPropensity& fit, const DesignMatrix& design,
                                      const std::vector<std::size_t>& rows) {
  const ModelMatrix full = build_model_matrix(design, rows, fit.spec);
  // Map kept column names back to positions in the full matrix.
  std::vector<Eigen::Index> cols;
  cols.reserve(fit.column_names.size());
  std::size_t cursor = 0;
  for (std::size_t c = 0; c < full.names.size(); ++c) {
    if (cursor < fit.column_names.size() && full.names[c] == fit.column_names[cursor]) {
      cols.push_back(static_cast<Eigen::Index>(c));
      ++cursor;
    }
  }
  if (cursor != fit.column_names.size())
    throw ArgumentError("propensity scores: fit does not match the design");

  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double eta = 0.0;
    for (std::size_t c = 0; c < cols.size(); ++c)
      eta += full.values(static_cast<Eigen::Index>(i), cols[c]) *
             fit.coefficients(static_cast<Eigen::Index>(c));
    out[i] = clip_eta(eta);
  }
  return out;
}

PropensitySpec baseline_spec(const DesignMatrix& design) {
  PropensitySpec spec;
  spec.kind = SpecKind::baseline;
  spec.main_effects.resize(design.columns.size());
  for (std::size_t c = 0; c < design.columns.size(); ++c) spec.main_effects[c] = c;
  return spec;
}

CandidateSpecs enumerate_candidate_specs(const DesignMatrix& design,
                                         const std::vector<std::size_t>& fit_rows,
                                         const FittedPropensity& baseline, double alpha) {
  if (baseline.spec.kind != SpecKind::baseline)
    throw ArgumentError("candidate enumeration needs a baseline fit");
  CandidateSpecs out;
  out.specs[0] = baseline.spec;

  // Two-sided Wald tests on the baseline coefficients pick the interaction
  // anchors. Columns pruned from the baseline fit have no test and stay out.
  std::vector<std::size_t> significant;
  for (std::size_t c = 0; c < design.columns.size(); ++c) {
    const std::string& name = design.columns[c].name;
    const auto it = std::find(baseline.column_names.begin(), baseline.column_names.end(), name);
    if (it == baseline.column_names.end()) continue;
    const Eigen::Index k = static_cast<Eigen::Index>(it - baseline.column_names.begin());
    const double se = baseline.standard_errors(k);
    if (!(se > 0.0)) continue;
    const double z = baseline.coefficients(k) / se;
    if (two_sided_normal_p(z) < alpha) significant.push_back(c);
  }

  PropensitySpec interacted = baseline.spec;
  interacted.kind = SpecKind::interacted;
  if (significant.empty()) {
    out.warnings.push_back({"no_significant_covariates",
                            "baseline has no significant covariates; the interacted "
                            "specification equals the baseline"});
  } else {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const std::size_t s : significant) {
      for (const std::size_t v : baseline.spec.main_effects) {
        if (v == s) continue;
        const auto key = std::minmax(s, v);
        if (seen.insert(key).second) interacted.interactions.push_back(key);
      }
    }
  }
  out.specs[1] = interacted;

  PropensitySpec flexible = interacted;
  flexible.kind = SpecKind::flexible;
  for (const std::size_t c : flexible.main_effects) {
    if (design.columns[c].binary) continue;
    std::vector<double> values;
    values.reserve(fit_rows.size());
    for (const std::size_t r : fit_rows) values.push_back(design.rows[r].features[c]);
    std::sort(values.begin(), values.end());
    SplineTerm term;
    term.column = c;
    term.knots = {values.front(), sorted_quantile(values, 0.25), sorted_quantile(values, 0.5),
                  sorted_quantile(values, 0.75), values.back()};
    const bool increasing = term.knots[0] < term.knots[1] && term.knots[1] < term.knots[2] &&
                            term.knots[2] < term.knots[3] && term.knots[3] < term.knots[4];
    if (!increasing) {
      out.warnings.push_back({"spline_skipped",
                              design.columns[c].name + ": knots not distinct on the fit rows"});
      continue;
    }
    flexible.splines.push_back(term);
  }
  out.specs[2] = flexible;
  return out;
}

BalanceReport balance_report(const MatchedSample& matched, const DesignMatrix& design) {
  if (matched.pairs.empty()) throw ArgumentError("balance report: no matched pairs");
  BalanceReport out;
  const std::size_t p = design.columns.size();

  std::vector<double> treated_mean(p, 0.0), control_mean(p, 0.0);
  for (const MatchedPair& pair : matched.pairs) {
    const std::vector<double>& t = design.rows[design.row_index(pair.treated_id)].raw_means;
    const std::vector<double>& c = design.rows[design.row_index(pair.control_id)].raw_means;
    for (std::size_t k = 0; k < p; ++k) {
      treated_mean[k] += t[k];
      control_mean[k] += c[k];
    }
  }
  const double m = static_cast<double>(matched.pairs.size());
  for (std::size_t k = 0; k < p; ++k) {
    treated_mean[k] /= m;
    control_mean[k] /= m;
  }

  // Pool spread on the raw scale over the trimmed pool.
  std::vector<double> pool_sd(p, 0.0);
  {
    const double n = static_cast<double>(matched.trimmed_pool_ids.size());
    if (n >= 2.0) {
      std::vector<double> mean(p, 0.0), ss(p, 0.0);
      for (const std::string& id : matched.trimmed_pool_ids) {
        const std::vector<double>& r = design.rows[design.row_index(id)].raw_means;
        for (std::size_t k = 0; k < p; ++k) mean[k] += r[k];
      }
      for (std::size_t k = 0; k < p; ++k) mean[k] /= n;
      for (const std::string& id : matched.trimmed_pool_ids) {
        const std::vector<double>& r = design.rows[design.row_index(id)].raw_means;
        for (std::size_t k = 0; k < p; ++k) ss[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
      }
      for (std::size_t k = 0; k < p; ++k) pool_sd[k] = std::sqrt(ss[k] / (n - 1.0));
    }
  }

  for (std::size_t k = 0; k < p; ++k) {
    BalanceEntry entry;
    entry.covariate = design.columns[k].name;
    if (pool_sd[k] > 0.0) {
      entry.smd = (treated_mean[k] - control_mean[k]) / pool_sd[k];
    } else {
      entry.smd = 0.0;
      entry.degenerate = true;
    }
    entry.violation = std::abs(entry.smd) > 0.25;
    if (entry.violation) ++out.violation_count;
    out.entries.push_back(std::move(entry));
  }
  return out;
}

SpecSelection select_spec(
    const DesignMatrix& design, const std::vector<std::size_t>& fit_rows,
    const std::vector<std::uint8_t>& labels, const CandidateSpecs& candidates,
    const std::function<MatchedSample(const FittedPropensity&)>& matcher) {
  SpecSelection sel;
  sel.warnings = candidates.warnings;
  std::array<std::string, 3> failure;
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      sel.fits[i] = fit_logistic(design, fit_rows, labels, candidates.specs[i]);
      sel.matched[i] = matcher(sel.fits[i]);
      sel.balance[i] = balance_report(sel.matched[i], design);
      sel.violations[i] = sel.balance[i].violation_count;
      sel.feasible[i] = true;
    } catch (const Error& e) {
      failure[i] = std::string(e.category()) + ": " + e.what();
      sel.warnings.push_back({"candidate_failed",
                              std::string(kSpecNames[i]) + " specification failed; " + failure[i]});
    }
  }

  bool any = false;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!sel.feasible[i]) continue;
    // Strict inequality keeps the simpler specification on ties.
    if (!any || sel.violations[i] < sel.violations[sel.selected]) sel.selected = i;
    any = true;
  }
  if (!any) {
    std::ostringstream os;
    os << "every propensity specification failed:";
    for (std::size_t i = 0; i < 3; ++i) os << " [" << kSpecNames[i] << "] " << failure[i];
    throw NoOverlapError(os.str());
  }
  return sel;
}

}  // namespace wsc
