#include "wsc/mlm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "wsc/errors.hpp"

namespace wsc {

namespace {

struct ProfileEval {
  double criterion;
  Eigen::VectorXd beta;
  Eigen::MatrixXd xhx;  // X^T H^-1 X
  double sigma2;
  double logdet_h;
};

// Evaluates the REML profile criterion at a variance ratio r >= 0 using
// H = I + r Z Z^T. With H_j^-1 = I - (r/(1+r n_j)) J the weighted cross
// products collapse to rank-one corrections of the per-cluster sums.
ProfileEval evaluate_profile(const MlmData& data, double r) {
  const std::size_t p = data.n_params;
  Eigen::MatrixXd xhx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                              static_cast<Eigen::Index>(p));
  Eigen::VectorXd xhy = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  double yhy = 0.0;
  double logdet_h = 0.0;
  for (const ClusterStats& cl : data.clusters) {
    if (cl.n == 0) continue;
    const double nj = static_cast<double>(cl.n);
    const double shrink = r / (1.0 + r * nj);
    xhx += cl.xtx - shrink * (cl.xsum * cl.xsum.transpose());
    xhy += cl.xty - shrink * cl.ysum * cl.xsum;
    yhy += cl.yty - shrink * cl.ysum * cl.ysum;
    logdet_h += std::log1p(r * nj);
  }

  const Eigen::LDLT<Eigen::MatrixXd> ldlt(xhx);
  if (ldlt.info() != Eigen::Success)
    throw NumericError("random-intercept profile: X^T H^-1 X factorization failed");
  const Eigen::VectorXd beta = ldlt.solve(xhy);
  const double rss = yhy - beta.dot(xhy);

  const double df = static_cast<double>(data.n_obs) - static_cast<double>(p);
  if (df <= 0.0) throw ArgumentError("random-intercept model needs more observations than parameters");
  const double sigma2 = std::max(rss / df, 0.0);

  double logdet_xhx = 0.0;
  const Eigen::VectorXd d = ldlt.vectorD();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d(i) > 0.0))
      throw NumericError("random-intercept profile: X^T H^-1 X is singular; prune the design first");
    logdet_xhx += std::log(d(i));
  }

  ProfileEval out;
  out.criterion = df * std::log(std::max(rss, 1e-300) / df) + logdet_h + logdet_xhx;
  out.beta = beta;
  out.xhx = xhx;
  out.sigma2 = sigma2;
  out.logdet_h = logdet_h;
  return out;
}

std::string format_trace(const std::vector<std::pair<double, double>>& trace) {
  std::ostringstream os;
  os.precision(6);
  const std::size_t shown = std::min<std::size_t>(trace.size(), 12);
  for (std::size_t i = trace.size() - shown; i < trace.size(); ++i)
    os << " (ratio=" << trace[i].first << ", criterion=" << trace[i].second << ")";
  return os.str();
}

}  // namespace

MlmData MlmData::build(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const std::vector<std::size_t>& cluster) {
  if (x.rows() != y.size() || static_cast<std::size_t>(x.rows()) != cluster.size())
    throw ArgumentError("random-intercept data: row counts disagree");
  if (x.rows() == 0) throw ArgumentError("random-intercept data: no observations");

  std::size_t n_clusters = 0;
  for (const std::size_t c : cluster) n_clusters = std::max(n_clusters, c + 1);

  MlmData data;
  data.n_obs = static_cast<std::size_t>(x.rows());
  data.n_params = static_cast<std::size_t>(x.cols());
  data.clusters.resize(n_clusters);
  for (ClusterStats& cl : data.clusters) {
    cl.xtx = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    cl.xty = Eigen::VectorXd::Zero(x.cols());
    cl.xsum = Eigen::VectorXd::Zero(x.cols());
  }
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    ClusterStats& cl = data.clusters[cluster[static_cast<std::size_t>(i)]];
    const auto row = x.row(i);
    cl.n += 1;
    cl.xtx.noalias() += row.transpose() * row;
    cl.xty.noalias() += row.transpose() * y(i);
    cl.xsum += row.transpose();
    cl.ysum += y(i);
    cl.yty += y(i) * y(i);
  }
  return data;
}

MlmFitResult fit_random_intercept(const MlmData& data, std::optional<double> forced_ratio,
                                  int max_evaluations) {
  MlmFitResult result;
  int evals = 0;
  double best_r_seen = 0.0;
  double best_crit_seen = std::numeric_limits<double>::infinity();
  auto eval = [&](double r) {
    if (evals >= max_evaluations)
      throw NumericError("random-intercept REML exhausted its evaluation budget; trace:" +
                         format_trace(result.trace));
    ++evals;
    const ProfileEval pe = evaluate_profile(data, r);
    result.trace.emplace_back(r, pe.criterion);
    if (pe.criterion < best_crit_seen) {
      best_crit_seen = pe.criterion;
      best_r_seen = r;
    }
    return pe;
  };

  double best_r = 0.0;
  if (forced_ratio) {
    if (*forced_ratio < 0.0) throw ArgumentError("variance ratio must be nonnegative");
    best_r = *forced_ratio;
    result.converged = true;
  } else {
    // Bracket on {0} plus a log-spaced grid, then golden-section refine.
    std::vector<double> grid = {0.0};
    for (int i = 0; i <= 45; ++i)
      grid.push_back(std::pow(10.0, -6.0 + 9.0 * static_cast<double>(i) / 45.0));
    std::size_t best_idx = 0;
    double best_crit = eval(0.0).criterion;
    for (std::size_t i = 1; i < grid.size(); ++i) {
      const double crit = eval(grid[i]).criterion;
      if (crit < best_crit) {
        best_crit = crit;
        best_idx = i;
      }
    }

    if (best_idx == 0) {
      // Boundary optimum: the criterion rises away from zero.
      best_r = 0.0;
      result.converged = true;
    } else {
      const double lo = grid[best_idx - 1] > 0.0 ? grid[best_idx - 1] : grid[best_idx] * 1e-3;
      const double hi = best_idx + 1 < grid.size() ? grid[best_idx + 1] : grid[best_idx] * 1e3;
      double a = std::log(lo);
      double b = std::log(hi);
      const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
      double c = b - gr * (b - a);
      double d = a + gr * (b - a);
      double fc = eval(std::exp(c)).criterion;
      double fd = eval(std::exp(d)).criterion;
      while (b - a > 1e-8) {
        if (fc < fd) {
          b = d;
          d = c;
          fd = fc;
          c = b - gr * (b - a);
          fc = eval(std::exp(c)).criterion;
        } else {
          a = c;
          c = d;
          fc = fd;
          d = a + gr * (b - a);
          fd = eval(std::exp(d)).criterion;
        }
      }
      eval(std::exp(0.5 * (a + b)));
      // Take the best evaluated point; the zero boundary can still win when
      // the interior improvement was within noise of the flat region.
      best_r = best_r_seen;
      result.converged = true;
    }
  }

  const ProfileEval final_eval = evaluate_profile(data, best_r);
  result.beta = final_eval.beta;
  result.sigma2_resid = final_eval.sigma2;
  result.sigma2_cluster = best_r * final_eval.sigma2;
  result.ratio = best_r;
  result.criterion = final_eval.criterion;
  result.evaluations = evals;

  Eigen::MatrixXd cov = final_eval.xhx.ldlt().solve(
      Eigen::MatrixXd::Identity(final_eval.xhx.rows(), final_eval.xhx.cols()));
  result.se = (final_eval.sigma2 * cov.diagonal()).cwiseMax(0.0).cwiseSqrt();
  return result;
}

}  // namespace wsc
