// Independent reference implementations used to check the library against
// straightforward textbook arithmetic. Everything here is deliberately naive:
// dense solves, O(n^2) scans, no shared code with the library internals.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace oracle {

// Plain Newton-Raphson logistic regression without clipping or pruning.
inline Eigen::VectorXd newton_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                       int max_iter = 100, double tol = 1e-12) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd p(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-eta(i)));
      w(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd score = x.transpose() * (y - p);
    const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x;
    const Eigen::VectorXd delta = info.ldlt().solve(score);
    beta += delta;
    if (score.lpNorm<Eigen::Infinity>() < tol) break;
  }
  return beta;
}

// Weighted least squares solved through the normal equations.
inline Eigen::VectorXd normal_equations_ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  return (x.transpose() * x).ldlt().solve(x.transpose() * y);
}

// GLS contrast for a two-group random-intercept model without covariates:
// each cluster mean carries weight n_j / (1 + ratio * n_j).
struct GlsCluster {
  double mean = 0.0;
  std::size_t n = 0;
  bool treated = false;
};

inline double gls_group_contrast(const std::vector<GlsCluster>& clusters, double ratio) {
  double wt = 0.0, wyt = 0.0, wc = 0.0, wyc = 0.0;
  for (const GlsCluster& c : clusters) {
    const double w = static_cast<double>(c.n) / (1.0 + ratio * static_cast<double>(c.n));
    if (c.treated) {
      wt += w;
      wyt += w * c.mean;
    } else {
      wc += w;
      wyc += w * c.mean;
    }
  }
  return wyt / wt - wyc / wc;
}

// Min-cost bipartite matching by successive shortest augmenting paths
// (Bellman-Ford; fine at toy sizes). cost(i, j) = infinity marks a forbidden
// pair. Returns the optimal total cost for each cardinality 1..max_pairs.
inline std::vector<double> assignment_costs_by_cardinality(const Eigen::MatrixXd& cost) {
  const int n_left = static_cast<int>(cost.rows());
  const int n_right = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<int> match_left(n_left, -1), match_right(n_right, -1);
  std::vector<double> totals;
  double total = 0.0;

  while (true) {
    // Shortest alternating path from any free left node to any free right
    // node, tracked on right nodes.
    std::vector<double> dist(n_right, inf);
    std::vector<int> from_left(n_right, -1);
    for (int i = 0; i < n_left; ++i) {
      if (match_left[i] != -1) continue;
      for (int j = 0; j < n_right; ++j) {
        if (cost(i, j) < dist[j]) {
          dist[j] = cost(i, j);
          from_left[j] = i;
        }
      }
    }
    bool changed = true;
    while (changed) {
      changed = false;
      for (int j = 0; j < n_right; ++j) {
        if (match_right[j] == -1 || dist[j] == inf) continue;
        const int i = match_right[j];
        // Leave j's owner i, reassign i to another right node j2.
        for (int j2 = 0; j2 < n_right; ++j2) {
          if (j2 == j || cost(i, j2) == inf) continue;
          const double cand = dist[j] - cost(i, j) + cost(i, j2);
          if (cand < dist[j2] - 1e-15) {
            dist[j2] = cand;
            from_left[j2] = i;
            changed = true;
          }
        }
      }
    }
    int best = -1;
    for (int j = 0; j < n_right; ++j) {
      if (match_right[j] != -1 || dist[j] == inf) continue;
      if (best == -1 || dist[j] < dist[best]) best = j;
    }
    if (best == -1) break;
    total += dist[best];
    // Walk the alternating path backwards, flipping assignments.
    int j = best;
    while (j != -1) {
      const int i = from_left[j];
      const int prev_j = match_left[i];
      match_left[i] = j;
      match_right[j] = i;
      j = prev_j;
    }
    totals.push_back(total);
  }
  return totals;
}

// Fixed-effect meta arithmetic on (beta, sigma2) pairs.
struct MetaHand {
  double beta_bar = 0.0;
  double q = 0.0;
  double tau2 = 0.0;
};

inline MetaHand meta_mom(const std::vector<double>& beta, const std::vector<double>& sigma2,
                         double k_effective) {
  double sw = 0.0, swb = 0.0, sw2 = 0.0;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    const double w = 1.0 / sigma2[i];
    sw += w;
    swb += w * beta[i];
    sw2 += w * w;
  }
  MetaHand out;
  out.beta_bar = swb / sw;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    const double d = beta[i] - out.beta_bar;
    out.q += d * d / sigma2[i];
  }
  const double denom = sw - sw2 / sw;
  out.tau2 = std::max(0.0, (out.q - (k_effective - 1.0)) / denom);
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (const double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Rank vector with ties broken by index, smallest value gets rank 0.
inline std::vector<std::size_t> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] < v[b];
    return a < b;
  });
  std::vector<std::size_t> r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = i;
  return r;
}

}  // namespace oracle
