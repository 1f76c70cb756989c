#include "wsc/matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "wsc/errors.hpp"
#include "wsc/rng.hpp"

namespace wsc {

TrimResult trim_common_support(const std::vector<double>& treated_logits,
                               const std::vector<double>& pool_logits) {
  if (treated_logits.empty()) throw ArgumentError("common-support trim: no treated units");
  TrimResult out;
  out.logit_min = *std::min_element(treated_logits.begin(), treated_logits.end());
  out.logit_max = *std::max_element(treated_logits.begin(), treated_logits.end());
  for (std::size_t i = 0; i < pool_logits.size(); ++i) {
    if (pool_logits[i] >= out.logit_min && pool_logits[i] <= out.logit_max) out.kept.push_back(i);
    else ++out.dropped;
  }
  if (out.kept.empty()) {
    std::ostringstream os;
    os << "no pool units inside the treated support [" << out.logit_min << ", " << out.logit_max
       << "]; all " << pool_logits.size() << " dropped";
    throw NoOverlapError(os.str());
  }
  return out;
}

double caliper_from_logits(const std::vector<double>& trimmed_pool_logits, double factor) {
  if (factor <= 0.0) throw ArgumentError("caliper factor must be positive");
  if (trimmed_pool_logits.size() < 2)
    throw NumericError("caliper width undefined: fewer than two pool units after trimming");
  double mean = 0.0;
  for (const double v : trimmed_pool_logits) mean += v;
  mean /= static_cast<double>(trimmed_pool_logits.size());
  double ss = 0.0;
  for (const double v : trimmed_pool_logits) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(trimmed_pool_logits.size() - 1));
  if (!(sd > 0.0))
    throw NumericError("caliper width undefined: zero logit spread over the trimmed pool");
  return factor * sd;
}

Eigen::MatrixXd pool_covariance_inverse(const Eigen::MatrixXd& pool_features, double ridge) {
  const Eigen::Index n = pool_features.rows();
  const Eigen::Index p = pool_features.cols();
  if (n < 2) throw ArgumentError("pool covariance needs at least two rows");
  const Eigen::RowVectorXd mean = pool_features.colwise().mean();
  const Eigen::MatrixXd centered = pool_features.rowwise() - mean;
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    std::ostringstream os;
    os << "pool covariance not positive definite after ridge " << ridge
       << "; smallest eigenvalue " << es.eigenvalues().minCoeff();
    throw NumericError(os.str());
  }
  return llt.solve(Eigen::MatrixXd::Identity(p, p));
}

double mahalanobis_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                            const Eigen::MatrixXd& cov_inverse) {
  const Eigen::VectorXd d = a - b;
  return std::sqrt(std::max(0.0, d.dot(cov_inverse * d)));
}

MatchedSample match_one_to_one(const MatchInput& treated, const MatchInput& pool,
                               const Eigen::MatrixXd& cov_inverse, double caliper_width,
                               std::uint64_t order_seed, std::uint64_t order_unit, bool strict) {
  const std::size_t n_t = treated.ids.size();
  const std::size_t n_p = pool.ids.size();
  if (n_t == 0) throw ArgumentError("matching: no treated units");
  if (treated.logits.size() != n_t ||
      static_cast<std::size_t>(treated.features.rows()) != n_t ||
      pool.logits.size() != n_p || static_cast<std::size_t>(pool.features.rows()) != n_p)
    throw ArgumentError("matching: inputs are not index-aligned");
  if (!(caliper_width > 0.0)) throw ArgumentError("matching: caliper width must be positive");

  MatchedSample out;
  out.caliper_width = caliper_width;
  out.order_seed = order_seed;
  out.order_unit = order_unit;
  out.trimmed_pool_ids = pool.ids;

  // Pool index sorted by logit for caliper range lookups.
  std::vector<std::size_t> by_logit(n_p);
  std::iota(by_logit.begin(), by_logit.end(), 0);
  std::sort(by_logit.begin(), by_logit.end(), [&](std::size_t a, std::size_t b) {
    if (pool.logits[a] != pool.logits[b]) return pool.logits[a] < pool.logits[b];
    return pool.ids[a] < pool.ids[b];
  });
  std::vector<double> sorted_logits(n_p);
  for (std::size_t i = 0; i < n_p; ++i) sorted_logits[i] = pool.logits[by_logit[i]];

  rng::Substream order_stream(order_seed, rng::Tag::match_order, order_unit);
  const std::vector<std::size_t> order = order_stream.sample_without_replacement(n_t, n_t);

  std::vector<char> taken(n_p, 0);
  for (const std::size_t t : order) {
    const double center = treated.logits[t];
    const auto lo = std::lower_bound(sorted_logits.begin(), sorted_logits.end(),
                                     center - caliper_width);
    const auto hi = std::upper_bound(sorted_logits.begin(), sorted_logits.end(),
                                     center + caliper_width);
    std::size_t candidates = 0;
    std::size_t best = n_p;
    double best_dist = 0.0;
    for (auto it = lo; it != hi; ++it) {
      const std::size_t j = by_logit[static_cast<std::size_t>(it - sorted_logits.begin())];
      if (taken[j]) continue;
      ++candidates;
      const double dist = mahalanobis_distance(treated.features.row(t).transpose(),
                                               pool.features.row(j).transpose(), cov_inverse);
      if (best == n_p || dist < best_dist ||
          (dist == best_dist && pool.ids[j] < pool.ids[best])) {
        best = j;
        best_dist = dist;
      }
    }
    if (best == n_p) {
      out.unmatched.push_back({treated.ids[t], candidates});
    } else {
      taken[best] = 1;
      out.pairs.push_back({treated.ids[t], pool.ids[best], best_dist,
                           std::abs(center - pool.logits[best])});
    }
  }

  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const MatchedPair& a, const MatchedPair& b) { return a.treated_id < b.treated_id; });
  std::sort(out.unmatched.begin(), out.unmatched.end(),
            [](const UnmatchedUnit& a, const UnmatchedUnit& b) { return a.treated_id < b.treated_id; });

  if (strict && !out.unmatched.empty()) {
    std::ostringstream os;
    os << out.unmatched.size() << " treated unit(s) unmatched under strict matching:";
    for (const UnmatchedUnit& u : out.unmatched)
      os << ' ' << u.treated_id << " (free candidates in caliper: " << u.candidates_in_caliper
         << ')';
    throw MatchingError(os.str());
  }
  return out;
}

}  // namespace wsc
