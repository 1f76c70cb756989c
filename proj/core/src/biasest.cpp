#include "wsc/biasest.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "wsc/errors.hpp"
#include "wsc/linalg.hpp"
#include "wsc/mlm.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t outcome_index(Outcome outcome) { return static_cast<std::size_t>(outcome); }

}  // namespace

double pooled_outcome_sd(const PopulationSnapshot& pop, Outcome outcome) {
  const std::size_t k = outcome_index(outcome);
  if (pop.students.size() < 2) throw ArgumentError("pooled outcome SD needs at least two students");
  double mean = 0.0;
  for (const StudentUnit& s : pop.students) mean += s.outcomes[k];
  mean /= static_cast<double>(pop.students.size());
  double ss = 0.0;
  for (const StudentUnit& s : pop.students) {
    const double d = s.outcomes[k] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(pop.students.size() - 1));
  if (!(sd > 0.0)) throw NumericError("pooled outcome SD is zero");
  return sd;
}

BiasEstimate naive_bias(const PopulationSnapshot& pop, const std::string& intervention_id,
                        const std::vector<std::string>& trial_control_ids, Outcome outcome) {
  if (trial_control_ids.empty()) throw ArgumentError("naive bias: no trial-control schools");
  const std::size_t k = outcome_index(outcome);
  const auto& index = pop.school_index_map();

  double ct_sum = 0.0;
  std::size_t ct_n = 0;
  for (const std::string& id : trial_control_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw ArgumentError("naive bias: unknown school " + id);
    const SchoolUnit& school = pop.schools[it->second];
    for (std::uint32_t s = 0; s < school.n_students; ++s)
      ct_sum += pop.students[school.first_student + s].outcomes[k];
    ct_n += school.n_students;
  }

  double pool_sum = 0.0;
  std::size_t pool_n = 0;
  std::size_t pool_schools = 0;
  for (const SchoolUnit& school : pop.schools) {
    if (school.selected) continue;
    ++pool_schools;
    for (std::uint32_t s = 0; s < school.n_students; ++s)
      pool_sum += pop.students[school.first_student + s].outcomes[k];
    pool_n += school.n_students;
  }
  if (ct_n == 0 || pool_n == 0)
    throw ArgumentError("naive bias: a comparison group has no students");

  BiasEstimate est;
  est.intervention_id = intervention_id;
  est.outcome = outcome;
  est.kind = "naive";
  est.value = (ct_sum / static_cast<double>(ct_n) - pool_sum / static_cast<double>(pool_n)) /
              pooled_outcome_sd(pop, outcome);
  est.se = kNaN;
  est.n_treated_schools = trial_control_ids.size();
  est.n_control_schools = pool_schools;
  est.n_students = ct_n + pool_n;
  return est;
}

OutcomeSums build_outcome_sums(const PopulationSnapshot& pop) {
  OutcomeSums sums;
  sums.school_sum.assign(pop.schools.size(), {});
  sums.school_count.assign(pop.schools.size(), 0);
  for (std::size_t j = 0; j < pop.schools.size(); ++j) {
    const SchoolUnit& school = pop.schools[j];
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      const StudentUnit& student = pop.students[school.first_student + s];
      for (int k = 0; k < kNumOutcomes; ++k)
        sums.school_sum[j][static_cast<std::size_t>(k)] +=
            student.outcomes[static_cast<std::size_t>(k)];
    }
    sums.school_count[j] = school.n_students;
    if (!school.selected) {
      for (int k = 0; k < kNumOutcomes; ++k)
        sums.pool_sum[static_cast<std::size_t>(k)] += sums.school_sum[j][static_cast<std::size_t>(k)];
      sums.pool_students += school.n_students;
      ++sums.pool_schools;
    }
  }
  for (int k = 0; k < kNumOutcomes; ++k)
    sums.pooled_sd[static_cast<std::size_t>(k)] = pooled_outcome_sd(pop, static_cast<Outcome>(k));
  return sums;
}

BiasEstimate naive_bias(const PopulationSnapshot& pop, const OutcomeSums& sums,
                        const std::string& intervention_id,
                        const std::vector<std::string>& trial_control_ids, Outcome outcome) {
  if (trial_control_ids.empty()) throw ArgumentError("naive bias: no trial-control schools");
  const std::size_t k = outcome_index(outcome);
  const auto& index = pop.school_index_map();

  double ct_sum = 0.0;
  std::size_t ct_n = 0;
  for (const std::string& id : trial_control_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw ArgumentError("naive bias: unknown school " + id);
    ct_sum += sums.school_sum[it->second][k];
    ct_n += sums.school_count[it->second];
  }
  if (ct_n == 0 || sums.pool_students == 0)
    throw ArgumentError("naive bias: a comparison group has no students");

  BiasEstimate est;
  est.intervention_id = intervention_id;
  est.outcome = outcome;
  est.kind = "naive";
  est.value = (ct_sum / static_cast<double>(ct_n) -
               sums.pool_sum[k] / static_cast<double>(sums.pool_students)) /
              sums.pooled_sd[k];
  est.se = kNaN;
  est.n_treated_schools = trial_control_ids.size();
  est.n_control_schools = sums.pool_schools;
  est.n_students = ct_n + sums.pool_students;
  return est;
}

std::pair<BiasEstimate, AdjustedFit> matched_bias(
    const PopulationSnapshot& pop, const DesignMatrix& design, const StudentDesignInfo& student_info,
    const MatchedSample& matched, const std::string& intervention_id, Outcome outcome) {
  if (matched.pairs.empty()) throw ArgumentError("matched bias: no matched pairs");
  const std::size_t k = outcome_index(outcome);
  const auto& index = pop.school_index_map();
  const double sd = pooled_outcome_sd(pop, outcome);

  // One cluster per school: treated first, then controls, in pair order.
  struct SchoolRef {
    std::size_t pop_index;
    std::size_t design_row;
    bool treated;
  };
  std::vector<SchoolRef> schools;
  schools.reserve(matched.pairs.size() * 2);
  std::size_t n_rows = 0;
  for (const bool treated_side : {true, false}) {
    for (const MatchedPair& pair : matched.pairs) {
      const std::string& id = treated_side ? pair.treated_id : pair.control_id;
      const auto it = index.find(id);
      if (it == index.end()) throw ArgumentError("matched bias: unknown school " + id);
      schools.push_back({it->second, design.row_index(id), treated_side});
      n_rows += pop.schools[it->second].n_students;
    }
  }

  const std::size_t n_school_cov = design.columns.size();
  const std::size_t p = 2 + kNumStudentCovariates + n_school_cov;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(p));
  Eigen::VectorXd y(static_cast<Eigen::Index>(n_rows));
  std::vector<std::size_t> cluster(n_rows);

  Eigen::Index row = 0;
  for (std::size_t g = 0; g < schools.size(); ++g) {
    const SchoolRef& ref = schools[g];
    const SchoolUnit& school = pop.schools[ref.pop_index];
    const std::vector<double>& school_features = design.rows[ref.design_row].features;
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      const StudentUnit& student = pop.students[school.first_student + s];
      Eigen::Index c = 0;
      x(row, c++) = 1.0;
      x(row, c++) = ref.treated ? 1.0 : 0.0;
      for (std::size_t sc = 0; sc < kNumStudentCovariates; ++sc)
        x(row, c++) = student_feature(student_info, student, sc);
      for (std::size_t cc = 0; cc < n_school_cov; ++cc) x(row, c++) = school_features[cc];
      y(row) = student.outcomes[k] / sd;
      cluster[static_cast<std::size_t>(row)] = g;
      ++row;
    }
  }
  if (row == 0) throw ArgumentError("matched bias: matched schools have no students");
  if (static_cast<std::size_t>(row) != n_rows) throw NumericError("matched bias: row count drifted");

  // Drop aliased covariate columns; the intercept and group indicator lead
  // the order so they survive pruning.
  Eigen::MatrixXd gram_lower = Eigen::MatrixXd::Zero(x.cols(), x.cols());
  gram_lower.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
  Eigen::MatrixXd gram = gram_lower.selfadjointView<Eigen::Lower>();
  {
    const double n = static_cast<double>(x.rows());
    const Eigen::VectorXd colsum = x.colwise().sum();
    gram -= (colsum * colsum.transpose()) / n;
    gram(0, 0) = n;
  }
  const std::vector<std::size_t> kept = greedy_rank_prune(gram);
  if (kept.size() < 2 || kept[0] != 0 || kept[1] != 1)
    throw NumericError("matched bias: group indicator is aliased with the covariates");
  Eigen::MatrixXd xk(x.rows(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t c = 0; c < kept.size(); ++c)
    xk.col(static_cast<Eigen::Index>(c)) = x.col(static_cast<Eigen::Index>(kept[c]));

  const MlmData data = MlmData::build(xk, y, cluster);
  const MlmFitResult fit = fit_random_intercept(data);

  AdjustedFit adj;
  adj.beta = fit.beta(1);
  adj.se = fit.se(1);
  adj.sigma2_school = fit.sigma2_cluster;
  adj.sigma2_resid = fit.sigma2_resid;
  adj.converged = fit.converged;
  adj.evaluations = fit.evaluations;
  adj.n_schools = schools.size();
  adj.n_students = n_rows;

  BiasEstimate est;
  est.intervention_id = intervention_id;
  est.outcome = outcome;
  est.kind = "match";
  est.value = adj.beta;
  est.se = adj.se;
  est.n_treated_schools = matched.pairs.size();
  est.n_control_schools = matched.pairs.size();
  est.n_students = n_rows;
  return {est, adj};
}

BiasDecomposition decompose_bias(const BiasEstimate& naive, const BiasEstimate& matched) {
  if (naive.kind != "naive" || matched.kind != "match")
    throw ArgumentError("bias decomposition: estimates have the wrong kinds");
  if (naive.intervention_id != matched.intervention_id || naive.outcome != matched.outcome)
    throw ArgumentError("bias decomposition: estimates are for different cells");
  BiasDecomposition d;
  d.naive = naive.value;
  d.matched = matched.value;
  d.delta_u = matched.value;
  d.delta_x = naive.value - matched.value;
  return d;
}

}  // namespace wsc
