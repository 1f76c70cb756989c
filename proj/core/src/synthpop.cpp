#include "wsc/synthpop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"
#include "wsc/parallel.hpp"
#include "wsc/rng.hpp"

namespace wsc {

namespace {

using rng::Substream;
using rng::Tag;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Latent factor structure: f_ach drives attainment, f_dep deprivation.
constexpr double kFactorCorr = -0.45;

// Outcome equation. Both coefficients act on true covariate values; the
// remaining variance is split between a school effect and student noise so
// that the total theoretical variance is 1 (effect-size scale).
constexpr double kGammaGrade2 = 0.5;
constexpr double kGammaFsm = -0.12;
constexpr double kGrade2Loading = 0.5;  // between-school share of grade2 is its square
constexpr double kFsmIntercept = -1.5;
constexpr double kFsmLoading = 0.8;
// Share of the school effect (and of student noise) common to all outcomes.
constexpr double kSchoolEffectShare = 0.6;
constexpr double kStudentNoiseShare = 0.5;

constexpr double kHiddenSelectionWeight = 1.0;

// History model, centered so the leading coefficient is the level at -1.
constexpr double kHistoryLevelLoading = 0.45;
constexpr double kHistoryLevelNoise = 0.12;
constexpr double kHistoryTrendMean = 0.01;
constexpr double kHistoryTrendSd = 0.02;
constexpr double kHistoryQuadSd = 0.004;
constexpr double kHistoryYearNoise = 0.05;
constexpr double kShareIntercept = 0.72;
constexpr double kShareSlope = 0.45;
constexpr double kShareNoise = 0.03;

// School covariate indices into SchoolUnit::covariates.
enum SchoolCov : std::size_t {
  kSize = 0,
  kOfsted = 1,
  kIncome = 2,
  kOutsideBudget = 3,
  kTaPercent = 4,
  kPtr = 5,
  kVoluntary = 6,
  kAcademySponsor = 7,
  kAcademyConverter = 8,
  kCrime = 9,
  kHousing = 10,
  kIdaci = 11,
};

// Student covariate indices.
enum StudentCov : std::size_t {
  kGrade2 = 0,
  kAgeMonths = 1,
  kGender = 2,
  kFsm = 3,
  kSmallMetro = 4,
  kRural = 5,
  kVeryRural = 6,
};

constexpr std::array<std::size_t, 8> kMissableSchoolCovs = {
    kOfsted, kIncome, kOutsideBudget, kTaPercent, kPtr, kCrime, kHousing, kIdaci};
constexpr std::array<std::size_t, 3> kMissableStudentCovs = {kGrade2, kAgeMonths, kFsm};

double invlogit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Moments of the school free-school-meals rate p(f) = invlogit(a + b f),
// f standard normal, by Simpson quadrature.
struct FsmMoments {
  double mean = 0.0;
  double between_var = 0.0;   // Var_j(p_j)
  double within_mean = 0.0;   // E_j[p_j (1 - p_j)]
};

FsmMoments fsm_moments() {
  const double lo = -8.0, hi = 8.0;
  const int n = 4096;  // even
  const double h = (hi - lo) / n;
  double m0 = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + h * i;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
    const double p = invlogit(kFsmIntercept + kFsmLoading * x);
    m0 += w * phi;
    m1 += w * phi * p;
    m2 += w * phi * p * p;
  }
  m0 *= h / 3.0;
  m1 *= h / 3.0;
  m2 *= h / 3.0;
  FsmMoments out;
  out.mean = m1 / m0;
  out.between_var = m2 / m0 - out.mean * out.mean;
  out.within_mean = out.mean - m2 / m0;
  return out;
}

struct VarianceComponents {
  double sigma_alpha2 = 0.0;
  double sigma_eps2 = 0.0;
};

VarianceComponents derive_variance_components(double icc) {
  static const FsmMoments fsm = fsm_moments();
  const double between_cov = kGammaGrade2 * kGammaGrade2 * kGrade2Loading * kGrade2Loading +
                             kGammaFsm * kGammaFsm * fsm.between_var;
  const double within_cov =
      kGammaGrade2 * kGammaGrade2 * (1.0 - kGrade2Loading * kGrade2Loading) +
      kGammaFsm * kGammaFsm * fsm.within_mean;
  VarianceComponents vc;
  vc.sigma_alpha2 = icc - between_cov;
  vc.sigma_eps2 = 1.0 - icc - within_cov;
  if (vc.sigma_alpha2 < 1e-9) {
    std::ostringstream os;
    os << "outcome_icc: must be at least " << between_cov + 1e-9
       << " to leave room for the school-level covariate signal";
    throw ConfigError(os.str());
  }
  if (vc.sigma_eps2 < 1e-9) {
    std::ostringstream os;
    os << "outcome_icc: must be below " << 1.0 - within_cov
       << " to leave room for student-level noise";
    throw ConfigError(os.str());
  }
  return vc;
}

std::string school_id_for(std::size_t index) {
  char buffer[16];
  std::snprintf(buffer, sizeof(buffer), "S%06zu", index + 1);
  return buffer;
}

std::string student_id_for(std::size_t index) {
  char buffer[16];
  std::snprintf(buffer, sizeof(buffer), "P%08zu", index + 1);
  return buffer;
}

// Per-school scratch produced by the parallel phases.
struct SchoolScratch {
  double f_ach = 0.0;
  double f_dep = 0.0;
  int rurality = 0;  // 0 metro, 1 small metro, 2 rural, 3 very rural
  std::uint8_t school_miss_mask = 0;
  double sum_grade2_true = 0.0;
  double sum_fsm_true = 0.0;
  std::array<double, kNumOutcomes> sum_noise{};
};

}  // namespace

Outcome outcome_from_name(const std::string& name) {
  for (int k = 0; k < kNumOutcomes; ++k) {
    if (name == kOutcomeNames[static_cast<std::size_t>(k)]) return static_cast<Outcome>(k);
  }
  throw ArgumentError("unknown outcome name: " + name);
}

void ScenarioConfig::validate() const {
  if (n_schools < 2) throw ConfigError("n_schools: must be at least 2");
  if (!(students_per_school_mean >= 2.0))
    throw ConfigError("students_per_school_mean: must be at least 2");
  if (!(students_per_school_dispersion > 0.0))
    throw ConfigError("students_per_school_dispersion: must be positive");
  if (n_trial_controls < 1) throw ConfigError("n_trial_controls: must be at least 1");
  if (n_trial_controls >= n_schools)
    throw ConfigError("n_trial_controls: must be smaller than n_schools");
  if (!(outcome_icc >= 0.0 && outcome_icc < 1.0))
    throw ConfigError("outcome_icc: must lie in [0, 1)");
  derive_variance_components(outcome_icc);  // narrower feasible range, throws with bounds
  if (selection_coefficients.size() > kSelectionCovariateNames.size())
    throw ConfigError("selection_coefficients: at most 6 entries (one per selection covariate)");
  for (const double c : selection_coefficients) {
    if (!std::isfinite(c)) throw ConfigError("selection_coefficients: entries must be finite");
  }
  if (!std::isfinite(hidden_confounder_strength))
    throw ConfigError("hidden_confounder_strength: must be finite");
  if (n_outcomes != kNumOutcomes) throw ConfigError("n_outcomes: fixed at 3");
  if (!(missingness_rate >= 0.0 && missingness_rate <= 0.1))
    throw ConfigError("missingness_rate: must lie in [0, 0.1]");
  if (!(selection_base_rate > 0.0 && selection_base_rate < 1.0))
    throw ConfigError("selection_base_rate: must lie in (0, 1)");
  if (history_years < 1 || history_years > kMaxHistoryYears)
    throw ConfigError("history_years: must lie in [1, 5]");
}

namespace {

using nlohmann::ordered_json;

ordered_json config_to_json_object(const ScenarioConfig& c) {
  ordered_json j;
  j["n_schools"] = c.n_schools;
  j["students_per_school_mean"] = c.students_per_school_mean;
  j["students_per_school_dispersion"] = c.students_per_school_dispersion;
  j["n_trial_controls"] = c.n_trial_controls;
  j["outcome_icc"] = c.outcome_icc;
  j["selection_coefficients"] = c.selection_coefficients;
  j["hidden_confounder_strength"] = c.hidden_confounder_strength;
  j["n_outcomes"] = c.n_outcomes;
  j["missingness_rate"] = c.missingness_rate;
  j["rng_seed"] = c.rng_seed;
  j["selection_base_rate"] = c.selection_base_rate;
  j["history_years"] = c.history_years;
  return j;
}

ScenarioConfig config_from_json_object(const ordered_json& j) {
  ScenarioConfig c;
  try {
    c.n_schools = j.at("n_schools").get<int>();
    c.students_per_school_mean = j.value("students_per_school_mean", c.students_per_school_mean);
    c.students_per_school_dispersion =
        j.value("students_per_school_dispersion", c.students_per_school_dispersion);
    c.n_trial_controls = j.at("n_trial_controls").get<int>();
    c.outcome_icc = j.value("outcome_icc", c.outcome_icc);
    c.selection_coefficients = j.at("selection_coefficients").get<std::vector<double>>();
    c.hidden_confounder_strength =
        j.value("hidden_confounder_strength", c.hidden_confounder_strength);
    c.n_outcomes = j.value("n_outcomes", c.n_outcomes);
    c.missingness_rate = j.value("missingness_rate", c.missingness_rate);
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    c.selection_base_rate = j.value("selection_base_rate", c.selection_base_rate);
    c.history_years = j.value("history_years", c.history_years);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("scenario config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

std::string ScenarioConfig::to_json() const {
  return config_to_json_object(*this).dump(2);
}

ScenarioConfig ScenarioConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("scenario config parse: ") + e.what());
  }
  return config_from_json_object(j);
}

std::size_t PopulationSnapshot::school_index(const std::string& school_id) const {
  const auto& map = school_index_map();
  const auto it = map.find(school_id);
  if (it == map.end()) throw ArgumentError("unknown school_id: " + school_id);
  return it->second;
}

const std::unordered_map<std::string, std::size_t>& PopulationSnapshot::school_index_map() const {
  if (index_cache_.size() != schools.size()) {
    index_cache_.clear();
    index_cache_.reserve(schools.size());
    for (std::size_t i = 0; i < schools.size(); ++i) index_cache_[schools[i].school_id] = i;
  }
  return index_cache_;
}

PopulationSnapshot generate_population(const ScenarioConfig& config, int threads) {
  config.validate();
  const VarianceComponents vc = derive_variance_components(config.outcome_icc);
  const double sigma_alpha = std::sqrt(vc.sigma_alpha2);
  const double sigma_eps = std::sqrt(vc.sigma_eps2);
  const double grade2_within_sd = std::sqrt(1.0 - kGrade2Loading * kGrade2Loading);
  const std::size_t n_schools = static_cast<std::size_t>(config.n_schools);
  const std::uint64_t seed = config.rng_seed;

  PopulationSnapshot pop;
  pop.config = config;
  pop.schools.resize(n_schools);
  std::vector<SchoolScratch> scratch(n_schools);

  // Phase 1: school-level draws, independent per school.
  parallel_for(n_schools, threads, [&](std::size_t j) {
    SchoolUnit& school = pop.schools[j];
    SchoolScratch& sc = scratch[j];
    school.school_id = school_id_for(j);
    Substream rs(seed, Tag::school, j);

    const double z1 = rs.next_normal();
    const double z2 = rs.next_normal();
    sc.f_ach = z1;
    sc.f_dep = kFactorCorr * z1 + std::sqrt(1.0 - kFactorCorr * kFactorCorr) * z2;

    const double disp = config.students_per_school_dispersion;
    const double rate = rs.next_gamma(disp) * (config.students_per_school_mean / disp);
    std::int64_t cohort = rs.next_poisson(rate);
    cohort = std::clamp<std::int64_t>(cohort, 2, 2000);
    school.n_students = static_cast<std::uint32_t>(cohort);

    auto& cov = school.covariates;
    const double size_noise = rs.next_normal();
    cov[kSize] = std::max(20.0, std::round(7.0 * static_cast<double>(cohort) *
                                           std::exp(0.08 * size_noise)));

    // Ofsted: 1 is the best rating, driven down by achievement.
    const double ofsted_latent = -0.8 * sc.f_ach + 0.6 * rs.next_normal();
    if (ofsted_latent < -0.915) cov[kOfsted] = 1.0;
    else if (ofsted_latent < 0.524) cov[kOfsted] = 2.0;
    else if (ofsted_latent < 1.405) cov[kOfsted] = 3.0;
    else cov[kOfsted] = 4.0;

    cov[kIncome] = std::exp(8.45 + 0.12 * sc.f_dep + 0.10 * rs.next_normal());
    const double outside_zero = rs.next_double();
    const double outside_noise = rs.next_normal();
    cov[kOutsideBudget] =
        outside_zero < 0.05 ? 0.0 : std::exp(6.0 + 0.25 * sc.f_dep + 0.6 * outside_noise);
    cov[kTaPercent] = std::clamp(0.24 + 0.04 * sc.f_dep + 0.07 * rs.next_normal(), 0.02, 0.60);
    cov[kPtr] = std::clamp(
        20.5 + 0.02 * (static_cast<double>(cohort) - 40.0) + 1.8 * rs.next_normal(), 10.0, 35.0);

    const double governance = rs.next_double();
    cov[kVoluntary] = (governance >= 0.55 && governance < 0.80) ? 1.0 : 0.0;
    cov[kAcademySponsor] = (governance >= 0.80 && governance < 0.88) ? 1.0 : 0.0;
    cov[kAcademyConverter] = governance >= 0.88 ? 1.0 : 0.0;

    cov[kCrime] = 0.6 * sc.f_dep + 0.8 * rs.next_normal();
    cov[kHousing] = 0.3 * sc.f_dep + 0.954 * rs.next_normal();
    cov[kIdaci] = 0.8 * sc.f_dep + 0.6 * rs.next_normal();

    const double rurality_latent = -0.5 * sc.f_dep + 0.866 * rs.next_normal();
    if (rurality_latent < 0.1257) sc.rurality = 0;
    else if (rurality_latent < 0.6745) sc.rurality = 1;
    else if (rurality_latent < 1.2816) sc.rurality = 2;
    else sc.rurality = 3;

    // History: most schools carry the full window, a few are short.
    const double history_u = rs.next_double();
    int years = config.history_years;
    if (history_u < 0.02) years = 1;
    else if (history_u < 0.05) years = std::min(2, config.history_years);
    const double level = kHistoryLevelLoading * sc.f_ach + kHistoryLevelNoise * rs.next_normal();
    const double trend = kHistoryTrendMean + kHistoryTrendSd * rs.next_normal();
    const double quad = kHistoryQuadSd * rs.next_normal();
    school.history.reserve(static_cast<std::size_t>(years));
    for (int offset = -years; offset <= -1; ++offset) {
      const double t = static_cast<double>(offset + 1);
      const double curve = level + trend * t + quad * t * t;
      YearRecord record;
      record.offset = offset;
      record.mean_score = curve + kHistoryYearNoise * rs.next_normal();
      record.grade_share = std::clamp(
          kShareIntercept + kShareSlope * curve + kShareNoise * rs.next_normal(), 0.02, 0.98);
      school.history.push_back(record);
    }

    school.hidden_u = rs.next_normal();

    if (config.missingness_rate > 0.0) {
      for (std::size_t b = 0; b < kMissableSchoolCovs.size(); ++b) {
        if (rs.next_double() < config.missingness_rate)
          sc.school_miss_mask |= static_cast<std::uint8_t>(1u << b);
      }
    }
  });

  // Student spans and ids.
  std::size_t total_students = 0;
  for (auto& school : pop.schools) {
    school.first_student = static_cast<std::uint32_t>(total_students);
    total_students += school.n_students;
  }
  pop.students.resize(total_students);
  std::vector<std::uint8_t> student_miss(total_students, 0);

  // Phase 2: student covariates (true values) and per-school sums.
  parallel_for(n_schools, threads, [&](std::size_t j) {
    SchoolUnit& school = pop.schools[j];
    SchoolScratch& sc = scratch[j];
    Substream rs(seed, Tag::student, j);
    const double fsm_p = invlogit(kFsmIntercept + kFsmLoading * sc.f_dep);
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      const std::size_t idx = school.first_student + s;
      StudentUnit& student = pop.students[idx];
      student.student_id = student_id_for(idx);
      student.school_index = static_cast<std::uint32_t>(j);
      auto& cov = student.covariates;
      cov[kGrade2] = kGrade2Loading * sc.f_ach + grade2_within_sd * rs.next_normal();
      cov[kAgeMonths] = 126.0 + static_cast<double>(rs.next_below(12));
      cov[kGender] = rs.next_double() < 0.5 ? 0.0 : 1.0;
      cov[kFsm] = rs.next_double() < fsm_p ? 1.0 : 0.0;
      cov[kSmallMetro] = sc.rurality == 1 ? 1.0 : 0.0;
      cov[kRural] = sc.rurality == 2 ? 1.0 : 0.0;
      cov[kVeryRural] = sc.rurality == 3 ? 1.0 : 0.0;
      sc.sum_grade2_true += cov[kGrade2];
      sc.sum_fsm_true += cov[kFsm];
      if (config.missingness_rate > 0.0) {
        std::uint8_t mask = 0;
        for (std::size_t b = 0; b < kMissableStudentCovs.size(); ++b) {
          if (rs.next_double() < config.missingness_rate)
            mask |= static_cast<std::uint8_t>(1u << b);
        }
        student_miss[idx] = mask;
      }
    }
  });

  // Selection: logistic in six standardized observed school covariates plus
  // the latent driver U. The intercept is solved so the mean selection
  // probability over the realized population equals selection_base_rate.
  std::vector<double> sel_lp(n_schools, 0.0);
  {
    std::array<double, 6> mean{};
    std::array<double, 6> m2{};
    std::vector<std::array<double, 6>> design(n_schools);
    for (std::size_t j = 0; j < n_schools; ++j) {
      const SchoolUnit& school = pop.schools[j];
      const SchoolScratch& sc = scratch[j];
      const double n = static_cast<double>(school.n_students);
      const double prior = school.history.back().mean_score;  // offset -1
      design[j] = {sc.sum_grade2_true / n, sc.sum_fsm_true / n,     prior,
                   std::log1p(school.covariates[kIncome]), school.covariates[kIdaci],
                   school.covariates[kOfsted]};
      for (std::size_t m = 0; m < 6; ++m) {
        const double delta = design[j][m] - mean[m];
        mean[m] += delta / static_cast<double>(j + 1);
        m2[m] += delta * (design[j][m] - mean[m]);
      }
    }
    std::array<double, 6> sd{};
    for (std::size_t m = 0; m < 6; ++m) {
      sd[m] = n_schools > 1 ? std::sqrt(m2[m] / static_cast<double>(n_schools - 1)) : 0.0;
      if (sd[m] <= 0.0) sd[m] = 1.0;
    }
    std::array<double, 6> coef{};
    for (std::size_t m = 0; m < config.selection_coefficients.size(); ++m)
      coef[m] = config.selection_coefficients[m];
    for (std::size_t j = 0; j < n_schools; ++j) {
      double lp = kHiddenSelectionWeight * pop.schools[j].hidden_u;
      for (std::size_t m = 0; m < 6; ++m) lp += coef[m] * (design[j][m] - mean[m]) / sd[m];
      sel_lp[j] = lp;
    }
    double lo = -30.0, hi = 30.0;
    for (int iter = 0; iter < 100; ++iter) {
      const double b0 = 0.5 * (lo + hi);
      double rate = 0.0;
      for (std::size_t j = 0; j < n_schools; ++j) rate += invlogit(b0 + sel_lp[j]);
      rate /= static_cast<double>(n_schools);
      if (rate < config.selection_base_rate) lo = b0;
      else hi = b0;
    }
    pop.generative.selection_intercept = 0.5 * (lo + hi);
  }

  std::size_t n_selected = 0;
  std::size_t n_selected_untreated = 0;
  for (std::size_t j = 0; j < n_schools; ++j) {
    SchoolUnit& school = pop.schools[j];
    Substream rs(seed, Tag::selection, j);
    const double p = invlogit(pop.generative.selection_intercept + sel_lp[j]);
    school.selected = rs.next_double() < p;
    if (school.selected) {
      school.treated = rs.next_double() < 0.5;
      ++n_selected;
      if (!school.treated) ++n_selected_untreated;
    }
  }
  if (n_selected < static_cast<std::size_t>(config.n_trial_controls) ||
      n_selected_untreated < static_cast<std::size_t>(config.n_trial_controls)) {
    std::ostringstream os;
    os << "selection produced " << n_selected << " selected schools (" << n_selected_untreated
       << " untreated) but n_trial_controls = " << config.n_trial_controls
       << "; increase n_schools or selection_base_rate";
    throw ConfigError(os.str());
  }

  // Phase 3: outcomes. Y = covariate signal + shift for selected schools +
  // school effect + student noise. Noise sums are kept per school so the
  // group means can be removed afterwards.
  const double shift = config.hidden_confounder_strength;
  parallel_for(n_schools, threads, [&](std::size_t j) {
    SchoolUnit& school = pop.schools[j];
    SchoolScratch& sc = scratch[j];
    Substream rs(seed, Tag::outcome, j);
    const double shared_school = std::sqrt(kSchoolEffectShare);
    const double own_school = std::sqrt(1.0 - kSchoolEffectShare);
    const double shared_student = std::sqrt(kStudentNoiseShare);
    const double own_student = std::sqrt(1.0 - kStudentNoiseShare);
    const double a_school = rs.next_normal();
    std::array<double, kNumOutcomes> alpha{};
    for (int k = 0; k < kNumOutcomes; ++k) {
      alpha[static_cast<std::size_t>(k)] =
          sigma_alpha * (shared_school * a_school + own_school * rs.next_normal());
    }
    const double base = school.selected ? shift : 0.0;
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      StudentUnit& student = pop.students[school.first_student + s];
      const double ability = rs.next_normal();
      const double signal = kGammaGrade2 * student.covariates[kGrade2] +
                            kGammaFsm * student.covariates[kFsm] + base;
      for (int k = 0; k < kNumOutcomes; ++k) {
        const std::size_t kk = static_cast<std::size_t>(k);
        const double noise =
            alpha[kk] + sigma_eps * (shared_student * ability + own_student * rs.next_normal());
        student.outcomes[kk] = signal + noise;
        sc.sum_noise[kk] += noise;
      }
    }
  });

  // Exact ground truth: remove the realized group means of the noise so the
  // raw gap between groups is the injected shift plus the covariate part.
  {
    std::array<double, kNumOutcomes> noise_sel{}, noise_pool{};
    double grade2_sel = 0.0, grade2_pool = 0.0, fsm_sel = 0.0, fsm_pool = 0.0;
    double n_sel = 0.0, n_pool = 0.0;
    for (std::size_t j = 0; j < n_schools; ++j) {
      const SchoolUnit& school = pop.schools[j];
      const SchoolScratch& sc = scratch[j];
      const double n = static_cast<double>(school.n_students);
      if (school.selected) {
        n_sel += n;
        grade2_sel += sc.sum_grade2_true;
        fsm_sel += sc.sum_fsm_true;
        for (int k = 0; k < kNumOutcomes; ++k)
          noise_sel[static_cast<std::size_t>(k)] += sc.sum_noise[static_cast<std::size_t>(k)];
      } else {
        n_pool += n;
        grade2_pool += sc.sum_grade2_true;
        fsm_pool += sc.sum_fsm_true;
        for (int k = 0; k < kNumOutcomes; ++k)
          noise_pool[static_cast<std::size_t>(k)] += sc.sum_noise[static_cast<std::size_t>(k)];
      }
    }
    std::array<double, kNumOutcomes> adjust_sel{}, adjust_pool{};
    for (int k = 0; k < kNumOutcomes; ++k) {
      const std::size_t kk = static_cast<std::size_t>(k);
      adjust_sel[kk] = n_sel > 0.0 ? noise_sel[kk] / n_sel : 0.0;
      adjust_pool[kk] = n_pool > 0.0 ? noise_pool[kk] / n_pool : 0.0;
      const double x_gap = kGammaGrade2 * (grade2_sel / n_sel - grade2_pool / n_pool) +
                           kGammaFsm * (fsm_sel / n_sel - fsm_pool / n_pool);
      pop.generative.x_component[kk] = x_gap;
      pop.true_bias[kk] = shift;
    }
    parallel_for(n_schools, threads, [&](std::size_t j) {
      SchoolUnit& school = pop.schools[j];
      const auto& adjust = school.selected ? adjust_sel : adjust_pool;
      for (std::uint32_t s = 0; s < school.n_students; ++s) {
        StudentUnit& student = pop.students[school.first_student + s];
        for (int k = 0; k < kNumOutcomes; ++k)
          student.outcomes[static_cast<std::size_t>(k)] -= adjust[static_cast<std::size_t>(k)];
      }
    });
  }

  // Phase 4: apply missingness masks to the observed covariates.
  if (config.missingness_rate > 0.0) {
    parallel_for(n_schools, threads, [&](std::size_t j) {
      SchoolUnit& school = pop.schools[j];
      const SchoolScratch& sc = scratch[j];
      for (std::size_t b = 0; b < kMissableSchoolCovs.size(); ++b) {
        if (sc.school_miss_mask & (1u << b)) school.covariates[kMissableSchoolCovs[b]] = kNaN;
      }
      for (std::uint32_t s = 0; s < school.n_students; ++s) {
        const std::size_t idx = school.first_student + s;
        const std::uint8_t mask = student_miss[idx];
        if (!mask) continue;
        for (std::size_t b = 0; b < kMissableStudentCovs.size(); ++b) {
          if (mask & (1u << b)) pop.students[idx].covariates[kMissableStudentCovs[b]] = kNaN;
        }
      }
    });
  }

  pop.generative.gamma_grade2 = kGammaGrade2;
  pop.generative.gamma_fsm = kGammaFsm;
  pop.generative.sigma_alpha2 = vc.sigma_alpha2;
  pop.generative.sigma_eps2 = vc.sigma_eps2;
  pop.generative.hidden_selection_weight = kHiddenSelectionWeight;
  return pop;
}

PopulationSnapshot inject_hidden_confounder(const PopulationSnapshot& pop, double shift,
                                            const std::vector<Outcome>& outcomes) {
  if (outcomes.empty())
    throw ArgumentError("inject_hidden_confounder: outcome subset must not be empty");
  if (!std::isfinite(shift)) throw ArgumentError("inject_hidden_confounder: shift must be finite");
  std::array<bool, kNumOutcomes> hit{};
  for (const Outcome k : outcomes) hit[static_cast<std::size_t>(k)] = true;

  PopulationSnapshot out = pop;
  for (auto& student : out.students) {
    if (!out.schools[student.school_index].selected) continue;
    for (int k = 0; k < kNumOutcomes; ++k) {
      const std::size_t kk = static_cast<std::size_t>(k);
      if (hit[kk]) student.outcomes[kk] += shift;
    }
  }
  for (int k = 0; k < kNumOutcomes; ++k) {
    const std::size_t kk = static_cast<std::size_t>(k);
    if (hit[kk]) out.true_bias[kk] += shift;
  }
  return out;
}

std::vector<std::string> draw_trial_controls(const PopulationSnapshot& pop, int count,
                                             std::uint64_t seed, SampleFrame frame,
                                             std::uint64_t unit) {
  if (count < 1) throw ArgumentError("draw_trial_controls: count must be positive");
  std::vector<std::size_t> frame_schools;
  for (std::size_t j = 0; j < pop.schools.size(); ++j) {
    const SchoolUnit& school = pop.schools[j];
    const bool keep = frame == SampleFrame::trial_controls ? (school.selected && !school.treated)
                      : frame == SampleFrame::trial_treated ? (school.selected && school.treated)
                                                            : !school.selected;
    if (keep) frame_schools.push_back(j);
  }
  if (static_cast<std::size_t>(count) > frame_schools.size()) {
    std::ostringstream os;
    os << "draw_trial_controls: requested " << count << " schools but the frame holds "
       << frame_schools.size();
    throw ArgumentError(os.str());
  }
  rng::Substream rs(seed, Tag::trial_draw, unit * 4 + static_cast<std::uint64_t>(frame));
  const auto picks =
      rs.sample_without_replacement(frame_schools.size(), static_cast<std::size_t>(count));
  std::vector<std::string> ids;
  ids.reserve(picks.size());
  for (const std::size_t p : picks) ids.push_back(pop.schools[frame_schools[p]].school_id);
  return ids;
}

namespace {

void append_history_cells(std::vector<std::string>& row, const SchoolUnit& school, bool score) {
  for (int offset = -kMaxHistoryYears; offset <= -1; ++offset) {
    std::string cell;
    for (const YearRecord& record : school.history) {
      if (record.offset == offset) {
        cell = csv::format_double(score ? record.mean_score : record.grade_share);
        break;
      }
    }
    row.push_back(cell);
  }
}

}  // namespace

void save_population(const PopulationSnapshot& pop, const std::string& dir) {
  std::filesystem::create_directories(dir);

  csv::Table schools;
  schools.header = {"school_id", "selected", "treated", "hidden_u", "n_students"};
  for (const char* name : kSchoolCovariateNames) schools.header.push_back(name);
  for (int offset = kMaxHistoryYears; offset >= 1; --offset)
    schools.header.push_back("hist_score_m" + std::to_string(offset));
  for (int offset = kMaxHistoryYears; offset >= 1; --offset)
    schools.header.push_back("hist_share_m" + std::to_string(offset));
  schools.rows.reserve(pop.schools.size());
  for (const SchoolUnit& school : pop.schools) {
    std::vector<std::string> row = {school.school_id, school.selected ? "1" : "0",
                                    school.treated ? "1" : "0",
                                    csv::format_double(school.hidden_u),
                                    csv::format_int(school.n_students)};
    for (const double v : school.covariates) row.push_back(csv::format_double(v));
    append_history_cells(row, school, true);
    append_history_cells(row, school, false);
    schools.rows.push_back(std::move(row));
  }
  csv::write_file(dir + "/schools.csv", schools);

  csv::Table students;
  students.header = {"student_id", "school_id"};
  for (const char* name : kStudentCovariateNames) students.header.push_back(name);
  for (const char* name : kOutcomeNames) students.header.push_back(std::string("y_") + name);
  students.rows.reserve(pop.students.size());
  for (const StudentUnit& student : pop.students) {
    std::vector<std::string> row = {student.student_id,
                                    pop.schools[student.school_index].school_id};
    for (const double v : student.covariates) row.push_back(csv::format_double(v));
    for (const double v : student.outcomes) row.push_back(csv::format_double(v));
    students.rows.push_back(std::move(row));
  }
  csv::write_file(dir + "/students.csv", students);

  ordered_json sidecar;
  sidecar["schema_version"] = 1;
  sidecar["config"] = config_to_json_object(pop.config);
  ordered_json bias;
  for (int k = 0; k < kNumOutcomes; ++k)
    bias[kOutcomeNames[static_cast<std::size_t>(k)]] = pop.true_bias[static_cast<std::size_t>(k)];
  sidecar["true_bias"] = bias;
  ordered_json gen;
  gen["gamma_grade2"] = pop.generative.gamma_grade2;
  gen["gamma_fsm"] = pop.generative.gamma_fsm;
  gen["sigma_alpha2"] = pop.generative.sigma_alpha2;
  gen["sigma_eps2"] = pop.generative.sigma_eps2;
  gen["selection_intercept"] = pop.generative.selection_intercept;
  gen["hidden_selection_weight"] = pop.generative.hidden_selection_weight;
  ordered_json xc;
  for (int k = 0; k < kNumOutcomes; ++k)
    xc[kOutcomeNames[static_cast<std::size_t>(k)]] =
        pop.generative.x_component[static_cast<std::size_t>(k)];
  gen["x_component"] = xc;
  sidecar["generative"] = gen;
  std::size_t n_selected = 0;
  for (const SchoolUnit& school : pop.schools)
    if (school.selected) ++n_selected;
  ordered_json counts;
  counts["n_schools"] = pop.schools.size();
  counts["n_students"] = pop.students.size();
  counts["n_selected"] = n_selected;
  sidecar["counts"] = counts;

  std::ofstream os(dir + "/population.json", std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + dir + "/population.json");
  os << sidecar.dump(2) << '\n';
  if (!os.flush()) throw IoError("write failed: " + dir + "/population.json");
}

PopulationSnapshot load_population(const std::string& dir) {
  std::ifstream is(dir + "/population.json", std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + dir + "/population.json");
  ordered_json sidecar;
  try {
    is >> sidecar;
  } catch (const ordered_json::exception& e) {
    throw IoError(std::string("population.json parse: ") + e.what());
  }

  PopulationSnapshot pop;
  pop.config = config_from_json_object(sidecar.at("config"));
  for (int k = 0; k < kNumOutcomes; ++k) {
    const std::size_t kk = static_cast<std::size_t>(k);
    pop.true_bias[kk] = sidecar.at("true_bias").at(kOutcomeNames[kk]).get<double>();
    pop.generative.x_component[kk] =
        sidecar.at("generative").at("x_component").at(kOutcomeNames[kk]).get<double>();
  }
  const auto& gen = sidecar.at("generative");
  pop.generative.gamma_grade2 = gen.at("gamma_grade2").get<double>();
  pop.generative.gamma_fsm = gen.at("gamma_fsm").get<double>();
  pop.generative.sigma_alpha2 = gen.at("sigma_alpha2").get<double>();
  pop.generative.sigma_eps2 = gen.at("sigma_eps2").get<double>();
  pop.generative.selection_intercept = gen.at("selection_intercept").get<double>();
  pop.generative.hidden_selection_weight = gen.at("hidden_selection_weight").get<double>();

  const csv::Table schools = csv::read_file(dir + "/schools.csv");
  pop.schools.reserve(schools.rows.size());
  std::vector<std::size_t> cov_cols(kNumSchoolCovariates);
  for (std::size_t c = 0; c < kNumSchoolCovariates; ++c)
    cov_cols[c] = schools.column(kSchoolCovariateNames[c]);
  std::vector<std::size_t> score_cols, share_cols;
  for (int offset = kMaxHistoryYears; offset >= 1; --offset) {
    score_cols.push_back(schools.column("hist_score_m" + std::to_string(offset)));
    share_cols.push_back(schools.column("hist_share_m" + std::to_string(offset)));
  }
  const std::size_t id_col = schools.column("school_id");
  const std::size_t sel_col = schools.column("selected");
  const std::size_t treat_col = schools.column("treated");
  const std::size_t u_col = schools.column("hidden_u");
  for (const auto& row : schools.rows) {
    SchoolUnit school;
    school.school_id = row[id_col];
    school.selected = row[sel_col] == "1";
    school.treated = row[treat_col] == "1";
    school.hidden_u = csv::parse_double(row[u_col]);
    for (std::size_t c = 0; c < kNumSchoolCovariates; ++c)
      school.covariates[c] = csv::parse_double_or_nan(row[cov_cols[c]]);
    for (std::size_t h = 0; h < score_cols.size(); ++h) {
      if (row[score_cols[h]].empty()) continue;
      YearRecord record;
      record.offset = -(kMaxHistoryYears - static_cast<int>(h));
      record.mean_score = csv::parse_double(row[score_cols[h]]);
      record.grade_share = csv::parse_double(row[share_cols[h]]);
      school.history.push_back(record);
    }
    pop.schools.push_back(std::move(school));
  }

  const csv::Table students = csv::read_file(dir + "/students.csv");
  pop.students.reserve(students.rows.size());
  const std::size_t st_id_col = students.column("student_id");
  const std::size_t st_school_col = students.column("school_id");
  std::vector<std::size_t> st_cov_cols(kNumStudentCovariates);
  for (std::size_t c = 0; c < kNumStudentCovariates; ++c)
    st_cov_cols[c] = students.column(kStudentCovariateNames[c]);
  std::array<std::size_t, kNumOutcomes> y_cols{};
  for (int k = 0; k < kNumOutcomes; ++k) {
    const std::size_t kk = static_cast<std::size_t>(k);
    y_cols[kk] = students.column(std::string("y_") + kOutcomeNames[kk]);
  }
  const auto& index_map = pop.school_index_map();
  std::string current_school;
  std::size_t current_index = 0;
  for (const auto& row : students.rows) {
    StudentUnit student;
    student.student_id = row[st_id_col];
    if (row[st_school_col] != current_school) {
      current_school = row[st_school_col];
      const auto it = index_map.find(current_school);
      if (it == index_map.end())
        throw IoError("students.csv references unknown school: " + current_school);
      current_index = it->second;
      pop.schools[current_index].first_student = static_cast<std::uint32_t>(pop.students.size());
      pop.schools[current_index].n_students = 0;
    }
    student.school_index = static_cast<std::uint32_t>(current_index);
    for (std::size_t c = 0; c < kNumStudentCovariates; ++c)
      student.covariates[c] = csv::parse_double_or_nan(row[st_cov_cols[c]]);
    for (int k = 0; k < kNumOutcomes; ++k) {
      const std::size_t kk = static_cast<std::size_t>(k);
      student.outcomes[kk] = csv::parse_double(row[y_cols[kk]]);
    }
    pop.schools[current_index].n_students += 1;
    pop.students.push_back(std::move(student));
  }
  return pop;
}

}  // namespace wsc
