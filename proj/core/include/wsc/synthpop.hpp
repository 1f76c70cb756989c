// Synthetic school populations with a known selection process. A snapshot
// carries one cohort of schools and students, a single trial-selection flag
// per school, and the exact ground-truth bias implied by the generative
// equations, so downstream estimators can be scored against the truth.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace wsc {

inline constexpr int kNumOutcomes = 3;
inline constexpr int kMaxHistoryYears = 5;

enum class Outcome : int { math = 0, reading = 1, writing = 2 };

inline constexpr std::array<const char*, kNumOutcomes> kOutcomeNames = {
    "math", "reading", "writing"};

Outcome outcome_from_name(const std::string& name);

// School-level covariates, in persisted column order.
inline constexpr std::array<const char*, 12> kSchoolCovariateNames = {
    "school_size",    "ofsted",          "income",
    "outside_budget", "ta_percent",      "pupil_teacher_ratio",
    "voluntary",      "academy_sponsor", "academy_converter",
    "crime",          "housing",         "idaci"};
inline constexpr std::size_t kNumSchoolCovariates = kSchoolCovariateNames.size();

// Student-level covariates, in persisted column order. Rurality is a
// four-way category; the metropolitan reference level has no indicator.
inline constexpr std::array<const char*, 7> kStudentCovariateNames = {
    "grade2", "age_months", "gender", "fsm", "small_metro", "rural", "very_rural"};
inline constexpr std::size_t kNumStudentCovariates = kStudentCovariateNames.size();

// Order of the standardized school-level covariates entering the selection
// propensity, matching selection_coefficients by position.
inline constexpr std::array<const char*, 6> kSelectionCovariateNames = {
    "grade2_mean", "fsm_share", "prior_attainment", "log_income", "idaci", "ofsted"};

struct ScenarioConfig {
  int n_schools = 0;
  double students_per_school_mean = 40.0;
  double students_per_school_dispersion = 8.0;
  int n_trial_controls = 0;
  double outcome_icc = 0.2;
  std::vector<double> selection_coefficients;
  double hidden_confounder_strength = 0.0;
  int n_outcomes = kNumOutcomes;
  double missingness_rate = 0.0;
  std::uint64_t rng_seed = 0;
  double selection_base_rate = 0.15;
  int history_years = kMaxHistoryYears;

  // Throws ConfigError naming the offending field.
  void validate() const;

  std::string to_json() const;
  static ScenarioConfig from_json(const std::string& text);
};

struct YearRecord {
  int offset = 0;  // years before the focal year, -1 is the most recent
  double mean_score = 0.0;
  double grade_share = 0.0;
};

struct SchoolUnit {
  std::string school_id;
  std::array<double, kNumSchoolCovariates> covariates{};
  std::vector<YearRecord> history;
  bool selected = false;
  bool treated = false;
  double hidden_u = 0.0;
  // Span of this school's students inside PopulationSnapshot::students.
  std::uint32_t first_student = 0;
  std::uint32_t n_students = 0;
};

struct StudentUnit {
  std::string student_id;
  std::uint32_t school_index = 0;
  std::array<double, kNumStudentCovariates> covariates{};
  std::array<double, kNumOutcomes> outcomes{};
};

// Constants of the generative equations, persisted so that tests and the
// report can reproduce the ground-truth arithmetic.
struct GenerativeSummary {
  double gamma_grade2 = 0.0;
  double gamma_fsm = 0.0;
  double sigma_alpha2 = 0.0;
  double sigma_eps2 = 0.0;
  double selection_intercept = 0.0;
  double hidden_selection_weight = 0.0;
  // Covariate-attributable part of the raw outcome gap between selected and
  // unselected schools, one entry per outcome.
  std::array<double, kNumOutcomes> x_component{};
};

struct PopulationSnapshot {
  ScenarioConfig config;
  std::vector<SchoolUnit> schools;
  std::vector<StudentUnit> students;
  std::array<double, kNumOutcomes> true_bias{};
  GenerativeSummary generative;

  std::size_t school_index(const std::string& school_id) const;
  const std::unordered_map<std::string, std::size_t>& school_index_map() const;

private:
  mutable std::unordered_map<std::string, std::size_t> index_cache_;
};

PopulationSnapshot generate_population(const ScenarioConfig& config, int threads = 0);

// Returns a copy with Y(0) shifted by `shift` effect-size units for every
// student in a selected school, on the listed outcomes only; true_bias is
// updated additively. The input snapshot is not modified.
PopulationSnapshot inject_hidden_confounder(const PopulationSnapshot& pop, double shift,
                                            const std::vector<Outcome>& outcomes);

enum class SampleFrame {
  trial_controls,   // selected, untreated
  trial_treated,    // selected, treated
  comparison_pool,  // unselected
};

// Simple random sample of school ids without replacement from the frame.
// `unit` separates independent draws under one seed (per intervention, per
// placebo replicate); the substream also folds in the frame.
std::vector<std::string> draw_trial_controls(const PopulationSnapshot& pop, int count,
                                             std::uint64_t seed,
                                             SampleFrame frame = SampleFrame::trial_controls,
                                             std::uint64_t unit = 0);

// Persistence: schools.csv + students.csv + population.json in `dir`.
// Floating point values round-trip exactly (17 significant digits).
void save_population(const PopulationSnapshot& pop, const std::string& dir);
PopulationSnapshot load_population(const std::string& dir);

}  // namespace wsc
