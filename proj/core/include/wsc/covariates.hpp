// School-level covariate engineering: aggregation of student covariates,
// shrunken quadratic growth covariates from outcome history, and assembly of
// the standardized design matrix used by the propensity and matching steps.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "wsc/synthpop.hpp"

namespace wsc {

struct Warning {
  std::string code;
  std::string detail;
};

// Aggregated student covariate names, aligned with kStudentCovariateNames.
inline constexpr std::array<const char*, kNumStudentCovariates> kAggregateNames = {
    "grade2_mean", "age_mean",    "gender_share", "fsm_share",
    "small_metro_share", "rural_share", "very_rural_share"};

inline constexpr std::array<const char*, 3> kGrowthNames = {
    "academic_level", "academic_growth", "grade_level_growth"};

struct AggregateResult {
  // One row per school with at least one student, in school order; means are
  // taken over non-missing values and are NaN when every value is missing.
  std::vector<std::string> school_ids;
  std::vector<std::array<double, kNumStudentCovariates>> means;
  std::vector<Warning> warnings;
};

AggregateResult aggregate_to_school(const PopulationSnapshot& pop);

struct GrowthCovariates {
  double academic_level = 0.0;
  double academic_growth = 0.0;
  double grade_level_growth = 0.0;
  bool fitted = false;
};

struct SeriesObservation {
  int offset = 0;  // years before the focal year, -1 most recent
  double value = 0.0;
};

struct SeriesFit {
  double level = 0.0;
  double growth = 0.0;
  bool fitted = false;
};

// Level and average annual growth for one value series per school, using a
// four-year window ending one year before the focal year. Schools with three
// or more observations get a per-school quadratic least-squares fit shrunk
// toward the population mean coefficients with precision weights; two
// observations fall back to the raw difference, one to the raw level plus the
// pooled mean growth; empty series are left unfitted.
std::vector<SeriesFit> fit_growth_series(
    const std::vector<std::vector<SeriesObservation>>& series);

struct GrowthResult {
  std::vector<GrowthCovariates> rows;  // aligned with pop.schools
  std::vector<Warning> warnings;
};

GrowthResult fit_growth_covariates(const PopulationSnapshot& pop);

struct ColumnInfo {
  std::string name;
  bool binary = false;
  std::string transform = "none";  // "none" or "log1p"
  double mean = 0.0;               // post-transform mean used for standardization
  double sd = 1.0;
  double imputed_value = 0.0;
  std::size_t n_imputed = 0;
};

struct SchoolFeatureRow {
  std::string school_id;
  std::uint32_t n_students = 0;
  std::vector<double> features;   // standardized
  std::vector<double> raw_means;  // post-transform, post-imputation
};

struct DesignMatrix {
  std::vector<ColumnInfo> columns;
  std::vector<SchoolFeatureRow> rows;  // ordered by school_id
  std::vector<Warning> warnings;       // includes excluded zero-variance columns

  std::size_t column(const std::string& name) const;
  std::size_t row_index(const std::string& school_id) const;

private:
  mutable std::unordered_map<std::string, std::size_t> row_cache_;
};

// Budget covariates are log(1+x) transformed, missing entries are imputed
// (column mean for continuous, mode for binary), every non-binary column is
// standardized to mean 0 and unit variance, and zero-variance columns are
// excluded with a warning naming the column.
DesignMatrix prepare_design(const PopulationSnapshot& pop);

void save_design(const DesignMatrix& design, const std::string& csv_path,
                 const std::string& manifest_path);
DesignMatrix load_design(const std::string& csv_path, const std::string& manifest_path);

// Student-level standardization context for the outcome model: continuous
// covariates are standardized with population moments, missing values take
// the column mean (continuous) or mode (binary).
struct StudentDesignInfo {
  std::array<bool, kNumStudentCovariates> binary{};
  std::array<double, kNumStudentCovariates> mean{};
  std::array<double, kNumStudentCovariates> sd{};
  std::array<double, kNumStudentCovariates> imputed_value{};
};

StudentDesignInfo build_student_design_info(const PopulationSnapshot& pop);

double student_feature(const StudentDesignInfo& info, const StudentUnit& student,
                       std::size_t covariate);

}  // namespace wsc
