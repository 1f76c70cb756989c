#include "wsc/covariates.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"

namespace wsc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Four-year window ending the year before the focal year.
constexpr int kWindowStart = -4;
constexpr int kWindowEnd = -1;

bool is_missing(double v) { return std::isnan(v); }

}  // namespace

AggregateResult aggregate_to_school(const PopulationSnapshot& pop) {
  AggregateResult out;
  out.school_ids.reserve(pop.schools.size());
  out.means.reserve(pop.schools.size());
  for (const SchoolUnit& school : pop.schools) {
    if (school.n_students == 0) {
      out.warnings.push_back({"zero_student_school",
                              school.school_id + " has no students; excluded from aggregation"});
      continue;
    }
    std::array<double, kNumStudentCovariates> sum{};
    std::array<std::uint32_t, kNumStudentCovariates> count{};
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      const StudentUnit& student = pop.students[school.first_student + s];
      for (std::size_t c = 0; c < kNumStudentCovariates; ++c) {
        const double v = student.covariates[c];
        if (is_missing(v)) continue;
        sum[c] += v;
        count[c] += 1;
      }
    }
    std::array<double, kNumStudentCovariates> mean{};
    for (std::size_t c = 0; c < kNumStudentCovariates; ++c)
      mean[c] = count[c] > 0 ? sum[c] / count[c] : kNaN;
    out.school_ids.push_back(school.school_id);
    out.means.push_back(mean);
  }
  return out;
}

std::vector<SeriesFit> fit_growth_series(
    const std::vector<std::vector<SeriesObservation>>& series) {
  const std::size_t n = series.size();
  std::vector<SeriesFit> fits(n);

  // Windowed observations, sorted by offset.
  std::vector<std::vector<SeriesObservation>> window(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (const SeriesObservation& obs : series[j]) {
      if (obs.offset >= kWindowStart && obs.offset <= kWindowEnd) window[j].push_back(obs);
    }
    std::sort(window[j].begin(), window[j].end(),
              [](const SeriesObservation& a, const SeriesObservation& b) {
                return a.offset < b.offset;
              });
  }

  // Stage 1: per-school quadratic least squares on t = offset + 1, so the
  // intercept is the level at offset -1.
  struct QuadFit {
    std::size_t school;
    Eigen::Vector3d b;
    Eigen::Matrix3d xtx;
    double rss;
    int df;
  };
  std::vector<QuadFit> quads;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& obs = window[j];
    if (obs.size() < 3) continue;
    const int m = static_cast<int>(obs.size());
    Eigen::MatrixXd x(m, 3);
    Eigen::VectorXd y(m);
    for (int i = 0; i < m; ++i) {
      const double t = static_cast<double>(obs[static_cast<std::size_t>(i)].offset + 1);
      x(i, 0) = 1.0;
      x(i, 1) = t;
      x(i, 2) = t * t;
      y(i) = obs[static_cast<std::size_t>(i)].value;
    }
    QuadFit qf;
    qf.school = j;
    qf.xtx = (x.transpose() * x).eval();
    qf.b = qf.xtx.ldlt().solve(x.transpose() * y);
    qf.rss = (y - x * qf.b).squaredNorm();
    qf.df = m - 3;
    quads.push_back(std::move(qf));
  }

  double pooled_s2 = 0.0;
  {
    double rss = 0.0;
    int df = 0;
    for (const QuadFit& qf : quads) {
      rss += qf.rss;
      df += qf.df;
    }
    pooled_s2 = df > 0 ? rss / df : 0.0;
  }

  // Stage 2: shrink per-school coefficients toward the population mean with
  // precision weights from the moment estimate of the between covariance.
  if (!quads.empty()) {
    Eigen::Vector3d b_bar = Eigen::Vector3d::Zero();
    for (const QuadFit& qf : quads) b_bar += qf.b;
    b_bar /= static_cast<double>(quads.size());

    Eigen::Matrix3d s_between = Eigen::Matrix3d::Zero();
    Eigen::Matrix3d v_mean = Eigen::Matrix3d::Zero();
    for (const QuadFit& qf : quads) {
      const Eigen::Vector3d d = qf.b - b_bar;
      s_between += d * d.transpose();
      v_mean += pooled_s2 * qf.xtx.inverse();
    }
    if (quads.size() > 1) s_between /= static_cast<double>(quads.size() - 1);
    else s_between.setZero();
    v_mean /= static_cast<double>(quads.size());

    Eigen::Matrix3d d_hat;
    {
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(s_between - v_mean);
      Eigen::Vector3d ev = es.eigenvalues().cwiseMax(0.0);
      d_hat = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }

    for (const QuadFit& qf : quads) {
      const Eigen::Matrix3d v_j = pooled_s2 * qf.xtx.inverse();
      const Eigen::Matrix3d total = d_hat + v_j;
      Eigen::Vector3d b_star;
      if (total.norm() < 1e-14) {
        b_star = b_bar;
      } else {
        b_star = b_bar + d_hat * total.ldlt().solve(qf.b - b_bar);
        if (!b_star.allFinite()) b_star = qf.b;
      }
      SeriesFit& fit = fits[qf.school];
      fit.level = b_star(0);
      // Average annual change across the window: (pred(0) - pred(-3)) / 3.
      fit.growth = b_star(1) - 3.0 * b_star(2);
      fit.fitted = true;
    }
  }

  // Two observations: raw year-over-year change, annualized across any gap.
  std::vector<std::size_t> single_obs;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& obs = window[j];
    if (obs.size() == 2) {
      SeriesFit& fit = fits[j];
      fit.growth = (obs[1].value - obs[0].value) /
                   static_cast<double>(obs[1].offset - obs[0].offset);
      fit.level = obs[1].value;
      fit.fitted = true;
    } else if (obs.size() == 1) {
      single_obs.push_back(j);
    }
  }

  // One observation: raw level plus the pooled mean growth.
  if (!single_obs.empty()) {
    double pooled_growth = 0.0;
    std::size_t pooled_count = 0;
    for (const QuadFit& qf : quads) {
      pooled_growth += fits[qf.school].growth;
      ++pooled_count;
    }
    if (pooled_count == 0) {
      for (std::size_t j = 0; j < n; ++j) {
        if (window[j].size() == 2) {
          pooled_growth += fits[j].growth;
          ++pooled_count;
        }
      }
    }
    pooled_growth = pooled_count > 0 ? pooled_growth / static_cast<double>(pooled_count) : 0.0;
    for (const std::size_t j : single_obs) {
      SeriesFit& fit = fits[j];
      fit.level = window[j][0].value;
      fit.growth = pooled_growth;
      fit.fitted = true;
    }
  }

  return fits;
}

GrowthResult fit_growth_covariates(const PopulationSnapshot& pop) {
  const std::size_t n = pop.schools.size();
  std::vector<std::vector<SeriesObservation>> scores(n), shares(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (const YearRecord& record : pop.schools[j].history) {
      scores[j].push_back({record.offset, record.mean_score});
      shares[j].push_back({record.offset, record.grade_share});
    }
  }
  const std::vector<SeriesFit> score_fit = fit_growth_series(scores);
  const std::vector<SeriesFit> share_fit = fit_growth_series(shares);

  GrowthResult out;
  out.rows.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    GrowthCovariates& gc = out.rows[j];
    if (!score_fit[j].fitted) {
      out.warnings.push_back({"empty_history", pop.schools[j].school_id +
                                                   " has no usable history; dropped from the "
                                                   "growth fit"});
      continue;
    }
    gc.academic_level = score_fit[j].level;
    gc.academic_growth = score_fit[j].growth;
    gc.grade_level_growth = share_fit[j].fitted ? share_fit[j].growth : kNaN;
    gc.fitted = true;
  }
  return out;
}

std::size_t DesignMatrix::column(const std::string& name) const {
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].name == name) return c;
  }
  throw ArgumentError("design matrix has no column named " + name);
}

std::size_t DesignMatrix::row_index(const std::string& school_id) const {
  if (row_cache_.size() != rows.size()) {
    row_cache_.clear();
    row_cache_.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) row_cache_[rows[r].school_id] = r;
  }
  const auto it = row_cache_.find(school_id);
  if (it == row_cache_.end()) throw ArgumentError("design matrix has no row for " + school_id);
  return it->second;
}

DesignMatrix prepare_design(const PopulationSnapshot& pop) {
  const std::size_t n = pop.schools.size();
  const AggregateResult agg = aggregate_to_school(pop);
  const GrowthResult growth = fit_growth_covariates(pop);

  // Raw column assembly. Budget covariates are log(1+x) transformed here.
  struct RawColumn {
    std::string name;
    std::string transform = "none";
    std::vector<double> values;
  };
  std::vector<RawColumn> raw;

  std::unordered_map<std::string, std::size_t> agg_index;
  for (std::size_t r = 0; r < agg.school_ids.size(); ++r) agg_index[agg.school_ids[r]] = r;

  for (std::size_t c = 0; c < kNumStudentCovariates; ++c) {
    RawColumn col;
    col.name = kAggregateNames[c];
    col.values.resize(n, kNaN);
    for (std::size_t j = 0; j < n; ++j) {
      const auto it = agg_index.find(pop.schools[j].school_id);
      if (it != agg_index.end()) col.values[j] = agg.means[it->second][c];
    }
    raw.push_back(std::move(col));
  }
  for (std::size_t c = 0; c < kNumSchoolCovariates; ++c) {
    RawColumn col;
    col.name = kSchoolCovariateNames[c];
    const bool budget = col.name == "income" || col.name == "outside_budget";
    col.transform = budget ? "log1p" : "none";
    col.values.resize(n, kNaN);
    for (std::size_t j = 0; j < n; ++j) {
      const double v = pop.schools[j].covariates[c];
      if (is_missing(v)) continue;
      col.values[j] = budget ? std::log1p(v) : v;
    }
    raw.push_back(std::move(col));
  }
  for (std::size_t g = 0; g < kGrowthNames.size(); ++g) {
    RawColumn col;
    col.name = kGrowthNames[g];
    col.values.resize(n, kNaN);
    for (std::size_t j = 0; j < n; ++j) {
      const GrowthCovariates& gc = growth.rows[j];
      if (!gc.fitted) continue;
      col.values[j] = g == 0 ? gc.academic_level
                    : g == 1 ? gc.academic_growth
                             : gc.grade_level_growth;
    }
    raw.push_back(std::move(col));
  }

  DesignMatrix design;
  design.warnings = agg.warnings;
  design.warnings.insert(design.warnings.end(), growth.warnings.begin(), growth.warnings.end());

  design.rows.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    design.rows[j].school_id = pop.schools[j].school_id;
    design.rows[j].n_students = pop.schools[j].n_students;
  }

  for (RawColumn& col : raw) {
    std::size_t n_obs = 0;
    double sum = 0.0;
    std::size_t ones = 0;
    bool binary = true;
    for (const double v : col.values) {
      if (is_missing(v)) continue;
      ++n_obs;
      sum += v;
      if (v == 1.0) ++ones;
      else if (v != 0.0) binary = false;
    }
    if (n_obs == 0) {
      design.warnings.push_back({"column_excluded", col.name + ": all values missing"});
      continue;
    }

    ColumnInfo info;
    info.name = col.name;
    info.transform = col.transform;
    info.binary = binary;
    info.imputed_value = binary ? (2 * ones > n_obs ? 1.0 : 0.0)
                                : sum / static_cast<double>(n_obs);
    for (double& v : col.values) {
      if (is_missing(v)) {
        v = info.imputed_value;
        ++info.n_imputed;
      }
    }

    double mean = 0.0;
    for (const double v : col.values) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const double v : col.values) var += (v - mean) * (v - mean);
    var = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
    if (var <= 0.0) {
      design.warnings.push_back({"column_excluded", col.name + ": zero variance"});
      continue;
    }

    if (binary) {
      info.mean = 0.0;
      info.sd = 1.0;
    } else {
      info.mean = mean;
      info.sd = std::sqrt(var);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double value = col.values[j];
      design.rows[j].raw_means.push_back(value);
      design.rows[j].features.push_back(binary ? value : (value - info.mean) / info.sd);
    }
    design.columns.push_back(std::move(info));
  }

  // Row order is part of the contract.
  std::sort(design.rows.begin(), design.rows.end(),
            [](const SchoolFeatureRow& a, const SchoolFeatureRow& b) {
              return a.school_id < b.school_id;
            });
  return design;
}

void save_design(const DesignMatrix& design, const std::string& csv_path,
                 const std::string& manifest_path) {
  csv::Table table;
  table.header = {"school_id", "n_students"};
  for (const ColumnInfo& info : design.columns) table.header.push_back(info.name);
  for (const ColumnInfo& info : design.columns) table.header.push_back("raw_" + info.name);
  table.rows.reserve(design.rows.size());
  for (const SchoolFeatureRow& row : design.rows) {
    std::vector<std::string> cells = {row.school_id, csv::format_int(row.n_students)};
    for (const double v : row.features) cells.push_back(csv::format_double(v));
    for (const double v : row.raw_means) cells.push_back(csv::format_double(v));
    table.rows.push_back(std::move(cells));
  }
  csv::write_file(csv_path, table);

  nlohmann::ordered_json manifest;
  manifest["schema_version"] = 1;
  nlohmann::ordered_json cols = nlohmann::ordered_json::array();
  for (const ColumnInfo& info : design.columns) {
    nlohmann::ordered_json c;
    c["name"] = info.name;
    c["binary"] = info.binary;
    c["transform"] = info.transform;
    c["mean"] = info.mean;
    c["sd"] = info.sd;
    c["imputed_value"] = info.imputed_value;
    c["n_imputed"] = info.n_imputed;
    cols.push_back(c);
  }
  manifest["columns"] = cols;
  nlohmann::ordered_json warns = nlohmann::ordered_json::array();
  for (const Warning& w : design.warnings) {
    nlohmann::ordered_json entry;
    entry["code"] = w.code;
    entry["detail"] = w.detail;
    warns.push_back(entry);
  }
  manifest["warnings"] = warns;
  manifest["n_rows"] = design.rows.size();
  std::ofstream os(manifest_path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + manifest_path);
  os << manifest.dump(2) << '\n';
  if (!os.flush()) throw IoError("write failed: " + manifest_path);
}

DesignMatrix load_design(const std::string& csv_path, const std::string& manifest_path) {
  std::ifstream is(manifest_path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + manifest_path);
  nlohmann::ordered_json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::ordered_json::exception& e) {
    throw IoError(std::string("design manifest parse: ") + e.what());
  }

  DesignMatrix design;
  for (const auto& c : manifest.at("columns")) {
    ColumnInfo info;
    info.name = c.at("name").get<std::string>();
    info.binary = c.at("binary").get<bool>();
    info.transform = c.at("transform").get<std::string>();
    info.mean = c.at("mean").get<double>();
    info.sd = c.at("sd").get<double>();
    info.imputed_value = c.at("imputed_value").get<double>();
    info.n_imputed = c.at("n_imputed").get<std::size_t>();
    design.columns.push_back(std::move(info));
  }
  if (manifest.contains("warnings")) {
    for (const auto& w : manifest.at("warnings"))
      design.warnings.push_back({w.at("code").get<std::string>(), w.at("detail").get<std::string>()});
  }

  const csv::Table table = csv::read_file(csv_path);
  const std::size_t id_col = table.column("school_id");
  const std::size_t n_col = table.column("n_students");
  std::vector<std::size_t> feature_cols, raw_cols;
  for (const ColumnInfo& info : design.columns) {
    feature_cols.push_back(table.column(info.name));
    raw_cols.push_back(table.column("raw_" + info.name));
  }
  design.rows.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    SchoolFeatureRow r;
    r.school_id = row[id_col];
    r.n_students = static_cast<std::uint32_t>(csv::parse_int(row[n_col]));
    r.features.reserve(feature_cols.size());
    r.raw_means.reserve(raw_cols.size());
    for (std::size_t c = 0; c < feature_cols.size(); ++c) {
      r.features.push_back(csv::parse_double(row[feature_cols[c]]));
      r.raw_means.push_back(csv::parse_double(row[raw_cols[c]]));
    }
    design.rows.push_back(std::move(r));
  }
  return design;
}

StudentDesignInfo build_student_design_info(const PopulationSnapshot& pop) {
  StudentDesignInfo info;
  for (std::size_t c = 0; c < kNumStudentCovariates; ++c) {
    std::size_t n_obs = 0;
    double sum = 0.0;
    std::size_t ones = 0;
    bool binary = true;
    for (const StudentUnit& student : pop.students) {
      const double v = student.covariates[c];
      if (is_missing(v)) continue;
      ++n_obs;
      sum += v;
      if (v == 1.0) ++ones;
      else if (v != 0.0) binary = false;
    }
    info.binary[c] = binary;
    const double mean = n_obs > 0 ? sum / static_cast<double>(n_obs) : 0.0;
    info.imputed_value[c] = binary ? (2 * ones > n_obs ? 1.0 : 0.0) : mean;
    if (binary) {
      info.mean[c] = 0.0;
      info.sd[c] = 1.0;
    } else {
      double var = 0.0;
      for (const StudentUnit& student : pop.students) {
        const double v = student.covariates[c];
        if (is_missing(v)) continue;
        var += (v - mean) * (v - mean);
      }
      var = n_obs > 1 ? var / static_cast<double>(n_obs - 1) : 0.0;
      info.mean[c] = mean;
      info.sd[c] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
  }
  return info;
}

double student_feature(const StudentDesignInfo& info, const StudentUnit& student,
                       std::size_t covariate) {
  double v = student.covariates[covariate];
  if (is_missing(v)) v = info.imputed_value[covariate];
  if (info.binary[covariate]) return v;
  return (v - info.mean[covariate]) / info.sd[covariate];
}

}  // namespace wsc
