#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "wsc/errors.hpp"
#include "wsc/synthpop.hpp"

using namespace wsc;

namespace {

ScenarioConfig small_config() {
  ScenarioConfig c;
  c.n_schools = 120;
  c.students_per_school_mean = 25.0;
  c.students_per_school_dispersion = 6.0;
  c.n_trial_controls = 8;
  c.outcome_icc = 0.2;
  c.selection_coefficients = {0.4, 0.3, 0.5, 0.2, 0.3, 0.25};
  c.hidden_confounder_strength = 0.0;
  c.missingness_rate = 0.02;
  c.rng_seed = 424242;
  c.selection_base_rate = 0.25;
  return c;
}

bool same_population(const PopulationSnapshot& a, const PopulationSnapshot& b) {
  if (a.schools.size() != b.schools.size() || a.students.size() != b.students.size()) return false;
  for (std::size_t j = 0; j < a.schools.size(); ++j) {
    const SchoolUnit& x = a.schools[j];
    const SchoolUnit& y = b.schools[j];
    if (x.school_id != y.school_id || x.selected != y.selected || x.treated != y.treated)
      return false;
    if (std::memcmp(x.covariates.data(), y.covariates.data(), sizeof x.covariates) != 0)
      return false;
    if (x.history.size() != y.history.size()) return false;
    for (std::size_t h = 0; h < x.history.size(); ++h) {
      if (x.history[h].offset != y.history[h].offset ||
          std::memcmp(&x.history[h].mean_score, &y.history[h].mean_score, sizeof(double)) != 0 ||
          std::memcmp(&x.history[h].grade_share, &y.history[h].grade_share, sizeof(double)) != 0)
        return false;
    }
  }
  for (std::size_t s = 0; s < a.students.size(); ++s) {
    if (std::memcmp(a.students[s].covariates.data(), b.students[s].covariates.data(),
                    sizeof a.students[s].covariates) != 0)
      return false;
    if (std::memcmp(a.students[s].outcomes.data(), b.students[s].outcomes.data(),
                    sizeof a.students[s].outcomes) != 0)
      return false;
  }
  return std::memcmp(a.true_bias.data(), b.true_bias.data(), sizeof a.true_bias) == 0;
}

}  // namespace

TEST_CASE("scenario validation names the offending field") {
  ScenarioConfig c = small_config();
  c.n_schools = 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_schools"), ConfigError);
  c = small_config();
  c.outcome_icc = 1.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("outcome_icc"), ConfigError);
  c = small_config();
  c.outcome_icc = 0.01;  // below the covariate between-school share
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("outcome_icc"), ConfigError);
  c = small_config();
  c.selection_coefficients.assign(7, 0.1);
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("selection_coefficients"), ConfigError);
  c = small_config();
  c.missingness_rate = 0.5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("missingness_rate"), ConfigError);
  c = small_config();
  c.n_trial_controls = 120;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_trial_controls"), ConfigError);
}

TEST_CASE("scenario configs round-trip through json") {
  const ScenarioConfig c = small_config();
  const ScenarioConfig back = ScenarioConfig::from_json(c.to_json());
  CHECK(back.n_schools == c.n_schools);
  CHECK(back.selection_coefficients == c.selection_coefficients);
  CHECK(back.rng_seed == c.rng_seed);
  CHECK(back.missingness_rate == c.missingness_rate);
  CHECK(back.selection_base_rate == c.selection_base_rate);
}

TEST_CASE("generation is deterministic and thread-count invariant") {
  const ScenarioConfig c = small_config();
  const PopulationSnapshot one = generate_population(c, 1);
  const PopulationSnapshot again = generate_population(c, 1);
  const PopulationSnapshot four = generate_population(c, 4);
  CHECK(same_population(one, again));
  CHECK(same_population(one, four));

  ScenarioConfig other = c;
  other.rng_seed = c.rng_seed + 1;
  CHECK_FALSE(same_population(one, generate_population(other, 1)));
}

TEST_CASE("school and student bookkeeping is consistent") {
  const PopulationSnapshot pop = generate_population(small_config(), 1);
  REQUIRE(pop.schools.size() == 120);
  std::size_t covered = 0;
  std::set<std::string> ids;
  for (const SchoolUnit& school : pop.schools) {
    CHECK(school.first_student == covered);
    CHECK(school.n_students >= 2);
    for (std::uint32_t s = 0; s < school.n_students; ++s) {
      CHECK(pop.students[school.first_student + s].school_index ==
            pop.school_index(school.school_id));
    }
    covered += school.n_students;
    ids.insert(school.school_id);
  }
  CHECK(covered == pop.students.size());
  CHECK(ids.size() == pop.schools.size());

  // Rurality indicators are mutually exclusive.
  for (const StudentUnit& student : pop.students) {
    const double r = student.covariates[4] + student.covariates[5] + student.covariates[6];
    CHECK((r == 0.0 || r == 1.0));
  }
}

TEST_CASE("selection hits the requested base rate approximately") {
  ScenarioConfig c = small_config();
  c.n_schools = 2000;
  c.missingness_rate = 0.0;
  const PopulationSnapshot pop = generate_population(c, 0);
  std::size_t selected = 0;
  for (const SchoolUnit& s : pop.schools) selected += s.selected ? 1 : 0;
  const double rate = static_cast<double>(selected) / 2000.0;
  CHECK(rate > 0.18);
  CHECK(rate < 0.32);
}

TEST_CASE("raw group gap equals the stored ground truth exactly") {
  ScenarioConfig c = small_config();
  c.hidden_confounder_strength = -0.3;
  c.missingness_rate = 0.0;
  const PopulationSnapshot pop = generate_population(c, 1);
  for (int k = 0; k < kNumOutcomes; ++k) {
    double sel_sum = 0.0, pool_sum = 0.0;
    std::size_t sel_n = 0, pool_n = 0;
    for (const StudentUnit& student : pop.students) {
      const bool sel = pop.schools[student.school_index].selected;
      (sel ? sel_sum : pool_sum) += student.outcomes[static_cast<std::size_t>(k)];
      (sel ? sel_n : pool_n) += 1;
    }
    const double gap = sel_sum / static_cast<double>(sel_n) -
                       pool_sum / static_cast<double>(pool_n);
    const double expected = pop.true_bias[static_cast<std::size_t>(k)] +
                            pop.generative.x_component[static_cast<std::size_t>(k)];
    CHECK(gap == doctest::Approx(expected).epsilon(1e-9));
    CHECK(pop.true_bias[static_cast<std::size_t>(k)] == -0.3);
  }
}

TEST_CASE("hidden confounder injection shifts only the chosen outcomes") {
  const PopulationSnapshot pop = generate_population(small_config(), 1);
  const PopulationSnapshot shifted = inject_hidden_confounder(pop, -0.25, {Outcome::reading});
  CHECK(shifted.true_bias[0] == pop.true_bias[0]);
  CHECK(shifted.true_bias[1] == doctest::Approx(pop.true_bias[1] - 0.25).epsilon(1e-12));
  CHECK(shifted.true_bias[2] == pop.true_bias[2]);
  for (std::size_t s = 0; s < pop.students.size(); ++s) {
    const bool sel = pop.schools[pop.students[s].school_index].selected;
    const double want = sel ? pop.students[s].outcomes[1] - 0.25 : pop.students[s].outcomes[1];
    CHECK(shifted.students[s].outcomes[1] == doctest::Approx(want).epsilon(1e-12));
    CHECK(shifted.students[s].outcomes[0] == pop.students[s].outcomes[0]);
  }
  CHECK_THROWS_AS(static_cast<void>(inject_hidden_confounder(pop, 0.1, {})), ArgumentError);
}

TEST_CASE("trial draws come from the right frame and respect the unit") {
  const PopulationSnapshot pop = generate_population(small_config(), 1);
  const auto ct = draw_trial_controls(pop, 8, 99, SampleFrame::trial_controls, 0);
  REQUIRE(ct.size() == 8);
  std::set<std::string> seen;
  for (const std::string& id : ct) {
    const SchoolUnit& school = pop.schools[pop.school_index(id)];
    CHECK(school.selected);
    CHECK_FALSE(school.treated);
    seen.insert(id);
  }
  CHECK(seen.size() == 8);

  const auto ct_again = draw_trial_controls(pop, 8, 99, SampleFrame::trial_controls, 0);
  CHECK(ct == ct_again);
  const auto other_unit = draw_trial_controls(pop, 8, 99, SampleFrame::trial_controls, 1);
  CHECK(ct != other_unit);

  const auto placebo = draw_trial_controls(pop, 8, 99, SampleFrame::comparison_pool, 0);
  for (const std::string& id : placebo) CHECK_FALSE(pop.schools[pop.school_index(id)].selected);

  const auto treated = draw_trial_controls(pop, 5, 99, SampleFrame::trial_treated, 0);
  for (const std::string& id : treated) CHECK(pop.schools[pop.school_index(id)].treated);

  CHECK_THROWS_AS(
      static_cast<void>(draw_trial_controls(pop, 5000, 99, SampleFrame::trial_controls, 0)),
      ArgumentError);
}

TEST_CASE("populations survive a save and load round trip bit for bit") {
  const PopulationSnapshot pop = generate_population(small_config(), 1);
  const std::string dir =
      (std::filesystem::temp_directory_path() / "wsc_pop_roundtrip").string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_population(pop, dir);
  const PopulationSnapshot back = load_population(dir);
  CHECK(same_population(pop, back));
  CHECK(back.config.rng_seed == pop.config.rng_seed);
  CHECK(back.generative.sigma_alpha2 == pop.generative.sigma_alpha2);
  CHECK(back.generative.x_component[0] == pop.generative.x_component[0]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missingness produces NaN covariates at roughly the configured rate") {
  ScenarioConfig c = small_config();
  c.n_schools = 400;
  c.missingness_rate = 0.05;
  const PopulationSnapshot pop = generate_population(c, 0);
  std::size_t missing = 0;
  for (const StudentUnit& student : pop.students)
    missing += std::isnan(student.covariates[0]) ? 1 : 0;
  const double rate = static_cast<double>(missing) / static_cast<double>(pop.students.size());
  CHECK(rate > 0.03);
  CHECK(rate < 0.07);
}
