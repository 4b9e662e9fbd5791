#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mrtint/errors.hpp"
#include "mrtint/sim.hpp"
#include "mrtint/wcls.hpp"
#include "testutil.hpp"

using namespace mrtint;

namespace {

WCLSSpec supplied_spec(double pr, Population pop = Population::internal) {
  WCLSSpec spec;
  spec.g = parse_feature_spec("1");
  spec.f_r = parse_feature_spec("1");
  spec.pr_source = WCLSSpec::PrSource::supplied;
  spec.pr_supplied = pr;
  spec.population = pop;
  return spec;
}

// simple moderated outcome with optional treatment effect
CombinedDataset simulate_simple(std::mt19937_64& rng, int n, int T,
                                double effect_intercept, double effect_slope,
                                double ph = 0.5) {
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> unif;
  std::vector<Trajectory> trajs;
  for (int i = 0; i < n; ++i) {
    Trajectory traj;
    traj.participant_id = "p" + std::to_string(i);
    traj.study_indicator = 1;
    for (int t = 1; t <= T; ++t) {
      TimePoint pt;
      pt.t = t;
      const double x = d(rng);
      const int a = unif(rng) < ph ? 1 : 0;
      pt.covariates = {x};
      pt.treatment = a;
      pt.outcome = 1.0 + 0.5 * x + a * (effect_intercept + effect_slope * x) + d(rng);
      pt.prob_h = {ph};
      traj.points.push_back(pt);
    }
    trajs.push_back(std::move(traj));
  }
  return make_dataset(std::move(trajs));
}

}  // namespace

TEST_CASE("wcls_weight arithmetic") {
  CHECK(wcls_weight(0.5, 0.8, 1) == doctest::Approx(0.625));
  CHECK(wcls_weight(0.5, 0.2, 0) == doctest::Approx(0.625));
  CHECK(wcls_weight(0.37, 0.37, 1) == doctest::Approx(1.0));
  CHECK(wcls_weight(0.37, 0.37, 0) == doctest::Approx(1.0));
}

TEST_CASE("wcls on binary data reduces to the difference in means") {
  auto ds = testutil::binary_dataset({1.0, 3.0, 0.0, 2.0}, {1, 1, 0, 0},
                                     {0.5, 0.5, 0.5, 0.5},
                                     {{0.0}, {0.0}, {0.0}, {0.0}});
  auto fit = wcls_fit(ds, supplied_spec(0.5));
  CHECK(fit.beta_r[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(fit.alpha[0] == doctest::Approx(1.5).epsilon(1e-10));
  CHECK(fit.sigma_r_sq() == doctest::Approx(0.25));
}

TEST_CASE("unit weights make wcls exactly unweighted centered least squares") {
  std::mt19937_64 rng(3);
  auto ds = simulate_simple(rng, 50, 4, 0.7, -0.3, 0.7);
  WCLSSpec spec = supplied_spec(0.7);
  spec.g = parse_feature_spec("1 + x1");
  spec.f_r = parse_feature_spec("1 + x1");
  auto fit = wcls_fit(ds, spec);  // p_r = p_h = 0.7 pointwise -> W = 1

  auto rows = flatten(ds);
  RowMat design(rows.n_rows, 4);
  for (int r = 0; r < rows.n_rows; ++r) {
    const double c = rows.a[r] - 0.7;
    design.row(r) << 1.0, rows.x(r, 0), c, c * rows.x(r, 0);
  }
  Eigen::VectorXd ls =
      (design.transpose() * design).ldlt().solve(design.transpose() * rows.y);
  CHECK(fit.alpha[0] == doctest::Approx(ls[0]).epsilon(1e-12));
  CHECK(fit.alpha[1] == doctest::Approx(ls[1]).epsilon(1e-12));
  CHECK(fit.beta_r[0] == doctest::Approx(ls[2]).epsilon(1e-12));
  CHECK(fit.beta_r[1] == doctest::Approx(ls[3]).epsilon(1e-12));
}

TEST_CASE("zero treatment effect stays inside three standard errors") {
  std::mt19937_64 rng(11);
  int inside = 0;
  const int reps = 200;
  for (int rep = 0; rep < reps; ++rep) {
    auto ds = simulate_simple(rng, 2000 / 4, 4, 0.0, 0.0);
    WCLSSpec spec = supplied_spec(0.5);
    spec.g = parse_feature_spec("1 + x1");
    spec.f_r = parse_feature_spec("1 + x1");
    auto fit = wcls_fit(ds, spec);
    const bool ok = std::abs(fit.beta_r[0]) <= 3.0 * fit.beta_se[0] &&
                    std::abs(fit.beta_r[1]) <= 3.0 * fit.beta_se[1];
    inside += ok ? 1 : 0;
  }
  CHECK(inside >= reps * 99 / 100);
}

TEST_CASE("constant-fit p_r matches the sample proportion and stacks") {
  std::mt19937_64 rng(7);
  auto ds = simulate_simple(rng, 300, 4, 0.4, 0.0, 0.6);
  WCLSSpec spec;
  spec.g = parse_feature_spec("1 + x1");
  spec.f_r = parse_feature_spec("1");
  spec.pr_source = WCLSSpec::PrSource::constant_fit;
  auto fit = wcls_fit(ds, spec);
  auto pr = constant_pr(ds, 1, Population::internal);
  CHECK(fit.pr_constant == doctest::Approx(pr.probs[0]).epsilon(1e-10));
  CHECK(fit.sigma_r_sq() > 0.0);
  CHECK(fit.sigma_r_sq() <= 0.25);
  CHECK(fit.beta_se[0] > 0.0);
}

TEST_CASE("misspecified outcome model still recovers the effect at n=6400") {
  SimConfig config;
  config.n1 = 6400;
  config.n0 = 0;
  config.reps = 300;
  config.seed = 99;
  config.methods = {"WCLS-Internal"};
  auto result = run_monte_carlo(config);
  REQUIRE(result.metrics.size() == 2);
  CHECK(std::abs(result.metrics[0].avg_estimate - (-2.0)) <= 0.05);
  CHECK(std::abs(result.metrics[1].avg_estimate - 5.0) <= 0.05);
}

TEST_CASE("an extra outcome-model column leaves the effect consistent") {
  SimConfig config;
  config.n1 = 800;
  config.n0 = 0;
  const int reps = 100;
  auto mod = sim_moderator_config();
  ModeratorConfig wide = ModeratorConfig::make(
      mod.f_r, mod.f_s, parse_feature_spec("1 + x1 + x2 + x3 + x3^2"), mod.d);
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sumsq = Eigen::Vector2d::Zero();
  for (int rep = 0; rep < reps; ++rep) {
    auto ds = generate_combined(config, rep);
    auto out = wcls_estimator(ds, wide, Population::internal);
    sum += out.beta_r;
    sumsq += out.beta_r.cwiseProduct(out.beta_r);
  }
  for (int i = 0; i < 2; ++i) {
    const double avg = sum[i] / reps;
    const double var = (sumsq[i] - reps * avg * avg) / (reps - 1);
    const double mcse = std::sqrt(var / reps);
    CHECK(std::abs(avg - true_beta_r(true)[i]) <= 3.0 * mcse);
  }
}

TEST_CASE("estimated treatment model reproduces the supplied-probability fit") {
  SimConfig config;
  config.n1 = 500;
  config.n0 = 0;
  auto ds = generate_combined(config, 8);
  WCLSSpec spec;
  spec.g = parse_feature_spec("1 + x1 + x2 + x3");
  spec.f_r = parse_feature_spec("1 + x1");
  auto supplied = wcls_fit(ds, spec);

  spec.ph_source = WCLSSpec::PhSource::logistic_fit;
  spec.ph_spec = parse_feature_spec("1 + x1 + x2 + x3");  // the true model
  auto estimated = wcls_fit(ds, spec);
  // same estimand, nearly identical estimates at this sample size
  CHECK((supplied.beta_r - estimated.beta_r).cwiseAbs().maxCoeff() <= 0.2);
  CHECK(estimated.beta_se.minCoeff() > 0.0);
}

TEST_CASE("multilevel with one level reproduces binary wcls exactly") {
  std::mt19937_64 rng(13);
  auto ds = simulate_simple(rng, 120, 5, 0.8, 0.2, 0.45);
  WCLSSpec spec;
  spec.g = parse_feature_spec("1 + x1");
  spec.f_r = parse_feature_spec("1 + x1");
  spec.pr_source = WCLSSpec::PrSource::constant_fit;
  auto binary = wcls_fit(ds, spec);
  auto multi = wcls_fit_multilevel(ds, {parse_feature_spec("1 + x1")},
                                   parse_feature_spec("1 + x1"), spec);
  CHECK((multi.beta[0] - binary.beta_r).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((multi.joint_covariance - binary.beta_covariance).cwiseAbs().maxCoeff() <=
        1e-10 * binary.beta_covariance.cwiseAbs().maxCoeff());
}

TEST_CASE("three-arm oracle simulation recovers the per-level effects") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> unif;
  std::vector<Trajectory> trajs;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    Trajectory traj;
    traj.participant_id = "p" + std::to_string(i);
    traj.study_indicator = 1;
    for (int t = 1; t <= 4; ++t) {
      TimePoint pt;
      pt.t = t;
      const double x = d(rng);
      const double u = unif(rng);
      const int a = u < 0.4 ? 0 : (u < 0.7 ? 1 : 2);
      pt.covariates = {x};
      pt.treatment = a;
      pt.outcome = 0.5 + 0.3 * x + (a == 1 ? 1.0 : 0.0) + (a == 2 ? 2.0 : 0.0) + d(rng);
      pt.prob_h = {0.3, 0.3};
      traj.points.push_back(pt);
    }
    trajs.push_back(std::move(traj));
  }
  auto ds = make_dataset(std::move(trajs), 2);
  WCLSSpec spec;
  spec.g = parse_feature_spec("1 + x1");
  auto fit = wcls_fit_multilevel(
      ds, {parse_feature_spec("1"), parse_feature_spec("1")},
      parse_feature_spec("1 + x1"), spec);
  CHECK(std::abs(fit.beta[0][0] - 1.0) <= 0.1);
  CHECK(std::abs(fit.beta[1][0] - 2.0) <= 0.1);
}

TEST_CASE("multilevel zero-effect three-arm estimates stay within three SEs") {
  std::mt19937_64 rng(19);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> unif;
  int inside = 0;
  const int reps = 120;
  for (int rep = 0; rep < reps; ++rep) {
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 300; ++i) {
      Trajectory traj;
      traj.participant_id = "p" + std::to_string(i);
      traj.study_indicator = 1;
      for (int t = 1; t <= 4; ++t) {
        TimePoint pt;
        pt.t = t;
        const double x = d(rng);
        const double u = unif(rng);
        pt.covariates = {x};
        pt.treatment = u < 0.4 ? 0 : (u < 0.7 ? 1 : 2);
        pt.outcome = 0.5 + 0.3 * x + d(rng);
        pt.prob_h = {0.3, 0.3};
        traj.points.push_back(pt);
      }
      trajs.push_back(std::move(traj));
    }
    auto ds = make_dataset(std::move(trajs), 2);
    WCLSSpec spec;
    spec.g = parse_feature_spec("1 + x1");
    auto fit = wcls_fit_multilevel(
        ds, {parse_feature_spec("1"), parse_feature_spec("1")},
        parse_feature_spec("1 + x1"), spec);
    const double se1 = std::sqrt(fit.joint_covariance(0, 0));
    const double se2 = std::sqrt(fit.joint_covariance(1, 1));
    inside += std::abs(fit.beta[0][0]) <= 3.0 * se1 &&
                      std::abs(fit.beta[1][0]) <= 3.0 * se2
                  ? 1
                  : 0;
  }
  CHECK(inside >= reps * 99 / 100);
}

TEST_CASE("multilevel requires every level observed") {
  std::mt19937_64 rng(23);
  auto ds = simulate_simple(rng, 40, 3, 0.0, 0.0);  // binary data only
  WCLSSpec spec;
  spec.g = parse_feature_spec("1");
  CHECK_THROWS_AS(
      wcls_fit_multilevel(ds, {parse_feature_spec("1"), parse_feature_spec("1")},
                          parse_feature_spec("1"), spec),
      UnobservedLevelError);
}
