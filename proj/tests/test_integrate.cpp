#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mrtint/errors.hpp"
#include "mrtint/integrate.hpp"
#include "mrtint/sim.hpp"
#include "testutil.hpp"

using namespace mrtint;

namespace {

// Exactly linear outcome: y = 1 + 0.5 x1 + (a - 0.5)(2 + 1.5 x1), balanced
// treatment so every fitted centering probability is exactly one half.
CombinedDataset exact_linear_dataset(int n_internal, int n_external) {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> d;
  std::vector<Trajectory> trajs;
  int counter = 0;
  auto push = [&](int count, int study) {
    for (int i = 0; i < count; ++i) {
      Trajectory traj;
      traj.participant_id = (study ? "i" : "e") + std::to_string(i);
      traj.study_indicator = study;
      for (int t = 1; t <= 2; ++t) {
        TimePoint pt;
        pt.t = t;
        const double x1 = d(rng), x2 = d(rng);
        const int a = (counter++) % 2;
        pt.covariates = {x1, x2};
        pt.treatment = a;
        pt.outcome = 1.0 + 0.5 * x1 + (a - 0.5) * (2.0 + 1.5 * x1);
        pt.prob_h = {0.5};
        traj.points.push_back(pt);
      }
      trajs.push_back(std::move(traj));
    }
  };
  push(n_internal, 1);
  push(n_external, 0);
  return make_dataset(std::move(trajs));
}

ModeratorConfig small_config() {
  return ModeratorConfig::make(
      parse_feature_spec("1 + x1"), parse_feature_spec("1 + x1"),
      parse_feature_spec("1 + x1 + x2"), parse_feature_spec("1 + x1"));
}

double rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() /
         std::max(1e-300, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("estimate_gamma with f_s = f_r is the identity layout") {
  auto ds = exact_linear_dataset(40, 10);
  auto gamma = estimate_gamma(ds, small_config());
  CHECK(gamma.c == 2);
  CHECK((gamma.gamma - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() ==
        0.0);
}

TEST_CASE("estimate_gamma regresses a constant column exactly") {
  // f_s = (1, x1, const 5): third column has gamma = (5, 0)
  auto ds = exact_linear_dataset(60, 10);
  for (auto& traj : ds.trajectories)
    for (auto& pt : traj.points) pt.covariates.push_back(5.0);
  ds.covariate_dim = 3;
  auto config = ModeratorConfig::make(
      parse_feature_spec("1 + x1"), parse_feature_spec("1 + x1 + x3"),
      parse_feature_spec("1 + x1 + x2"), parse_feature_spec("1 + x1"));
  auto gamma = estimate_gamma(ds, config);
  CHECK(gamma.gamma(0, 2) == doctest::Approx(5.0).epsilon(1e-10));
  CHECK(gamma.gamma(1, 2) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("estimate_gamma recovers the conditional mean of x2 given x1") {
  SimConfig config;
  config.n1 = 4000;
  config.n0 = 10;
  auto ds = generate_combined(config, 3);
  auto gamma = estimate_gamma(ds, sim_moderator_config());
  // E[X2 | X1] = 1 - X1 in the internal study
  CHECK(std::abs(gamma.gamma(0, 2) - 1.0) <= 0.05);
  CHECK(std::abs(gamma.gamma(1, 2) + 1.0) <= 0.05);
}

TEST_CASE("A-WCLS and P-WCLS coincide estimate and covariance") {
  SimConfig config;
  config.n1 = 100;
  config.n0 = 100;
  for (int rep = 0; rep < 5; ++rep) {
    auto ds = generate_combined(config, rep);
    auto mod = sim_moderator_config();
    auto a = awcls(ds, mod);
    auto p = pwcls(ds, mod);
    CHECK((a.beta_r - p.beta_r).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(rel_diff(a.covariance, p.covariance) <= 1e-6);
  }
}

TEST_CASE("with f_s = f_r both A-WCLS and P-WCLS return beta_s") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> unif;
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 200; ++i) {
    Trajectory traj;
    traj.participant_id = "p" + std::to_string(i);
    traj.study_indicator = i < 100 ? 1 : 0;
    for (int t = 1; t <= 3; ++t) {
      TimePoint pt;
      pt.t = t;
      const double x = d(rng);
      const int a = unif(rng) < 0.5 ? 1 : 0;
      pt.covariates = {x, d(rng)};
      pt.treatment = a;
      pt.outcome = 0.3 * x + a * (1.0 - 0.5 * x) + d(rng);
      pt.prob_h = {0.5};
      traj.points.push_back(pt);
    }
    trajs.push_back(std::move(traj));
  }
  auto ds = make_dataset(std::move(trajs));
  auto config = small_config();  // f_s == f_r
  // the two stacked systems carry different parameter counts, so compare
  // without the n/(n-p) factor
  IntegrateOptions options;
  options.dof_adjust = false;
  auto a = awcls(ds, config, options);
  auto p = pwcls(ds, config, options);
  CHECK((a.beta_r - p.beta_r).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(rel_diff(a.covariance, p.covariance) <= 1e-9);

  // both equal the pooled shared-model coefficients themselves: projecting a
  // vector onto its own span
  WCLSSpec spec;
  spec.g = parse_feature_spec("1 + x1 + x2");
  spec.f_r = parse_feature_spec("1 + x1");
  spec.population = Population::all;
  auto shared = wcls_fit(ds, spec);
  CHECK((p.beta_r - shared.beta_r).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("zero-residual data make DR-internal identical to P-WCLS") {
  auto ds = exact_linear_dataset(80, 80);
  auto config = ModeratorConfig::make(
      parse_feature_spec("1"), parse_feature_spec("1 + x1"),
      parse_feature_spec("1 + x1"), parse_feature_spec("1 + x1"));
  auto dr = dr_internal(ds, config);
  auto p = pwcls(ds, config);
  CHECK((dr.beta_r - p.beta_r).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("ET-WCLS with a frozen zero tilt equals plain WCLS on external rows") {
  SimConfig config;
  config.n1 = 150;
  config.n0 = 150;
  config.external_same_distribution = true;
  auto ds = generate_combined(config, 11);
  auto mod = sim_moderator_config();

  // comparator: plain WCLS restricted to the external rows, centering with
  // the internal-study constant (the same source the tilted fit uses)
  const double pr_int = constant_pr(ds, 1, Population::internal).probs[0];
  WCLSSpec spec;
  spec.g = mod.g;
  spec.f_r = mod.f_r;
  spec.pr_source = WCLSSpec::PrSource::supplied;
  spec.pr_supplied = pr_int;
  spec.population = Population::external;
  auto plain = wcls_fit(ds, spec);

  IntegrateOptions frozen;
  frozen.fixed_omega = Eigen::VectorXd::Zero(mod.d.dim());
  auto et0 = etwcls(ds, mod, frozen);
  CHECK((et0.beta_r - plain.beta_r).cwiseAbs().maxCoeff() <= 1e-10);

  // free tilt on same-distribution data: omega is small and the estimate
  // moves by at most 10 |omega| scale
  auto et = etwcls(ds, mod);
  const double omega_norm = et.nuisance.omega.norm();
  const double scale = std::max(1.0, plain.beta_r.cwiseAbs().maxCoeff());
  CHECK((et.beta_r - plain.beta_r).cwiseAbs().maxCoeff() <=
        10.0 * omega_norm * scale);
}

TEST_CASE("external proportion is stacked and equals n1/n") {
  SimConfig config;
  config.n1 = 120;
  config.n0 = 120;
  auto ds = generate_combined(config, 2);
  auto out = dr_external(ds, sim_moderator_config());
  CHECK(out.nuisance.pi == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.se.minCoeff() > 0.0);
}

TEST_CASE("DR-WCLS standard errors undercut both constituent equations") {
  SimConfig config;
  config.n1 = 1600;
  config.n0 = 1600;
  config.external_same_distribution = true;
  auto ds = generate_combined(config, 21);
  auto mod = sim_moderator_config();
  auto combined = drwcls(ds, mod);
  REQUIRE(combined.constituents.size() == 2);
  for (int i = 0; i < 2; ++i) {
    const double se_int = std::sqrt(combined.constituents[0].covariance(i, i));
    const double se_ext = std::sqrt(combined.constituents[1].covariance(i, i));
    CHECK(combined.se[i] <= std::min(se_int, se_ext) * 1.05);
  }
}

TEST_CASE("PET-WCLS reports its three constituents") {
  SimConfig config;
  config.n1 = 200;
  config.n0 = 200;
  auto ds = generate_combined(config, 5);
  auto out = petwcls(ds, sim_moderator_config());
  REQUIRE(out.constituents.size() == 3);
  CHECK(out.constituents[0].name == "WCLS-Internal");
  CHECK(out.constituents[1].name == "P-WCLS");
  CHECK(out.constituents[2].name == "ET-WCLS-Raw");
  CHECK(out.se.minCoeff() > 0.0);
  // the meta-estimate lands inside the hull spanned by the constituents on
  // each component up to estimation noise in the weights
  for (int i = 0; i < 2; ++i) {
    double lo = 1e300, hi = -1e300;
    for (const auto& c : out.constituents) {
      lo = std::min(lo, c.beta[i]);
      hi = std::max(hi, c.beta[i]);
    }
    CHECK(out.beta_r[i] >= lo - 2.0);
    CHECK(out.beta_r[i] <= hi + 2.0);
  }
}

TEST_CASE("integration estimators demand a nonempty external study") {
  SimConfig config;
  config.n1 = 50;
  config.n0 = 0;
  auto ds = generate_combined(config, 1);
  auto mod = sim_moderator_config();
  CHECK_THROWS_AS(etwcls(ds, mod), ValidationError);
  CHECK_THROWS_AS(drwcls(ds, mod), ValidationError);
  CHECK_THROWS_AS(pwcls(ds, mod), ValidationError);  // pooled variant
  IntegrateOptions internal_only;
  internal_only.beta_s_pooled = false;
  CHECK_NOTHROW(pwcls(ds, mod, internal_only));
}

TEST_CASE("P-WCLS-Internal tracks WCLS-Internal without external data") {
  SimConfig config;
  config.n1 = 400;
  config.n0 = 0;
  auto mod = sim_moderator_config();
  IntegrateOptions internal_only;
  internal_only.beta_s_pooled = false;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  const int reps = 60;
  for (int rep = 0; rep < reps; ++rep) {
    auto ds = generate_combined(config, rep);
    sum += pwcls(ds, mod, internal_only).beta_r;
  }
  Eigen::Vector2d avg = sum / reps;
  CHECK(std::abs(avg[0] - (-2.0)) <= 0.35);
  CHECK(std::abs(avg[1] - 5.0) <= 0.35);
}

TEST_CASE("zero interaction block gives statistic zero and p-value one") {
  // the Wald statistic is b' V^{-1} b: identically zero coefficients give
  // statistic 0 whatever V, and the chi-square tail at 0 is 1
  CHECK(chi2_sf(0.0, 2) == 1.0);
  CHECK(chi2_sf(0.0, 6) == 1.0);
}

TEST_CASE("shared-effects test is sane on shared-effects data") {
  SimConfig config;
  config.n1 = 150;
  config.n0 = 150;
  auto ds = generate_combined(config, 31);
  auto test = shared_effects_test(ds, sim_moderator_config());
  CHECK(test.dof == 3);
  CHECK(test.statistic >= 0.0);
  CHECK(test.p_value > 0.0);
  CHECK(test.p_value <= 1.0);
}

TEST_CASE("shared-effects test has power against an injected study shift") {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> unif;
  int rejections = 0;
  const int reps = 50;
  for (int rep = 0; rep < reps; ++rep) {
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 240; ++i) {
      Trajectory traj;
      traj.participant_id = "p" + std::to_string(i);
      const int study = i < 120 ? 1 : 0;
      traj.study_indicator = study;
      for (int t = 1; t <= 10; ++t) {
        TimePoint pt;
        pt.t = t;
        const double x = d(rng);
        const int a = unif(rng) < 0.5 ? 1 : 0;
        pt.covariates = {x, d(rng)};
        pt.treatment = a;
        // the external study's effect is shifted by 2.0 on the intercept
        pt.outcome = 0.4 * x + a * (1.0 + 0.5 * x + (study ? 0.0 : 2.0)) + d(rng);
        pt.prob_h = {0.5};
        traj.points.push_back(pt);
      }
      trajs.push_back(std::move(traj));
    }
    auto ds = make_dataset(std::move(trajs));
    auto config = ModeratorConfig::make(
        parse_feature_spec("1 + x1"), parse_feature_spec("1 + x1"),
        parse_feature_spec("1 + x1 + x2"), parse_feature_spec("1 + x1"));
    auto test = shared_effects_test(ds, config);
    rejections += test.p_value < 0.05 ? 1 : 0;
  }
  CHECK(rejections >= reps * 8 / 10);
}

TEST_CASE("every table method produces finite estimates on one dataset") {
  SimConfig config;
  config.n1 = 120;
  config.n0 = 120;
  config.T = 8;
  auto ds = generate_combined(config, 13);
  auto mod = sim_moderator_config();
  IntegrateOptions opt;
  auto labels = all_methods();
  labels.push_back("A-WCLS");
  labels.push_back("ET-WCLS-Raw");
  labels.push_back("DR-WCLS-Internal");
  labels.push_back("DR-WCLS-External");
  for (const auto& label : labels) {
    auto out = run_method(label, ds, mod, opt);
    CHECK(out.beta_r.allFinite());
    CHECK(out.se.minCoeff() > 0.0);
    CHECK(out.covariance.rows() == 2);
    // covariance symmetric positive semidefinite
    CHECK((out.covariance - out.covariance.transpose()).cwiseAbs().maxCoeff() <=
          1e-12 * out.covariance.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("vanishing study overlap triggers the extreme-weight warning") {
  SimConfig config;
  config.n1 = 60;
  config.n0 = 60;
  config.T = 4;
  auto ds = generate_combined(config, 17);
  auto mod = sim_moderator_config();
  IntegrateOptions opt;
  // fabricated log ratio: a handful of external rows dominate all others
  int counter = 0;
  opt.oracle_log_ratio = [&counter](std::span<const double>) mutable {
    return (counter++ % 97 == 0) ? 12.0 : -3.0;
  };
  auto out = etwcls(ds, mod, opt);
  REQUIRE(!out.nuisance.warnings.empty());
  CHECK(out.nuisance.warnings[0].find("extreme") != std::string::npos);
}

TEST_CASE("chi-square tail probabilities") {
  CHECK(chi2_sf(0.0, 3) == doctest::Approx(1.0));
  CHECK(chi2_sf(7.814727903, 3) == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(chi2_sf(3.841458821, 1) == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(chi2_sf(18.307038, 10) == doctest::Approx(0.05).epsilon(1e-5));
}

TEST_CASE("analytic Jacobians of every stacked block match finite differences") {
  SimConfig config;
  config.n1 = 25;
  config.n0 = 25;
  config.T = 6;
  auto ds = generate_combined(config, 7);
  auto mod = sim_moderator_config();

  // joint PET-style system exercises every analytic block at once
  auto rows = std::make_shared<RowData>(flatten(ds));
  StackedSystem system(rows);
  auto g = std::make_shared<RowMat>(rows->features(mod.g));
  auto fr = std::make_shared<RowMat>(rows->features(mod.f_r));
  auto fs = std::make_shared<RowMat>(rows->features(mod.f_s));
  auto dd = std::make_shared<RowMat>(rows->features(mod.d));

  auto* ps = system.add<ConstantProbBlock>("p_s", rows.get(), Population::all, 1, 0);
  auto* pr = system.add<ConstantProbBlock>("p_r", rows.get(),
                                           Population::internal, 1, 0);
  auto* omega = system.add<DensityRatioBlock>("omega", rows.get(), dd, 1.0, 0);
  auto* pi = system.add<ProportionBlock>("pi", rows.get(), 0);
  auto* wcls_int = system.add<WclsBlock>(
      "wcls_int", rows.get(), g, fr, ProbRef::constant(pr), ProbRef::supplied(),
      rows->internal_row, RatioRef::none(), 1);
  auto* wcls_s = system.add<WclsBlock>(
      "wcls_s", rows.get(), g, fs, ProbRef::constant(ps), ProbRef::supplied(),
      population_mask(*rows, Population::all), RatioRef::none(), 1);
  auto* wcls_et = system.add<WclsBlock>(
      "wcls_et", rows.get(), g, fr, ProbRef::constant(pr), ProbRef::supplied(),
      population_mask(*rows, Population::external), RatioRef::omega(omega), 1);
  auto* proj = system.add<ProjectionBlock>(
      "proj", rows.get(), fr, fs, ProbRef::constant(pr), rows->internal_row, -1,
      wcls_s->beta_offset(), wcls_s->beta_dim(), 2);
  auto* gcol = system.add<ProjectionBlock>(
      "gamma", rows.get(), fr, fs, ProbRef::constant(pr), rows->internal_row, 2,
      0, 0, 2);
  SharedModelRef sref;
  sref.g = g;
  sref.fs = fs;
  sref.alpha_offset = wcls_s->alpha_offset();
  sref.alpha_dim = wcls_s->alpha_dim();
  sref.beta_s_offset = wcls_s->beta_offset();
  sref.beta_s_dim = wcls_s->beta_dim();
  sref.ps = ProbRef::constant(ps);
  auto* dri = system.add<DrInternalBlock>("dr_int", rows.get(), fr, sref,
                                          ProbRef::constant(pr),
                                          ProbRef::supplied(), 2);
  auto* dre = system.add<DrExternalBlock>("dr_ext", rows.get(), fr, sref,
                                          ProbRef::constant(pr),
                                          ProbRef::supplied(),
                                          RatioRef::omega(omega), pi, 2);

  Eigen::VectorXd theta = system.solve();
  std::mt19937_64 rng(71);
  std::normal_distribution<double> jitter(0.0, 0.05);

  const std::vector<const EquationBlock*> blocks{
      ps, pr, omega, pi, wcls_int, wcls_s, wcls_et, proj, gcol, dri, dre};
  int probes = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd probe = theta;
    if (trial > 0)
      for (int i = 0; i < probe.size(); ++i) probe[i] += jitter(rng);
    for (const auto* blk : blocks) {
      REQUIRE(blk->has_analytic_jacobian());
      Eigen::MatrixXd analytic =
          Eigen::MatrixXd::Zero(blk->dim(), system.theta_dim());
      blk->mean_jacobian(probe, analytic);
      Eigen::MatrixXd fd = system.fd_mean_jacobian_block(*blk, probe);
      const double scale = std::max(1.0, analytic.cwiseAbs().maxCoeff());
      worst = std::max(worst, (analytic - fd).cwiseAbs().maxCoeff() / scale);
      ++probes;
    }
  }
  CHECK(probes >= 100);
  CHECK(worst <= 1e-4);
}
