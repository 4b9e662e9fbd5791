#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <sstream>

#include "mrtint/csv.hpp"
#include "mrtint/datamodel.hpp"
#include "mrtint/errors.hpp"

using namespace mrtint;

namespace {

Trajectory simple_trajectory(const std::string& id, int study, int t_count,
                             double prob = 0.5) {
  Trajectory traj;
  traj.participant_id = id;
  traj.study_indicator = study;
  for (int t = 1; t <= t_count; ++t) {
    TimePoint pt;
    pt.t = t;
    pt.covariates = {0.1 * t, -0.2 * t};
    pt.treatment = t % 2;
    pt.outcome = 1.0 + t;
    pt.prob_h = {prob};
    traj.points.push_back(pt);
  }
  return traj;
}

ModeratorConfig simple_config() {
  return ModeratorConfig::make(parse_feature_spec("1 + x1"),
                               parse_feature_spec("1 + x1 + x2"),
                               parse_feature_spec("1 + x1 + x2"),
                               parse_feature_spec("1 + x1 + x2"));
}

}  // namespace

TEST_CASE("eval_features basic terms") {
  auto spec = parse_feature_spec("1 + x1");
  auto out = eval_features(std::vector<double>{0.5, 2.0}, spec);
  CHECK(out == std::vector<double>{1.0, 0.5});

  spec = parse_feature_spec("1 + x1 + x2");
  out = eval_features(std::vector<double>{1.0, 2.0}, spec);
  CHECK(out == std::vector<double>{1.0, 1.0, 2.0});
}

TEST_CASE("eval_features products and powers") {
  // (intercept, x1, x1*x2, x3^3) at (2, 3, -1) -> (1, 2, 6, -1)
  auto spec = parse_feature_spec("1 + x1 + x1*x2 + x3^3");
  auto out = eval_features(std::vector<double>{2.0, 3.0, -1.0}, spec);
  CHECK(out == std::vector<double>{1.0, 2.0, 6.0, -1.0});
}

TEST_CASE("eval_features is pure and errors on missing index") {
  auto spec = parse_feature_spec("1 + x3");
  std::vector<double> cov{1.0, 2.0, 3.0};
  auto a = eval_features(cov, spec);
  auto b = eval_features(cov, spec);
  CHECK(a == b);  // bit identical
  CHECK_THROWS_AS(eval_features(std::vector<double>{1.0}, spec), DimensionError);
}

TEST_CASE("feature mini-language round trip and errors") {
  for (const char* text : {"1 + x1", "x1*x2 + x2^2", "1 + x1 + x1*x2 + x3^3"}) {
    auto spec = parse_feature_spec(text);
    auto again = parse_feature_spec(to_string(spec));
    CHECK(spec.terms == again.terms);
  }
  CHECK_THROWS_AS(parse_feature_spec(""), ConfigError);
  CHECK_THROWS_AS(parse_feature_spec("1 + 1"), ConfigError);  // two intercepts
  CHECK_THROWS_AS(parse_feature_spec("x0"), ConfigError);
  CHECK_THROWS_AS(parse_feature_spec("1 + y2"), ConfigError);
  CHECK_THROWS_AS(parse_feature_spec("x1 +"), ConfigError);
  CHECK(parse_feature_spec(" 1+ x1 * x2 ").terms ==
        parse_feature_spec("1+x1*x2").terms);
}

TEST_CASE("common prefix of f_r and f_s evaluates identically") {
  auto cfg = simple_config();
  CHECK(cfg.common_count == 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> cov{d(rng), d(rng)};
    auto fr = eval_features(cov, cfg.f_r);
    auto fs = eval_features(cov, cfg.f_s);
    for (int j = 0; j < cfg.common_count; ++j) CHECK(fr[j] == fs[j]);
  }
}

TEST_CASE("moderator config rejects f_r not nested in f_s") {
  CHECK_THROWS_AS(ModeratorConfig::make(parse_feature_spec("1 + x3"),
                                        parse_feature_spec("1 + x1"),
                                        parse_feature_spec("1"),
                                        parse_feature_spec("1")),
                  ConfigError);
}

TEST_CASE("validate flags positivity violations") {
  auto traj = simple_trajectory("p1", 1, 3);
  traj.points[1].prob_h = {0.0};
  auto ds = make_dataset({traj, simple_trajectory("p2", 0, 3)});
  auto report = validate(ds, simple_config(), 0.01);
  REQUIRE(!report.ok());
  CHECK(report.violations[0].code == Violation::Code::positivity);
  CHECK(report.violations[0].participant_id == "p1");
  CHECK(report.violations[0].t == 2);
}

TEST_CASE("validate flags empty internal study") {
  auto ds = make_dataset({simple_trajectory("p1", 0, 3)});
  auto report = validate(ds, simple_config());
  REQUIRE(!report.ok());
  CHECK(report.violations[0].code == Violation::Code::empty_internal_study);
}

TEST_CASE("validate passes well-formed data") {
  auto ds = make_dataset(
      {simple_trajectory("p1", 1, 3), simple_trajectory("p2", 0, 3)});
  CHECK(validate(ds, simple_config()).ok());
}

TEST_CASE("validate flags non-monotone time") {
  auto traj = simple_trajectory("p1", 1, 3);
  traj.points[2].t = 1;
  auto ds = make_dataset({traj});
  auto report = validate(ds, simple_config());
  bool found = false;
  for (const auto& v : report.violations)
    found |= v.code == Violation::Code::non_monotone_time;
  CHECK(found);
}

TEST_CASE("dataset csv round trip") {
  auto ds = make_dataset(
      {simple_trajectory("p1", 1, 3, 0.4), simple_trajectory("p2", 0, 2, 0.6)});
  std::ostringstream os;
  write_dataset_csv(os, ds);
  std::istringstream is(os.str());
  auto back = read_dataset_csv(is);
  REQUIRE(back.trajectories.size() == 2);
  CHECK(back.n1 == 1);
  CHECK(back.n0 == 1);
  CHECK(back.trajectories[0].points[2].outcome == ds.trajectories[0].points[2].outcome);
  CHECK(back.trajectories[1].points[0].prob_h[0] == 0.6);

  std::ostringstream os2;
  write_dataset_csv(os2, back);
  CHECK(os.str() == os2.str());
}

TEST_CASE("dataset csv names row and column on parse errors") {
  std::istringstream is(
      "participant_id,study,t,x1,a,y\n"
      "p1,1,1,0.5,0,abc\n");
  try {
    read_dataset_csv(is, "test.csv");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("'y'") != std::string::npos);
  }
}

TEST_CASE("dataset csv requires header") {
  std::istringstream is("");
  CHECK_THROWS_AS(read_dataset_csv(is), ValidationError);
  std::istringstream bad("participant_id,study,t,x1,a\np,1,1,0,0\n");
  CHECK_THROWS_AS(read_dataset_csv(bad), ValidationError);
}
