#include "mrtint/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <thread>

#include "mrtint/errors.hpp"
#include "mrtint/kernels.hpp"
#include "mrtint/propensity.hpp"

namespace mrtint {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr double kTDof = 10.0;

double t_log_density(double x, double mu, double scale) {
  const double z = (x - mu) / scale;
  return -std::log(scale) -
         0.5 * (kTDof + 1.0) * std::log1p(z * z / kTDof);
}

}  // namespace

Eigen::Vector2d true_beta_r(bool is_internal) {
  GenerativeTruth truth;
  return is_internal ? truth.beta_r_internal : truth.beta_r_external;
}

FeatureSpec default_d_spec() {
  return parse_feature_spec("1 + x1 + x2 + x1*x2 + x2^2", "d");
}

ModeratorConfig sim_moderator_config(const FeatureSpec& d_spec) {
  return ModeratorConfig::make(
      parse_feature_spec("1 + x1", "f_r"), parse_feature_spec("1 + x1 + x2", "f_s"),
      parse_feature_spec("1 + x1 + x2 + x3", "g"),
      d_spec.dim() > 0 ? d_spec : default_d_spec());
}

double sim_ph(double x1, double x2, double x3, bool is_internal) {
  const double lp = 0.2 + 0.3 * (is_internal ? 1.0 : 0.0) + 0.05 * x1 -
                    0.03 * x2 + 0.06 * x3;
  return 1.0 / (1.0 + std::exp(lp));
}

double sim_oracle_log_ratio(double x1, double x2) {
  return t_log_density(x2, 1.0 - x1, 3.0) - t_log_density(x2, 0.0, 2.7);
}

std::vector<Trajectory> generate_study(int n, bool is_internal, int T,
                                       std::uint64_t seed, const SimConfig& knobs) {
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> innovation(0.0, knobs.innovation_sd);
  std::student_t_distribution<double> t_dist(kTDof);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const double phi = knobs.ar_coefficient;
  const double stationary_sd =
      knobs.innovation_sd / std::sqrt(1.0 - phi * phi);
  std::normal_distribution<double> stationary(0.0, stationary_sd);

  std::vector<Trajectory> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Trajectory traj;
    traj.participant_id = (is_internal ? "int" : "ext") + std::to_string(i + 1);
    traj.study_indicator = is_internal ? 1 : 0;
    traj.points.reserve(T);
    double x1 = 0.0, eps = 0.0;
    for (int t = 1; t <= T; ++t) {
      x1 = t == 1 ? stationary(rng) : phi * x1 + innovation(rng);
      const bool internal_x2 = is_internal || knobs.external_same_distribution;
      const double x2 = internal_x2 ? (1.0 - x1) + 3.0 * t_dist(rng)
                                    : 2.7 * t_dist(rng);
      const double x3 = -1.0 + 0.5 * x1 - 0.8 * x2 + t_dist(rng);
      eps = t == 1 ? stationary(rng) : phi * eps + innovation(rng);

      const double ph = sim_ph(x1, x2, x3, is_internal);
      const int a = unif(rng) < ph ? 1 : 0;
      double effect = 1.0 + 2.0 * x1 - 3.0 * x2;
      if (!is_internal) effect += knobs.external_effect_shift;
      const double y = 4.0 + 2.0 * x1 - 1.5 * x1 * x2 + 0.4 * x3 * x3 * x3 +
                       a * effect + eps;

      TimePoint pt;
      pt.t = t;
      pt.covariates = {x1, x2, x3};
      pt.treatment = a;
      pt.outcome = y;
      pt.prob_h = {ph};
      traj.points.push_back(std::move(pt));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

CombinedDataset generate_combined(const SimConfig& config, int rep) {
  const std::uint64_t rep_seed = config.seed + static_cast<std::uint64_t>(rep);
  auto internal = generate_study(config.n1, true, config.T,
                                 splitmix64(rep_seed * 2 + 1), config);
  auto external = generate_study(config.n0, false, config.T,
                                 splitmix64(rep_seed * 2 + 2), config);
  internal.insert(internal.end(), std::make_move_iterator(external.begin()),
                  std::make_move_iterator(external.end()));
  return make_dataset(std::move(internal), 1);
}

std::vector<std::string> table2_methods() {
  return {"WCLS-Internal", "WCLS-Pooled",  "P-WCLS-Internal", "P-WCLS-Pooled",
          "ET-WCLS",       "DR-WCLS",      "PET-WCLS"};
}

std::vector<std::string> all_methods() {
  return {"WCLS-Internal",     "WCLS-Pooled",   "P-WCLS-Internal",
          "P-WCLS-Pooled",     "P-WCLS-Pooled-Obs", "ET-WCLS-Equal",
          "ET-WCLS-Kron",      "ET-WCLS",       "DR-WCLS",
          "PET-WCLS"};
}

bool is_method_label(const std::string& label) {
  static const std::vector<std::string> known = [] {
    auto labels = all_methods();
    labels.insert(labels.end(), {"A-WCLS", "ET-WCLS-Raw", "DR-WCLS-Internal",
                                 "DR-WCLS-External"});
    return labels;
  }();
  return std::find(known.begin(), known.end(), label) != known.end();
}

EstimatorOutput run_method(const std::string& label, const CombinedDataset& dataset,
                           const ModeratorConfig& config,
                           const IntegrateOptions& options) {
  if (label == "WCLS-Internal")
    return wcls_estimator(dataset, config, Population::internal, options);
  if (label == "WCLS-Pooled")
    return wcls_estimator(dataset, config, Population::all, options);
  if (label == "P-WCLS-Internal") {
    IntegrateOptions opt = options;
    opt.beta_s_pooled = false;
    return pwcls(dataset, config, opt);
  }
  if (label == "P-WCLS-Pooled") return pwcls(dataset, config, options);
  if (label == "P-WCLS-Pooled-Obs") {
    IntegrateOptions opt = options;
    opt.estimate_ph = true;
    if (opt.ph_spec.dim() == 0)
      opt.ph_spec = parse_feature_spec("1 + x1 + x2 + x3", "p_h");
    return pwcls(dataset, config, opt);
  }
  if (label == "A-WCLS") return awcls(dataset, config, options);
  if (label == "ET-WCLS")
    return etwcls_pooled(dataset, config, options, EtPooling::optimal);
  if (label == "ET-WCLS-Kron")
    return etwcls_pooled(dataset, config, options, EtPooling::kronecker);
  if (label == "ET-WCLS-Equal")
    return etwcls_pooled(dataset, config, options, EtPooling::equal);
  if (label == "ET-WCLS-Raw") return etwcls(dataset, config, options);
  if (label == "DR-WCLS") return drwcls(dataset, config, options);
  if (label == "DR-WCLS-Internal") return dr_internal(dataset, config, options);
  if (label == "DR-WCLS-External") return dr_external(dataset, config, options);
  if (label == "PET-WCLS") return petwcls(dataset, config, options);
  throw ConfigError("unknown method '" + label + "'");
}

namespace {

std::string coefficient_label(const FeatureSpec& f_r, int i) {
  const std::string label = term_label(f_r.terms[i]);
  return label == "1" ? "Intercept" : label;
}

}  // namespace

MonteCarloResult run_monte_carlo(const SimConfig& config, bool keep_replications) {
  if (config.reps < 1) throw ConfigError("reps must be >= 1");
  if (config.n1 < 2) throw ConfigError("n1 must be >= 2");
  const std::vector<std::string> methods =
      config.methods.empty() ? table2_methods() : config.methods;
  if (methods.empty()) throw ConfigError("method list is empty");
  for (const auto& label : methods)
    if (!is_method_label(label)) throw ConfigError("unknown method '" + label + "'");

  const ModeratorConfig mod = sim_moderator_config(config.d_spec);
  IntegrateOptions options;
  options.dof_adjust = config.dof_adjust;
  options.estimate_ph = config.estimate_ph;
  if (config.estimate_ph)
    options.ph_spec = parse_feature_spec("1 + x1 + x2 + x3", "p_h");

  const int n_methods = static_cast<int>(methods.size());
  std::vector<ReplicationRecord> records(
      static_cast<std::size_t>(config.reps) * n_methods);

  int n_threads = config.threads > 0
                      ? config.threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;
  n_threads = std::min(n_threads, config.reps);

  std::atomic<int> next_rep{0};
  auto worker = [&]() {
    while (true) {
      const int rep = next_rep.fetch_add(1);
      if (rep >= config.reps) break;
      CombinedDataset dataset = generate_combined(config, rep);
      for (int m = 0; m < n_methods; ++m) {
        ReplicationRecord& rec = records[static_cast<std::size_t>(rep) * n_methods + m];
        rec.method = methods[m];
        rec.rep = rep;
        try {
          EstimatorOutput out = run_method(methods[m], dataset, mod, options);
          rec.beta = out.beta_r;
          rec.se = out.se;
        } catch (const Error& e) {
          rec.failed = true;
          rec.error = e.what();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  // aggregate in fixed (method, rep) order
  const int dr = mod.f_r.dim();
  const Eigen::Vector2d truth2 = true_beta_r(true);
  Eigen::VectorXd truth(dr);
  for (int i = 0; i < dr && i < 2; ++i) truth[i] = truth2[i];

  MonteCarloResult result;
  std::vector<double> wcls_internal_var(dr,
                                        std::numeric_limits<double>::quiet_NaN());

  // first pass: WCLS-Internal empirical variance for relative efficiency
  for (int pass = 0; pass < 2; ++pass) {
    for (int m = 0; m < n_methods; ++m) {
      const bool is_reference = methods[m] == "WCLS-Internal";
      if ((pass == 0) != is_reference) continue;
      std::vector<std::vector<double>> est(dr), ses(dr);
      int failed = 0;
      for (int rep = 0; rep < config.reps; ++rep) {
        const ReplicationRecord& rec =
            records[static_cast<std::size_t>(rep) * n_methods + m];
        if (rec.failed) {
          ++failed;
          continue;
        }
        for (int i = 0; i < dr; ++i) {
          est[i].push_back(rec.beta[i]);
          ses[i].push_back(rec.se[i]);
        }
      }
      if (failed > config.reps / 20)
        throw Error("method '" + methods[m] + "' failed in " +
                    std::to_string(failed) + " of " +
                    std::to_string(config.reps) + " replications (> 5%)");
      for (int i = 0; i < dr; ++i) {
        const int k = static_cast<int>(est[i].size());
        const double avg = kernels::sum(est[i].data(), k) / k;
        std::vector<double> sq(k), err(k);
        for (int j = 0; j < k; ++j) {
          sq[j] = (est[i][j] - avg) * (est[i][j] - avg);
          err[j] = (est[i][j] - truth[i]) * (est[i][j] - truth[i]);
        }
        const double var = k > 1 ? kernels::sum(sq.data(), k) / (k - 1) : 0.0;
        const double rmse = std::sqrt(kernels::sum(err.data(), k) / k);
        int covered = 0;
        for (int j = 0; j < k; ++j) {
          const double lo = est[i][j] - 1.96 * ses[i][j];
          const double hi = est[i][j] + 1.96 * ses[i][j];
          covered += lo <= truth[i] && truth[i] <= hi ? 1 : 0;
        }
        if (is_reference) wcls_internal_var[i] = var;

        MetricsRow row;
        row.method = methods[m];
        row.coefficient = coefficient_label(mod.f_r, i);
        row.true_value = truth[i];
        row.avg_estimate = avg;
        row.relative_efficiency_pct =
            std::isnan(wcls_internal_var[i]) || var <= 0.0
                ? std::numeric_limits<double>::quiet_NaN()
                : 100.0 * wcls_internal_var[i] / var;
        row.rmse = rmse;
        row.coverage_pct = 100.0 * covered / k;
        row.empirical_se = std::sqrt(var);
        row.failed_reps = failed;
        result.metrics.push_back(std::move(row));
      }
    }
  }
  // restore the requested method order
  std::vector<MetricsRow> ordered;
  for (const auto& method : methods)
    for (auto& row : result.metrics)
      if (row.method == method) ordered.push_back(row);
  result.metrics = std::move(ordered);

  if (keep_replications) result.replications = std::move(records);
  return result;
}

std::vector<SweepPoint> sweep(const SimConfig& config, SweepAxis axis,
                              const std::vector<int>& values) {
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] < values[i - 1])
      throw ConfigError("sweep values must be ascending");
  std::vector<SweepPoint> out;
  for (int value : values) {
    SimConfig point = config;
    (axis == SweepAxis::n0 ? point.n0 : point.n1) = value;
    SweepPoint sp;
    sp.value = value;
    sp.metrics = run_monte_carlo(point).metrics;
    out.push_back(std::move(sp));
  }
  return out;
}

namespace {

void print_value(std::ostream& out, double v) {
  if (std::isnan(v)) return;  // empty cell
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  out << buf;
}

void metrics_row(std::ostream& out, const MetricsRow& row) {
  out << row.method << ',' << row.coefficient << ',';
  print_value(out, row.true_value);
  out << ',';
  print_value(out, row.avg_estimate);
  out << ',';
  print_value(out, row.relative_efficiency_pct);
  out << ',';
  print_value(out, row.rmse);
  out << ',';
  print_value(out, row.coverage_pct);
  out << ',' << row.failed_reps;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "method,coefficient,true_value,avg_estimate,relative_efficiency_pct,"
         "rmse,coverage_pct,failed_reps\n";
  for (const auto& row : rows) {
    metrics_row(out, row);
    out << '\n';
  }
}

void write_sweep_csv(std::ostream& out, SweepAxis axis,
                     const std::vector<SweepPoint>& points) {
  out << "axis,value,method,coefficient,true_value,avg_estimate,"
         "relative_efficiency_pct,rmse,coverage_pct,failed_reps,empirical_se\n";
  const char* axis_name = axis == SweepAxis::n0 ? "n0" : "n1";
  for (const auto& point : points)
    for (const auto& row : point.metrics) {
      out << axis_name << ',' << point.value << ',';
      metrics_row(out, row);
      out << ',';
      print_value(out, row.empirical_se);
      out << '\n';
    }
}

void write_replications_csv(std::ostream& out,
                            const std::vector<ReplicationRecord>& rows) {
  out << "rep,method,coefficient_index,estimate,se,failed\n";
  char buf[40];
  for (const auto& rec : rows) {
    if (rec.failed) {
      out << rec.rep << ',' << rec.method << ",,,," << 1 << '\n';
      continue;
    }
    for (int i = 0; i < rec.beta.size(); ++i) {
      out << rec.rep << ',' << rec.method << ',' << i << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", rec.beta[i]);
      out << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", rec.se[i]);
      out << buf << ",0\n";
    }
  }
}

}  // namespace mrtint
