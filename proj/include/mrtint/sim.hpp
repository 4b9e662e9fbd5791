#pragma once

#include <cstdint>
#include <iosfwd>

#include "mrtint/integrate.hpp"

namespace mrtint {

// Generative-model and Monte Carlo configuration. Defaults reproduce the
// benchmark setting: T = 20, 400 replications, known randomization
// probabilities, quadratic d-features for the density ratio.
struct SimConfig {
  int n1 = 400;
  int n0 = 400;
  int T = 20;
  int reps = 400;
  std::uint64_t seed = 20240314;
  std::vector<std::string> methods;  // empty = table2_methods()
  FeatureSpec d_spec;                // empty = default_d_spec()
  double ar_coefficient = 0.5;
  double innovation_sd = 1.0;
  bool estimate_ph = false;  // P-WCLS-Pooled-Obs style p_h fit
  bool dof_adjust = true;
  // Study-specific treatment-effect shift added to the external study's
  // outcome (breaks the shared-effects assumption; used by the power checks).
  double external_effect_shift = 0.0;
  // Draw the external study's second covariate from the internal law, so the
  // two studies share one distribution.
  bool external_same_distribution = false;
  int threads = 0;  // 0 = hardware concurrency
};

struct GenerativeTruth {
  Eigen::Vector3d beta_s_true{1.0, 2.0, -3.0};
  Eigen::Vector2d beta_r_internal{-2.0, 5.0};
  Eigen::Vector2d beta_r_external{1.0, 2.0};
};

Eigen::Vector2d true_beta_r(bool is_internal);

// Feature maps used throughout the simulation: f_r = (1, x1),
// f_s = (1, x1, x2), g = (1, x1, x2, x3).
ModeratorConfig sim_moderator_config(const FeatureSpec& d_spec = {});
FeatureSpec default_d_spec();

// One simulated study: AR(1) first covariate, location-scale Student-t
// second and third covariates, logistic randomization, AR(1) outcome noise.
// Deterministic given the seed.
std::vector<Trajectory> generate_study(int n, bool is_internal, int T,
                                       std::uint64_t seed,
                                       const SimConfig& knobs = {});
// Internal + external studies of one replication.
CombinedDataset generate_combined(const SimConfig& config, int rep);

// Randomization probability at a covariate vector (exposed for tests).
double sim_ph(double x1, double x2, double x3, bool is_internal);

// Exact log density ratio of the second covariate between studies,
// log p(x2 | x1, internal) - log p(x2 | external); the oracle weight for
// the robustness checks.
double sim_oracle_log_ratio(double x1, double x2);

struct MetricsRow {
  std::string method;
  std::string coefficient;
  double true_value = 0.0;
  double avg_estimate = 0.0;
  double relative_efficiency_pct = 0.0;  // NaN when unavailable
  double rmse = 0.0;
  double coverage_pct = 0.0;
  double empirical_se = 0.0;
  int failed_reps = 0;
};

// Per-replication estimates for one method across a Monte Carlo run.
struct ReplicationRecord {
  std::string method;
  int rep = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  bool failed = false;
  std::string error;
};

struct MonteCarloResult {
  std::vector<MetricsRow> metrics;
  std::vector<ReplicationRecord> replications;  // kept when dump requested
};

// Runs config.reps replications (seed + rep stream each), fits every
// requested method, and aggregates average estimate, relative efficiency
// against WCLS-Internal, rMSE and 95% coverage. Replication failures are
// counted and excluded; more than 5% failures for any method aborts.
MonteCarloResult run_monte_carlo(const SimConfig& config, bool keep_replications = false);

std::vector<std::string> table2_methods();
std::vector<std::string> all_methods();
bool is_method_label(const std::string& label);

// Fits one method by its table label on an already-generated dataset.
EstimatorOutput run_method(const std::string& label, const CombinedDataset& dataset,
                           const ModeratorConfig& config, const IntegrateOptions& options);

enum class SweepAxis { n0, n1 };
struct SweepPoint {
  int value = 0;
  std::vector<MetricsRow> metrics;
};
// run_monte_carlo per axis value (values must be ascending).
std::vector<SweepPoint> sweep(const SimConfig& config, SweepAxis axis,
                              const std::vector<int>& values);

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_sweep_csv(std::ostream& out, SweepAxis axis,
                     const std::vector<SweepPoint>& points);
void write_replications_csv(std::ostream& out,
                            const std::vector<ReplicationRecord>& rows);

}  // namespace mrtint
