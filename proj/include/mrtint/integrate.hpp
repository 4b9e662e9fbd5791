#pragma once

#include <functional>
#include <limits>
#include <optional>

#include "mrtint/meta.hpp"
#include "mrtint/wcls.hpp"

namespace mrtint {

struct IntegrateOptions {
  bool dof_adjust = true;
  double epsilon = 1e-6;
  // beta_s from the pooled data (default) or internal study only.
  bool beta_s_pooled = true;
  // Fit p_h by logistic regression instead of using supplied probabilities.
  bool estimate_ph = false;
  FeatureSpec ph_spec;

  // Test-support overrides for the robustness checks: hold the tilt
  // coefficients fixed instead of fitting them, supply an exact per-row
  // log density ratio, or zero the effect part of the shared model.
  std::optional<Eigen::VectorXd> fixed_omega;
  std::function<double(std::span<const double>)> oracle_log_ratio;
  bool zero_beta_s = false;
};

struct NuisanceReport {
  double p_s = std::numeric_limits<double>::quiet_NaN();
  double p_r = std::numeric_limits<double>::quiet_NaN();
  double pi = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd omega;  // empty when the method has no density ratio
  std::vector<std::string> warnings;
};

struct ConstituentEstimate {
  std::string name;
  Eigen::VectorXd beta;
  Eigen::MatrixXd covariance;
};

struct EstimatorOutput {
  std::string method;
  Eigen::VectorXd beta_r;
  Eigen::MatrixXd covariance;  // of beta_r_hat
  Eigen::VectorXd se;
  Eigen::MatrixXd ci95;        // d_r x 2 (lower, upper)
  int n_internal = 0;
  int n_external = 0;
  NuisanceReport nuisance;
  std::vector<ConstituentEstimate> constituents;  // for combination methods
};

// ---------------------------------------------------------------------------
// blocks shared by the integration estimators

// Weighted internal-study projection onto f_r(R_t): solves
//   0 = P_n I sum_t sigma_r^2(R_t) [target - f_r' beta] f_r
// where target is either f_s(S_t)' beta_s (P-WCLS) or one column of
// f_s(S_t) (a free Gamma column).
class ProjectionBlock : public EquationBlock {
 public:
  ProjectionBlock(std::string name, const RowData* rows,
                  std::shared_ptr<const RowMat> fr,
                  std::shared_ptr<const RowMat> fs, ProbRef pr,
                  Eigen::VectorXd mask, int fs_column, int beta_s_offset,
                  int beta_s_dim, int stage);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override;
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;
  double score_scale(const Eigen::VectorXd& theta) const override;

 private:
  double target(const Eigen::VectorXd& theta, int r) const;

  const RowData* rows_;
  std::shared_ptr<const RowMat> fr_, fs_;
  ProbRef pr_;
  Eigen::VectorXd mask_;
  int fs_column_;  // >= 0: regress this f_s column; else f_s' beta_s
  int beta_s_offset_, beta_s_dim_;
};

// Shared-model handle for the doubly robust blocks: m(H_t, a) =
// g(H_t)'alpha + (a - p_s(1|S_t)) f_s(S_t)'beta_s, with the effect part
// optionally forced to zero.
struct SharedModelRef {
  std::shared_ptr<const RowMat> g;
  std::shared_ptr<const RowMat> fs;
  int alpha_offset = 0, alpha_dim = 0;
  int beta_s_offset = 0, beta_s_dim = 0;
  ProbRef ps;
  bool zero_beta_s = false;

  double m(const Eigen::VectorXd& theta, const RowData& rows, int r) const;
  double effect(const Eigen::VectorXd& theta, int r) const;  // m(H,1)-m(H,0)
};

// Internal-study pseudo-outcome regression: solves
//   0 = P_n I sum_t [ W (A - p_r)(Y - m) + sigma_r^2 (m1 - m0)
//                     - sigma_r^2 f_r' beta ] f_r.
class DrInternalBlock : public EquationBlock {
 public:
  DrInternalBlock(std::string name, const RowData* rows,
                  std::shared_ptr<const RowMat> fr, SharedModelRef shared,
                  ProbRef pr, ProbRef ph, int stage);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override;
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;
  double score_scale(const Eigen::VectorXd& theta) const override;

 private:
  const RowData* rows_;
  std::shared_ptr<const RowMat> fr_;
  SharedModelRef shared_;
  ProbRef pr_, ph_;
};

// External-study doubly robust equation: solves
//   0 = P_n sum_t (1-I)/(1-pi) w(S) W (A - p_r)(Y - m) f_r
//           + I/pi sigma_r^2 [ (m1 - m0) - f_r' beta ] f_r.
class DrExternalBlock : public EquationBlock {
 public:
  DrExternalBlock(std::string name, const RowData* rows,
                  std::shared_ptr<const RowMat> fr, SharedModelRef shared,
                  ProbRef pr, ProbRef ph, RatioRef ratio,
                  const ProportionBlock* pi_block, int stage);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override;
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;
  double score_scale(const Eigen::VectorXd& theta) const override;

 private:
  const RowData* rows_;
  std::shared_ptr<const RowMat> fr_;
  SharedModelRef shared_;
  ProbRef pr_, ph_;
  RatioRef ratio_;
  const ProportionBlock* pi_block_;
};

// ---------------------------------------------------------------------------
// estimators

// Plain WCLS on the requested population, packaged like the integration
// methods (drives the WCLS-Internal / WCLS-Pooled rows).
EstimatorOutput wcls_estimator(const CombinedDataset& dataset,
                               const ModeratorConfig& config, Population pop,
                               const IntegrateOptions& options = {});

// Step-3 weighted regressions for the free columns of Gamma.
struct GammaEstimate {
  Eigen::MatrixXd gamma;  // d_r x d_s, leading c columns are [I_c; 0]
  int c = 0, d_r = 0, d_s = 0;
};
GammaEstimate estimate_gamma(const CombinedDataset& dataset,
                             const ModeratorConfig& config,
                             const IntegrateOptions& options = {});

EstimatorOutput awcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                      const IntegrateOptions& options = {});
EstimatorOutput pwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                      const IntegrateOptions& options = {});

// Raw exponentially tilted WCLS on the external rows.
EstimatorOutput etwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                       const IntegrateOptions& options = {});

// ET-WCLS pooled with WCLS-Internal through the meta-estimator (the headline
// ET method); kronecker and equal select the structured and fixed-weight
// pooling variants.
enum class EtPooling { optimal, kronecker, equal };
EstimatorOutput etwcls_pooled(const CombinedDataset& dataset,
                              const ModeratorConfig& config,
                              const IntegrateOptions& options = {},
                              EtPooling pooling = EtPooling::optimal);

EstimatorOutput dr_internal(const CombinedDataset& dataset,
                            const ModeratorConfig& config,
                            const IntegrateOptions& options = {});
EstimatorOutput dr_external(const CombinedDataset& dataset,
                            const ModeratorConfig& config,
                            const IntegrateOptions& options = {});
// Joint fit of both DR equations combined with the meta-estimator.
EstimatorOutput drwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                       const IntegrateOptions& options = {});

// WCLS-Internal + P-WCLS + ET-WCLS in one stacked system, meta-combined.
EstimatorOutput petwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                        const IntegrateOptions& options = {});

// Falsification check of the shared-effects assumption: pooled WCLS with
// moderators [f_s, I x f_s] and a Wald test on the interaction block.
struct SharedEffectsTest {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
};
SharedEffectsTest shared_effects_test(const CombinedDataset& dataset,
                                      const ModeratorConfig& config,
                                      const IntegrateOptions& options = {});

// Regularized lower incomplete gamma and the chi-square upper tail built on
// it (used by the Wald test).
double gamma_p(double a, double x);
double chi2_sf(double x, int dof);

}  // namespace mrtint
