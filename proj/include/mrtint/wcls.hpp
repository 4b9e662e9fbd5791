#pragma once

#include <memory>
#include <optional>

#include "mrtint/propensity.hpp"

namespace mrtint {

// Where a treatment/centering probability comes from inside a stacked system.
struct ProbRef {
  enum class Kind {
    fixed,           // known constant
    supplied_ph,     // per-row randomization probabilities from the data
    const_block,     // upstream intercept-only logistic block
    logistic_block,  // upstream logistic block with covariates
  };
  Kind kind = Kind::fixed;
  double fixed_value = 0.5;
  const ConstantProbBlock* cblk = nullptr;
  const LogisticBlock* lblk = nullptr;
  int level = 1;  // which non-control level this probability refers to

  static ProbRef fixed(double value, int level = 1);
  static ProbRef supplied(int level = 1);
  static ProbRef constant(const ConstantProbBlock* blk, int level = 1);
  static ProbRef logistic(const LogisticBlock* blk, int level = 1);

  // P(A = level | .) for a row under theta.
  double at(const Eigen::VectorXd& theta, const RowData& rows, int row) const;
  // True when the probability moves with theta through a 1-parameter
  // constant block (the only case with a closed-form cross derivative).
  bool is_single_param() const { return kind == Kind::const_block; }
  bool depends_on_theta() const {
    return kind == Kind::const_block || kind == Kind::logistic_block;
  }
};

// Multiplicative reweighting of an estimating equation (exponential-tilt
// weights for the external-study equations, or a fixed per-row override).
struct RatioRef {
  enum class Kind { none, omega_block, fixed_log };
  Kind kind = Kind::none;
  const DensityRatioBlock* wblk = nullptr;
  std::shared_ptr<const Eigen::VectorXd> fixed_log;  // per-row log ratio

  static RatioRef none();
  static RatioRef omega(const DensityRatioBlock* blk);
  static RatioRef fixed(std::shared_ptr<const Eigen::VectorXd> log_ratio);

  // exp(log ratio) for a row, exponent clamped to +-50.
  double at(const Eigen::VectorXd& theta, int row) const;
  bool depends_on_theta() const { return kind == Kind::omega_block; }
};

// W_t for a binary treatment: ratio of the centering probability of the
// observed action to its randomization probability.
double wcls_weight(double p_r_at, double p_h_at, int a);

// The weighted, centered least-squares block: parameters (alpha, beta) for
// design [g(H); (A - p) f(.)] with weight mask * ratio * p(A|.)/p_h(A|H).
class WclsBlock : public EquationBlock {
 public:
  WclsBlock(std::string name, const RowData* rows,
            std::shared_ptr<const RowMat> g_matrix,
            std::shared_ptr<const RowMat> f_matrix, ProbRef center, ProbRef ph,
            Eigen::VectorXd mask, RatioRef ratio, int stage);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override;
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;
  double score_scale(const Eigen::VectorXd& theta) const override;

  int alpha_dim() const { return static_cast<int>(g_->cols()); }
  int beta_dim() const { return static_cast<int>(f_->cols()); }
  int alpha_offset() const { return offset(); }
  int beta_offset() const { return offset() + alpha_dim(); }

 private:
  // per-row weight and centered design row under theta
  void row_terms(const Eigen::VectorXd& theta, int r, double* weight,
                 double* center_p) const;

  const RowData* rows_;
  std::shared_ptr<const RowMat> g_, f_;
  ProbRef center_, ph_;
  Eigen::VectorXd mask_;
  RatioRef ratio_;
};

// Multi-level WCLS block: design [g(H); (A_1 - p_1) f_1; ...; (A_J - p_J) f_J]
// with weight p_r(A|R)/p_h(A|H) built from per-level centering
// probabilities. Jacobian is finite-differenced.
class MultilevelWclsBlock : public EquationBlock {
 public:
  MultilevelWclsBlock(std::string name, const RowData* rows,
                      std::shared_ptr<const RowMat> g_matrix,
                      std::vector<std::shared_ptr<const RowMat>> f_matrices,
                      std::vector<ProbRef> centers, Eigen::VectorXd mask,
                      int stage);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;
  double score_scale(const Eigen::VectorXd& theta) const override;

  int alpha_dim() const { return static_cast<int>(g_->cols()); }
  int beta_offset(int level) const;  // level in 1..J
  int beta_dim(int level) const;

 private:
  void build_row(const Eigen::VectorXd& theta, int r, double* weight,
                 double* design_row) const;

  const RowData* rows_;
  std::shared_ptr<const RowMat> g_;
  std::vector<std::shared_ptr<const RowMat>> f_;
  std::vector<ProbRef> centers_;
  Eigen::VectorXd mask_;
  int total_dim_;
};

// ---------------------------------------------------------------------------
// user-facing fits

struct WCLSSpec {
  FeatureSpec g;
  FeatureSpec f_r;
  enum class PrSource { constant_fit, supplied, logistic_fit };
  PrSource pr_source = PrSource::constant_fit;
  double pr_supplied = 0.5;
  FeatureSpec pr_spec;  // design for pr_source = logistic_fit
  enum class PhSource { supplied, logistic_fit };
  PhSource ph_source = PhSource::supplied;
  FeatureSpec ph_spec;  // design for ph_source = logistic_fit
  Population population = Population::internal;
  bool dof_adjust = true;
  double epsilon = 1e-6;
};

struct WCLSFit {
  Eigen::VectorXd alpha;
  Eigen::VectorXd beta_r;
  Eigen::MatrixXd beta_covariance;  // covariance of beta_r_hat
  Eigen::VectorXd beta_se;
  FitResult fit;
  int beta_offset = 0;
  // fitted/supplied centering constant; NaN when p_r varies with covariates
  double pr_constant = 0.5;

  // p_r(1|R)(1 - p_r(1|R)) under the fit's constant centering probability.
  double sigma_r_sq() const { return pr_constant * (1.0 - pr_constant); }
};

WCLSFit wcls_fit(const CombinedDataset& dataset, const WCLSSpec& spec);

struct MultilevelWCLSFit {
  std::vector<Eigen::VectorXd> beta;  // per level
  Eigen::MatrixXd joint_covariance;   // of the stacked beta estimates
  Eigen::VectorXd alpha;
  FitResult fit;
};

// Appendix-style estimating equation with centered indicators per
// non-control level; per-level constant centering fits are stacked.
MultilevelWCLSFit wcls_fit_multilevel(const CombinedDataset& dataset,
                                      const std::vector<FeatureSpec>& f_r_levels,
                                      const FeatureSpec& g,
                                      const WCLSSpec& spec);

}  // namespace mrtint
