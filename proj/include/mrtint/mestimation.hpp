#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mrtint/datamodel.hpp"

namespace mrtint {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Flattened, row-major view of a CombinedDataset: one row per randomization,
// participant-major. Estimating-equation blocks index into this.
struct RowData {
  int n_participants = 0;
  int n_rows = 0;
  int level_count = 1;

  std::vector<int> row_begin;        // size n_participants + 1
  Eigen::VectorXd y;                 // proximal outcome
  Eigen::VectorXd a;                 // treatment level as double
  Eigen::VectorXd internal_row;      // study indicator per row
  Eigen::VectorXd participant_internal;  // study indicator per participant
  RowMat ph;                         // n_rows x level_count, empty if unsupplied
  bool ph_supplied = false;
  RowMat x;                          // raw covariates, n_rows x K

  // Evaluates a feature spec across all rows.
  RowMat features(const FeatureSpec& spec) const;
  // P(A = observed a | H) from the supplied probabilities.
  Eigen::VectorXd ph_observed() const;
};

RowData flatten(const CombinedDataset& dataset);

// One stacked estimating-equation block: a contiguous slice of the joint
// parameter vector, a per-participant score (already summed over time), an
// optional analytic Jacobian of the block's mean score with respect to the
// FULL parameter vector, and a stage-wise solver.
class EquationBlock {
 public:
  EquationBlock(std::string name, int dim, int stage)
      : name_(std::move(name)), dim_(dim), stage_(stage) {}
  virtual ~EquationBlock() = default;

  const std::string& name() const { return name_; }
  int dim() const { return dim_; }
  int stage() const { return stage_; }
  int offset() const { return offset_; }

  // Adds participant pidx's score contribution into out[0..dim).
  virtual void score(const Eigen::VectorXd& theta, int pidx, double* out) const = 0;

  // Analytic d(mean score)/d(theta^T) accumulated into rows of jac
  // (dim x theta_dim). A block may only claim this when the derivative is
  // exact for every parameter its score touches; otherwise the system falls
  // back to central finite differences.
  virtual bool has_analytic_jacobian() const { return false; }
  virtual void mean_jacobian(const Eigen::VectorXd& theta,
                             Eigen::Ref<Eigen::MatrixXd> jac) const;

  // Solves this block's parameters with upstream stages held fixed.
  virtual void solve_stage(Eigen::VectorXd& theta) const = 0;

  // Magnitude of the terms the block's mean score cancels (average absolute
  // row contribution). Residual verification is relative to this, so
  // heavily weighted equations are not flagged for plain rounding noise.
  virtual double score_scale(const Eigen::VectorXd& theta) const;

 private:
  friend class StackedSystem;
  std::string name_;
  int dim_;
  int stage_;
  int offset_ = -1;
};

struct FitResult {
  Eigen::VectorXd theta;     // stacked estimate
  Eigen::MatrixXd sigma;     // covariance of sqrt(n) * theta_hat
  Eigen::MatrixXd bread;     // B
  Eigen::MatrixXd meat;      // M
  int n = 0;                 // participants
  int p = 0;                 // stacked parameter count
  bool dof_adjusted = false;

  // Plain covariance of the estimate itself: sigma / n.
  Eigen::MatrixXd covariance() const { return sigma / static_cast<double>(n); }
  Eigen::MatrixXd covariance_block(int offset, int dim) const {
    return sigma.block(offset, offset, dim, dim) / static_cast<double>(n);
  }
};

// Ordered collection of blocks over shared rows; solves stage-by-stage and
// forms the joint sandwich. Blocks are owned by the system.
class StackedSystem {
 public:
  explicit StackedSystem(std::shared_ptr<const RowData> rows)
      : rows_(std::move(rows)) {}

  template <class Block, class... Args>
  Block* add(Args&&... args) {
    auto blk = std::make_unique<Block>(std::forward<Args>(args)...);
    Block* raw = blk.get();
    blk->offset_ = theta_dim_;
    theta_dim_ += blk->dim();
    blocks_.push_back(std::move(blk));
    return raw;
  }

  const RowData& rows() const { return *rows_; }
  int theta_dim() const { return theta_dim_; }
  int n() const { return rows_->n_participants; }
  const std::vector<std::unique_ptr<EquationBlock>>& blocks() const { return blocks_; }

  // Mean (over participants) of the stacked score at theta.
  Eigen::VectorXd mean_score(const Eigen::VectorXd& theta) const;
  // Participant pidx's stacked score.
  void participant_score(const Eigen::VectorXd& theta, int pidx, double* out) const;

  // Stage-wise solve; verifies the joint score afterwards. Throws
  // NonConvergenceError when the residual exceeds tol.
  Eigen::VectorXd solve(double tol = 1e-8) const;

  // Joint sandwich covariance of sqrt(n)(theta_hat - theta). dof_adjust
  // multiplies by n / (n - p).
  FitResult sandwich(const Eigen::VectorXd& theta_hat, bool dof_adjust = true) const;

  // Mean Jacobian of the stacked score (analytic rows where available,
  // central finite differences elsewhere). Exposed for tests.
  Eigen::MatrixXd mean_jacobian(const Eigen::VectorXd& theta) const;
  Eigen::MatrixXd fd_mean_jacobian_block(const EquationBlock& block,
                                         const Eigen::VectorXd& theta) const;

 private:
  std::shared_ptr<const RowData> rows_;
  std::vector<std::unique_ptr<EquationBlock>> blocks_;
  int theta_dim_ = 0;
};

// Delta-method transform of a fitted system: estimate = transform(phi) and
// covariance = D Cov(phi) D^T with D = jacobian(phi), where phi is the
// sub-vector of theta at phi_idx. Returned covariance is the plain
// covariance of the transformed estimate.
struct DeltaResult {
  Eigen::VectorXd estimate;
  Eigen::MatrixXd covariance;
};
DeltaResult delta_method(
    const FitResult& fit, const std::vector<int>& phi_idx,
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& transform,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jacobian);

// Solves G theta = b through a rank-revealing QR; throws
// SingularNormalEquationsError when G is rank deficient.
Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& gram,
                                       const Eigen::VectorXd& rhs,
                                       const std::string& context);

// Symmetrizes and checks positive semidefiniteness within
// 1e-8 * ||S|| tolerance (throws NotPositiveDefiniteError).
void enforce_psd(Eigen::MatrixXd& s, const std::string& context);

}  // namespace mrtint
