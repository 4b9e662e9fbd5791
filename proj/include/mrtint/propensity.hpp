#pragma once

#include <memory>
#include <optional>
#include <span>

#include "mrtint/mestimation.hpp"

namespace mrtint {

// Row subset an equation runs on.
enum class Population { all, internal, external };
Eigen::VectorXd population_mask(const RowData& rows, Population pop);

// ---------------------------------------------------------------------------
// blocks

// Intercept-only logistic fit of 1{a == level} on masked rows. Parameter is
// the logit; the fitted probability is constant.
class ConstantProbBlock : public EquationBlock {
 public:
  ConstantProbBlock(std::string name, const RowData* rows, Population pop,
                    int level, int stage = 0);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override { return true; }
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;

  double prob(const Eigen::VectorXd& theta) const;

 private:
  const RowData* rows_;
  Eigen::VectorXd mask_;
  int level_;
};

// Logistic regression of binary labels on a design matrix over masked rows.
class LogisticBlock : public EquationBlock {
 public:
  LogisticBlock(std::string name, const RowData* rows,
                std::shared_ptr<const RowMat> design_matrix,
                Eigen::VectorXd labels, Eigen::VectorXd mask, int stage = 0);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override { return true; }
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;

  // P(label = 1 | row) under theta.
  double prob(const Eigen::VectorXd& theta, int row) const;
  const RowMat& design() const { return *design_; }

 private:
  const RowData* rows_;
  std::shared_ptr<const RowMat> design_;
  Eigen::VectorXd labels_;
  Eigen::VectorXd mask_;
};

// Exponential-tilt density ratio p(S|internal)/p(S|external) = exp(d(S)'w).
// Parameters maximize the tilted log-likelihood with rho = n1/n0 held at its
// observed value.
class DensityRatioBlock : public EquationBlock {
 public:
  DensityRatioBlock(std::string name, const RowData* rows,
                    std::shared_ptr<const RowMat> d_matrix, double rho,
                    int stage = 0);

  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override { return true; }
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;

  double log_likelihood(const Eigen::VectorXd& omega) const;
  double rho() const { return rho_; }
  const RowMat& d_matrix() const { return *d_; }

 private:
  const RowData* rows_;
  std::shared_ptr<const RowMat> d_;
  double rho_;
};

// Internal-study membership proportion with estimating equation
// 0 = P_n (I - pi); one score term per participant.
class ProportionBlock : public EquationBlock {
 public:
  ProportionBlock(std::string name, const RowData* rows, int stage = 0);
  void score(const Eigen::VectorXd& theta, int pidx, double* out) const override;
  bool has_analytic_jacobian() const override { return true; }
  void mean_jacobian(const Eigen::VectorXd& theta,
                     Eigen::Ref<Eigen::MatrixXd> jac) const override;
  void solve_stage(Eigen::VectorXd& theta) const override;

 private:
  const RowData* rows_;
};

// ---------------------------------------------------------------------------
// standalone fits

struct LogisticFit {
  Eigen::VectorXd coefficients;
  Eigen::MatrixXd covariance;  // of the coefficient estimate
  bool converged = false;
};

// Newton MLE with step halving; throws SeparationError when the MLE does not
// exist (constant labels or diverging coefficients) and
// SingularNormalEquationsError on rank-deficient designs. Optional per-row
// weights multiply each row's score contribution.
LogisticFit fit_logistic(const RowMat& design_matrix,
                         const Eigen::VectorXd& labels,
                         const Eigen::VectorXd& weights = {});

// Per-level intercept-only fits: probs[j-1] estimates P(A = j).
struct ConstantPrFit {
  Eigen::VectorXd probs;   // length = level_count
  Eigen::VectorXd logits;
};
ConstantPrFit constant_pr(const CombinedDataset& dataset, int level_count,
                          Population pop = Population::all);

struct DensityRatioFit {
  Eigen::VectorXd omega;
  Eigen::MatrixXd covariance;  // of omega_hat
  FeatureSpec d_spec;
  double rho = 1.0;
  bool converged = false;
};

// Maximizes the tilted likelihood over the combined rows; requires both
// studies nonempty and an intercept in d_spec.
DensityRatioFit fit_density_ratio(const CombinedDataset& dataset,
                                  const FeatureSpec& d_spec);

// exp(d(S)'omega) with the exponent clamped to +-50; *clamped reports
// whether the guard fired.
double ratio_weights(const DensityRatioFit& fit,
                     std::span<const double> s_features,
                     bool* clamped = nullptr);

// Numerically stable helpers shared by the logistic-type solvers.
double sigmoid(double x);
double log1pexp(double x);

}  // namespace mrtint
