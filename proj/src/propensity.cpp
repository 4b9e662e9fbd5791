#include "mrtint/propensity.hpp"

#include <cmath>

#include "mrtint/errors.hpp"
#include "mrtint/kernels.hpp"

namespace mrtint {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log1pexp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

Eigen::VectorXd population_mask(const RowData& rows, Population pop) {
  switch (pop) {
    case Population::all:
      return Eigen::VectorXd::Ones(rows.n_rows);
    case Population::internal:
      return rows.internal_row;
    case Population::external:
      return Eigen::VectorXd::Ones(rows.n_rows) - rows.internal_row;
  }
  return {};
}

// ---------------------------------------------------------------------------
// ConstantProbBlock

ConstantProbBlock::ConstantProbBlock(std::string name, const RowData* rows,
                                     Population pop, int level, int stage)
    : EquationBlock(std::move(name), 1, stage),
      rows_(rows),
      mask_(population_mask(*rows, pop)),
      level_(level) {}

double ConstantProbBlock::prob(const Eigen::VectorXd& theta) const {
  return sigmoid(theta[offset()]);
}

void ConstantProbBlock::score(const Eigen::VectorXd& theta, int pidx,
                              double* out) const {
  const double p = prob(theta);
  double acc = 0.0;
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (mask_[r] == 0.0) continue;
    const double label = rows_->a[r] == level_ ? 1.0 : 0.0;
    acc += label - p;
  }
  out[0] += acc;
}

void ConstantProbBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                      Eigen::Ref<Eigen::MatrixXd> jac) const {
  const double p = prob(theta);
  jac(0, offset()) += -mask_.sum() * p * (1.0 - p) / rows_->n_participants;
}

void ConstantProbBlock::solve_stage(Eigen::VectorXd& theta) const {
  double count = 0.0, hits = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) continue;
    count += 1.0;
    hits += rows_->a[r] == level_ ? 1.0 : 0.0;
  }
  if (count == 0.0)
    throw ValidationError("block '" + name() + "': no rows in the requested population");
  const double p = hits / count;
  if (p <= 0.0 || p >= 1.0)
    throw SeparationError("block '" + name() + "': treatment level " +
                          std::to_string(level_) +
                          (p <= 0.0 ? " is never assigned" : " is always assigned"));
  theta[offset()] = std::log(p / (1.0 - p));
}

// ---------------------------------------------------------------------------
// LogisticBlock

LogisticBlock::LogisticBlock(std::string name, const RowData* rows,
                             std::shared_ptr<const RowMat> design_matrix,
                             Eigen::VectorXd labels, Eigen::VectorXd mask,
                             int stage)
    : EquationBlock(std::move(name), static_cast<int>(design_matrix->cols()), stage),
      rows_(rows),
      design_(std::move(design_matrix)),
      labels_(std::move(labels)),
      mask_(std::move(mask)) {}

double LogisticBlock::prob(const Eigen::VectorXd& theta, int row) const {
  const double eta = kernels::dot(design_->row(row).data(),
                                  theta.data() + offset(), design_->cols());
  return sigmoid(eta);
}

void LogisticBlock::score(const Eigen::VectorXd& theta, int pidx,
                          double* out) const {
  const int k = dim();
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (mask_[r] == 0.0) continue;
    const double resid = mask_[r] * (labels_[r] - prob(theta, r));
    kernels::axpy(resid, design_->row(r).data(), out, k);
  }
}

void LogisticBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                  Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int k = dim();
  Eigen::VectorXd w(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    const double p = mask_[r] == 0.0 ? 0.0 : prob(theta, r);
    w[r] = -mask_[r] * p * (1.0 - p) / rows_->n_participants;
  }
  RowMat gram_rm = RowMat::Zero(k, k);
  kernels::gram(design_->data(), w.data(), rows_->n_rows, k, gram_rm.data());
  jac.block(0, offset(), k, k) += gram_rm;
}

void LogisticBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int k = dim();
  double hits = 0.0, count = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) continue;
    count += 1.0;
    hits += labels_[r] > 0.5 ? 1.0 : 0.0;
  }
  if (hits == 0.0 || hits == count)
    throw SeparationError("block '" + name() + "': all labels equal, the "
                          "logistic MLE does not exist");

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
  auto loglik = [&](const Eigen::VectorXd& b) {
    double ll = 0.0;
    for (int r = 0; r < rows_->n_rows; ++r) {
      if (mask_[r] == 0.0) continue;
      const double eta = design_->row(r).dot(b);
      ll += mask_[r] * (labels_[r] * eta - log1pexp(eta));
    }
    return ll;
  };

  double ll = loglik(beta);
  bool converged = false;
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd w(rows_->n_rows);
    for (int r = 0; r < rows_->n_rows; ++r) {
      if (mask_[r] == 0.0) {
        w[r] = 0.0;
        continue;
      }
      const double p = sigmoid(design_->row(r).dot(beta));
      const double resid = mask_[r] * (labels_[r] - p);
      kernels::axpy(resid, design_->row(r).data(), grad.data(), k);
      w[r] = mask_[r] * p * (1.0 - p);
    }
    if (grad.cwiseAbs().maxCoeff() / rows_->n_participants <= 1e-10) {
      converged = true;
      break;
    }
    RowMat hess = RowMat::Zero(k, k);
    kernels::gram(design_->data(), w.data(), rows_->n_rows, k, hess.data());
    Eigen::VectorXd step =
        solve_normal_equations(hess, grad, "block '" + name() + "'");
    const double slack = 1e-12 * (std::abs(ll) + 1.0);  // rounding tolerance
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      const double trial_ll = loglik(beta + scale * step);
      if (trial_ll >= ll - slack) {
        beta += scale * step;
        ll = std::max(ll, trial_ll);
        break;
      }
      scale *= 0.5;
      if (half == 39) beta += scale * step;  // forced tiny step
    }
    if (beta.norm() > 1e3)
      throw SeparationError("block '" + name() + "': diverging coefficients "
                            "(|beta| > 1e3), data are separable");
  }
  if (!converged)
    throw NonConvergenceError("block '" + name() + "': Newton did not reach "
                              "score tolerance in 100 iterations");
  theta.segment(offset(), k) = beta;
}

// ---------------------------------------------------------------------------
// DensityRatioBlock

DensityRatioBlock::DensityRatioBlock(std::string name, const RowData* rows,
                                     std::shared_ptr<const RowMat> d_matrix,
                                     double rho, int stage)
    : EquationBlock(std::move(name), static_cast<int>(d_matrix->cols()), stage),
      rows_(rows),
      d_(std::move(d_matrix)),
      rho_(rho) {}

double DensityRatioBlock::log_likelihood(const Eigen::VectorXd& omega) const {
  const double log_rho = std::log(rho_);
  double ll = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    const double u = d_->row(r).dot(omega);
    ll += rows_->internal_row[r] * u - log1pexp(u + log_rho);
  }
  return ll / rows_->n_participants;
}

void DensityRatioBlock::score(const Eigen::VectorXd& theta, int pidx,
                              double* out) const {
  const int k = dim();
  const double log_rho = std::log(rho_);
  const double* omega = theta.data() + offset();
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    const double u = kernels::dot(d_->row(r).data(), omega, k);
    const double q = sigmoid(u + log_rho);  // rho e^u / (1 + rho e^u)
    kernels::axpy(rows_->internal_row[r] - q, d_->row(r).data(), out, k);
  }
}

void DensityRatioBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                      Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int k = dim();
  const double log_rho = std::log(rho_);
  Eigen::VectorXd w(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    const double u = d_->row(r).dot(theta.segment(offset(), k));
    const double q = sigmoid(u + log_rho);
    w[r] = -q * (1.0 - q) / rows_->n_participants;
  }
  RowMat gram_rm = RowMat::Zero(k, k);
  kernels::gram(d_->data(), w.data(), rows_->n_rows, k, gram_rm.data());
  jac.block(0, offset(), k, k) += gram_rm;
}

void DensityRatioBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int k = dim();
  const double log_rho = std::log(rho_);
  Eigen::VectorXd omega = Eigen::VectorXd::Zero(k);
  double ll = log_likelihood(omega);
  bool converged = false;
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd w(rows_->n_rows);
    for (int r = 0; r < rows_->n_rows; ++r) {
      const double u = d_->row(r).dot(omega);
      const double q = sigmoid(u + log_rho);
      kernels::axpy(rows_->internal_row[r] - q, d_->row(r).data(), grad.data(), k);
      w[r] = q * (1.0 - q);
    }
    if (grad.cwiseAbs().maxCoeff() / rows_->n_participants <= 1e-10) {
      converged = true;
      break;
    }
    RowMat hess = RowMat::Zero(k, k);
    kernels::gram(d_->data(), w.data(), rows_->n_rows, k, hess.data());
    Eigen::VectorXd step =
        solve_normal_equations(hess, grad, "block '" + name() + "'");
    const double slack = 1e-12 * (std::abs(ll) + 1.0);
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      const double trial_ll = log_likelihood(omega + scale * step);
      if (trial_ll >= ll - slack) {
        omega += scale * step;
        ll = std::max(ll, trial_ll);
        break;
      }
      scale *= 0.5;
      if (half == 39) omega += scale * step;
    }
    if (omega.norm() > 1e3)
      throw SeparationError("block '" + name() + "': studies are separable in "
                            "the d-features, the density ratio degenerates");
  }
  if (!converged)
    throw NonConvergenceError("block '" + name() + "': tilt likelihood did "
                              "not converge in 100 iterations");

  // With separable studies the likelihood saturates at a finite omega whose
  // fitted log ratio diverges row-wise; flag that instead of returning a
  // degenerate ratio.
  double max_abs_u = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r)
    max_abs_u = std::max(max_abs_u, std::abs(d_->row(r).dot(omega)));
  if (max_abs_u > 20.0)
    throw SeparationError("block '" + name() + "': fitted log density ratio "
                          "exceeds 20 in magnitude; studies do not overlap in "
                          "the d-features");
  theta.segment(offset(), k) = omega;
}

// ---------------------------------------------------------------------------
// ProportionBlock

ProportionBlock::ProportionBlock(std::string name, const RowData* rows, int stage)
    : EquationBlock(std::move(name), 1, stage), rows_(rows) {}

void ProportionBlock::score(const Eigen::VectorXd& theta, int pidx,
                            double* out) const {
  out[0] += rows_->participant_internal[pidx] - theta[offset()];
}

void ProportionBlock::mean_jacobian(const Eigen::VectorXd&,
                                    Eigen::Ref<Eigen::MatrixXd> jac) const {
  jac(0, offset()) += -1.0;
}

void ProportionBlock::solve_stage(Eigen::VectorXd& theta) const {
  theta[offset()] = rows_->participant_internal.mean();
}

// ---------------------------------------------------------------------------
// standalone fits

namespace {

// Wraps free-standing rows (no dataset) so the block machinery can be reused
// for the standalone operations: each row is its own participant.
RowData rows_from_design(int n_rows) {
  RowData rd;
  rd.n_participants = n_rows;
  rd.n_rows = n_rows;
  rd.row_begin.resize(n_rows + 1);
  for (int i = 0; i <= n_rows; ++i) rd.row_begin[i] = i;
  rd.participant_internal = Eigen::VectorXd::Zero(n_rows);
  rd.internal_row = Eigen::VectorXd::Zero(n_rows);
  rd.y = Eigen::VectorXd::Zero(n_rows);
  rd.a = Eigen::VectorXd::Zero(n_rows);
  return rd;
}

}  // namespace

LogisticFit fit_logistic(const RowMat& design_matrix, const Eigen::VectorXd& labels,
                         const Eigen::VectorXd& weights) {
  const int n = static_cast<int>(design_matrix.rows());
  if (labels.size() != n)
    throw DimensionError("labels length does not match the design matrix");
  auto rows = std::make_shared<RowData>(rows_from_design(n));
  auto design = std::make_shared<RowMat>(design_matrix);
  Eigen::VectorXd mask =
      weights.size() == 0 ? Eigen::VectorXd::Ones(n) : weights;

  StackedSystem system(rows);
  system.add<LogisticBlock>("logistic", rows.get(), design, labels, mask);
  Eigen::VectorXd theta = system.solve(1e-8);
  FitResult fit = system.sandwich(theta, false);

  LogisticFit out;
  out.coefficients = theta;
  out.covariance = fit.covariance();
  out.converged = true;
  return out;
}

ConstantPrFit constant_pr(const CombinedDataset& dataset, int level_count,
                          Population pop) {
  auto rows = std::make_shared<RowData>(flatten(dataset));
  Eigen::VectorXd mask = population_mask(*rows, pop);
  ConstantPrFit fit;
  fit.probs.resize(level_count);
  fit.logits.resize(level_count);
  double count = mask.sum();
  if (count == 0.0) throw ValidationError("constant_pr: empty population");
  for (int level = 1; level <= level_count; ++level) {
    double hits = 0.0;
    for (int r = 0; r < rows->n_rows; ++r)
      if (mask[r] != 0.0 && rows->a[r] == level) hits += 1.0;
    const double p = hits / count;
    if (p <= 0.0 || p >= 1.0)
      throw SeparationError("constant_pr: treatment level " +
                            std::to_string(level) +
                            (p <= 0.0 ? " is never assigned" : " is always assigned"));
    fit.probs[level - 1] = p;
    fit.logits[level - 1] = std::log(p / (1.0 - p));
  }
  return fit;
}

DensityRatioFit fit_density_ratio(const CombinedDataset& dataset,
                                  const FeatureSpec& d_spec) {
  if (dataset.n1 < 1 || dataset.n0 < 1)
    throw ValidationError("fit_density_ratio: both studies must be nonempty");
  if (!d_spec.has_intercept())
    throw ConfigError("fit_density_ratio: d_spec must include an intercept");

  auto rows = std::make_shared<RowData>(flatten(dataset));
  auto d_mat = std::make_shared<RowMat>(rows->features(d_spec));
  const double rho = static_cast<double>(dataset.n1) / dataset.n0;

  StackedSystem system(rows);
  system.add<DensityRatioBlock>("density_ratio", rows.get(), d_mat, rho);
  Eigen::VectorXd theta = system.solve(1e-8);
  FitResult fit = system.sandwich(theta, false);

  DensityRatioFit out;
  out.omega = theta;
  out.covariance = fit.covariance();
  out.d_spec = d_spec;
  out.rho = rho;
  out.converged = true;
  return out;
}

double ratio_weights(const DensityRatioFit& fit,
                     std::span<const double> s_features, bool* clamped) {
  std::vector<double> d = eval_features(s_features, fit.d_spec);
  if (static_cast<int>(d.size()) != fit.omega.size())
    throw DimensionError("ratio_weights: d-feature dimension mismatch");
  double u = kernels::dot(d.data(), fit.omega.data(), d.size());
  bool clip = false;
  if (u > 50.0) {
    u = 50.0;
    clip = true;
  } else if (u < -50.0) {
    u = -50.0;
    clip = true;
  }
  if (clamped) *clamped = clip;
  return std::exp(u);
}

}  // namespace mrtint
