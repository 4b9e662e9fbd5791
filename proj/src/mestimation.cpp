#include "mrtint/mestimation.hpp"

#include <Eigen/Eigenvalues>
#include <cstdio>
#include <algorithm>
#include <cmath>
#include <set>

#include "mrtint/errors.hpp"
#include "mrtint/kernels.hpp"

namespace mrtint {

RowMat RowData::features(const FeatureSpec& spec) const {
  RowMat out(n_rows, spec.dim());
  for (int r = 0; r < n_rows; ++r) {
    std::span<const double> cov(x.row(r).data(), static_cast<std::size_t>(x.cols()));
    eval_features(cov, spec, out.row(r).data());
  }
  return out;
}

Eigen::VectorXd RowData::ph_observed() const {
  if (!ph_supplied)
    throw ValidationError("randomization probabilities are required but absent; "
                          "supply prob_h or configure a propensity fit");
  Eigen::VectorXd out(n_rows);
  for (int r = 0; r < n_rows; ++r) {
    const int level = static_cast<int>(a[r]);
    if (level == 0) {
      out[r] = 1.0 - ph.row(r).sum();
    } else {
      out[r] = ph(r, level - 1);
    }
  }
  return out;
}

RowData flatten(const CombinedDataset& dataset) {
  RowData rd;
  rd.n_participants = static_cast<int>(dataset.trajectories.size());
  rd.level_count = std::max(1, dataset.level_count);
  int rows = 0;
  for (const auto& tr : dataset.trajectories) rows += static_cast<int>(tr.points.size());
  rd.n_rows = rows;
  rd.row_begin.resize(rd.n_participants + 1);
  rd.y.resize(rows);
  rd.a.resize(rows);
  rd.internal_row.resize(rows);
  rd.participant_internal.resize(rd.n_participants);
  rd.x.resize(rows, dataset.covariate_dim);

  bool any_ph = false, all_ph = true;
  for (const auto& tr : dataset.trajectories)
    for (const auto& pt : tr.points) {
      any_ph |= !pt.prob_h.empty();
      all_ph &= !pt.prob_h.empty();
    }
  rd.ph_supplied = any_ph && all_ph;
  if (rd.ph_supplied) rd.ph.resize(rows, rd.level_count);

  int r = 0;
  for (int i = 0; i < rd.n_participants; ++i) {
    const auto& tr = dataset.trajectories[i];
    rd.row_begin[i] = r;
    rd.participant_internal[i] = tr.study_indicator;
    for (const auto& pt : tr.points) {
      rd.y[r] = pt.outcome;
      rd.a[r] = pt.treatment;
      rd.internal_row[r] = tr.study_indicator;
      for (int k = 0; k < dataset.covariate_dim; ++k) rd.x(r, k) = pt.covariates[k];
      if (rd.ph_supplied) {
        if (static_cast<int>(pt.prob_h.size()) != rd.level_count)
          throw DimensionError("prob_h has " + std::to_string(pt.prob_h.size()) +
                               " entries; expected " + std::to_string(rd.level_count));
        for (int j = 0; j < rd.level_count; ++j) rd.ph(r, j) = pt.prob_h[j];
      }
      ++r;
    }
  }
  rd.row_begin[rd.n_participants] = r;
  return rd;
}

void EquationBlock::mean_jacobian(const Eigen::VectorXd&,
                                  Eigen::Ref<Eigen::MatrixXd>) const {
  throw Error("block '" + name_ + "' has no analytic Jacobian");
}

double EquationBlock::score_scale(const Eigen::VectorXd&) const { return 1.0; }

Eigen::VectorXd StackedSystem::mean_score(const Eigen::VectorXd& theta) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(theta_dim_);
  std::vector<double> buf;
  for (const auto& blk : blocks_) {
    buf.assign(blk->dim(), 0.0);
    for (int i = 0; i < rows_->n_participants; ++i)
      blk->score(theta, i, buf.data());
    for (int k = 0; k < blk->dim(); ++k) out[blk->offset() + k] = buf[k];
  }
  return out / static_cast<double>(rows_->n_participants);
}

void StackedSystem::participant_score(const Eigen::VectorXd& theta, int pidx,
                                      double* out) const {
  std::fill(out, out + theta_dim_, 0.0);
  for (const auto& blk : blocks_)
    blk->score(theta, pidx, out + blk->offset());
}

Eigen::VectorXd StackedSystem::solve(double tol) const {
  if (blocks_.empty()) throw Error("empty system");
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(theta_dim_);
  std::set<int> stages;
  for (const auto& blk : blocks_) stages.insert(blk->stage());
  for (int stage : stages)
    for (const auto& blk : blocks_)
      if (blk->stage() == stage) blk->solve_stage(theta);

  const Eigen::VectorXd score = mean_score(theta);
  for (const auto& blk : blocks_) {
    const double resid =
        score.segment(blk->offset(), blk->dim()).cwiseAbs().maxCoeff();
    const double bound = tol * std::max(1.0, blk->score_scale(theta));
    if (!(resid <= bound)) {
      char msg[160];
      std::snprintf(msg, sizeof(msg),
                    "block '%s': stacked score residual %.3e exceeds "
                    "tolerance %.3e",
                    blk->name().c_str(), resid, bound);
      throw NonConvergenceError(msg);
    }
  }
  return theta;
}

Eigen::MatrixXd StackedSystem::fd_mean_jacobian_block(
    const EquationBlock& block, const Eigen::VectorXd& theta) const {
  // central differences, h = 1e-6 * (1 + |theta_j|) per coordinate
  const int n = rows_->n_participants;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(block.dim(), theta_dim_);
  Eigen::VectorXd probe = theta;
  std::vector<double> up(block.dim()), dn(block.dim());
  for (int j = 0; j < theta_dim_; ++j) {
    const double h = 1e-6 * (1.0 + std::abs(theta[j]));
    probe[j] = theta[j] + h;
    std::fill(up.begin(), up.end(), 0.0);
    for (int i = 0; i < n; ++i) block.score(probe, i, up.data());
    probe[j] = theta[j] - h;
    std::fill(dn.begin(), dn.end(), 0.0);
    for (int i = 0; i < n; ++i) block.score(probe, i, dn.data());
    probe[j] = theta[j];
    for (int k = 0; k < block.dim(); ++k)
      jac(k, j) = (up[k] - dn[k]) / (2.0 * h * n);
  }
  return jac;
}

Eigen::MatrixXd StackedSystem::mean_jacobian(const Eigen::VectorXd& theta) const {
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(theta_dim_, theta_dim_);
  for (const auto& blk : blocks_) {
    if (blk->has_analytic_jacobian()) {
      blk->mean_jacobian(theta, jac.middleRows(blk->offset(), blk->dim()));
    } else {
      jac.middleRows(blk->offset(), blk->dim()) =
          fd_mean_jacobian_block(*blk, theta);
    }
  }
  return jac;
}

FitResult StackedSystem::sandwich(const Eigen::VectorXd& theta_hat,
                                  bool dof_adjust) const {
  const int n = rows_->n_participants;
  const int p = theta_dim_;

  // bread: Jacobian of the negative mean score
  Eigen::MatrixXd bread = -mean_jacobian(theta_hat);

  // meat: average outer product of per-participant stacked scores
  Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd u(p);
  for (int i = 0; i < n; ++i) {
    participant_score(theta_hat, i, u.data());
    lower.selfadjointView<Eigen::Lower>().rankUpdate(u);
  }
  Eigen::MatrixXd meat = lower.selfadjointView<Eigen::Lower>();
  meat /= static_cast<double>(n);

  Eigen::FullPivLU<Eigen::MatrixXd> lu(bread);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible())
    throw SingularBreadError("bread matrix is singular (rank " +
                             std::to_string(lu.rank()) + " of " +
                             std::to_string(p) + ")");
  Eigen::MatrixXd binv = lu.inverse();
  Eigen::MatrixXd sigma = binv * meat * binv.transpose();
  if (dof_adjust) {
    if (n <= p)
      throw Error("degrees-of-freedom adjustment undefined: n = " +
                  std::to_string(n) + " <= p = " + std::to_string(p));
    sigma *= static_cast<double>(n) / static_cast<double>(n - p);
  }
  enforce_psd(sigma, "joint sandwich");

  FitResult fit;
  fit.theta = theta_hat;
  fit.sigma = std::move(sigma);
  fit.bread = std::move(bread);
  fit.meat = std::move(meat);
  fit.n = n;
  fit.p = p;
  fit.dof_adjusted = dof_adjust;
  return fit;
}

DeltaResult delta_method(
    const FitResult& fit, const std::vector<int>& phi_idx,
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& transform,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jacobian) {
  const int q = static_cast<int>(phi_idx.size());
  Eigen::VectorXd phi(q);
  for (int i = 0; i < q; ++i) phi[i] = fit.theta[phi_idx[i]];
  Eigen::MatrixXd cov_phi(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j)
      cov_phi(i, j) = fit.sigma(phi_idx[i], phi_idx[j]);
  cov_phi /= static_cast<double>(fit.n);

  DeltaResult out;
  out.estimate = transform(phi);
  Eigen::MatrixXd d = jacobian(phi);
  if (d.cols() != q || d.rows() != out.estimate.size())
    throw DimensionError("delta-method Jacobian has shape " +
                         std::to_string(d.rows()) + "x" + std::to_string(d.cols()) +
                         ", expected " + std::to_string(out.estimate.size()) + "x" +
                         std::to_string(q));
  out.covariance = d * cov_phi * d.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& gram,
                                       const Eigen::VectorXd& rhs,
                                       const std::string& context) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
  if (qr.rank() < gram.cols())
    throw SingularNormalEquationsError(
        context + ": rank-deficient normal equations (rank " +
        std::to_string(qr.rank()) + " of " + std::to_string(gram.cols()) + ")");
  return qr.solve(rhs);
}

void enforce_psd(Eigen::MatrixXd& s, const std::string& context) {
  s = 0.5 * (s + s.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
  const double scale = std::max(1e-300, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-8 * scale)
    throw NotPositiveDefiniteError(context + ": matrix is not positive "
                                   "semidefinite (min eigenvalue " +
                                   std::to_string(es.eigenvalues().minCoeff()) + ")");
}

}  // namespace mrtint
