#include "mrtint/integrate.hpp"

#include <algorithm>
#include <cmath>

#include "mrtint/errors.hpp"
#include "mrtint/kernels.hpp"

namespace mrtint {

// ---------------------------------------------------------------------------
// chi-square tail

double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw DimensionError("gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) {
    // series representation
    double term = 1.0 / a;
    double sum = term;
    double ap = a;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
  }
  // continued fraction (modified Lentz)
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
  return 1.0 - q;
}

double chi2_sf(double x, int dof) {
  if (x <= 0.0) return 1.0;
  return 1.0 - gamma_p(0.5 * dof, 0.5 * x);
}

// ---------------------------------------------------------------------------
// SharedModelRef

double SharedModelRef::effect(const Eigen::VectorXd& theta, int r) const {
  if (zero_beta_s) return 0.0;
  return kernels::dot(fs->row(r).data(), theta.data() + beta_s_offset,
                      beta_s_dim);
}

double SharedModelRef::m(const Eigen::VectorXd& theta, const RowData& rows,
                         int r) const {
  const double base =
      kernels::dot(g->row(r).data(), theta.data() + alpha_offset, alpha_dim);
  if (zero_beta_s) return base;
  const double centered = rows.a[r] - ps.at(theta, rows, r);
  return base + centered * effect(theta, r);
}

// ---------------------------------------------------------------------------
// ProjectionBlock

ProjectionBlock::ProjectionBlock(std::string name, const RowData* rows,
                                 std::shared_ptr<const RowMat> fr,
                                 std::shared_ptr<const RowMat> fs, ProbRef pr,
                                 Eigen::VectorXd mask, int fs_column,
                                 int beta_s_offset, int beta_s_dim, int stage)
    : EquationBlock(std::move(name), static_cast<int>(fr->cols()), stage),
      rows_(rows),
      fr_(std::move(fr)),
      fs_(std::move(fs)),
      pr_(pr),
      mask_(std::move(mask)),
      fs_column_(fs_column),
      beta_s_offset_(beta_s_offset),
      beta_s_dim_(beta_s_dim) {}

double ProjectionBlock::target(const Eigen::VectorXd& theta, int r) const {
  if (fs_column_ >= 0) return (*fs_)(r, fs_column_);
  return kernels::dot(fs_->row(r).data(), theta.data() + beta_s_offset_,
                      beta_s_dim_);
}

void ProjectionBlock::score(const Eigen::VectorXd& theta, int pidx,
                            double* out) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (mask_[r] == 0.0) continue;
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double resid =
        target(theta, r) - kernels::dot(fr_->row(r).data(), beta, dr);
    kernels::axpy(mask_[r] * s2 * resid, fr_->row(r).data(), out, dr);
  }
}

void ProjectionBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int dr = dim();
  Eigen::VectorXd w(rows_->n_rows), wt(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) {
      w[r] = wt[r] = 0.0;
      continue;
    }
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    w[r] = mask_[r] * s2;
    wt[r] = w[r] * target(theta, r);
  }
  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w.data(), rows_->n_rows, dr, gram.data());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dr);
  kernels::weighted_col_sum(fr_->data(), wt.data(), rows_->n_rows, dr, rhs.data());
  theta.segment(offset(), dr) =
      solve_normal_equations(gram, rhs, "block '" + name() + "'");
}

double ProjectionBlock::score_scale(const Eigen::VectorXd& theta) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  double total = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) continue;
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double fitted = std::abs(kernels::dot(fr_->row(r).data(), beta, dr));
    total += mask_[r] * s2 * (std::abs(target(theta, r)) + fitted) *
             fr_->row(r).cwiseAbs().maxCoeff();
  }
  return total / rows_->n_participants;
}

bool ProjectionBlock::has_analytic_jacobian() const {
  return pr_.kind != ProbRef::Kind::logistic_block;
}

void ProjectionBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                    Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int dr = dim();
  const double n = rows_->n_participants;
  const double* beta = theta.data() + offset();

  Eigen::VectorXd w(rows_->n_rows);
  Eigen::VectorXd cross = Eigen::VectorXd::Zero(pr_.is_single_param() ? dr : 0);
  Eigen::MatrixXd dbs = Eigen::MatrixXd::Zero(
      fs_column_ < 0 ? dr : 0, fs_column_ < 0 ? beta_s_dim_ : 0);

  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) {
      w[r] = 0.0;
      continue;
    }
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    w[r] = mask_[r] * s2;
    if (fs_column_ < 0)
      dbs += (mask_[r] * s2) * fr_->row(r).transpose() * fs_->row(r);
    if (pr_.is_single_param()) {
      const double resid =
          target(theta, r) - kernels::dot(fr_->row(r).data(), beta, dr);
      const double ds2 = s2 * (1.0 - 2.0 * p);  // d sigma^2 / d gamma
      cross += (mask_[r] * ds2 * resid) * fr_->row(r).transpose();
    }
  }

  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w.data(), rows_->n_rows, dr, gram.data());
  jac.block(0, offset(), dr, dr) -= gram / n;
  if (fs_column_ < 0)
    jac.block(0, beta_s_offset_, dr, beta_s_dim_) += dbs / n;
  if (pr_.is_single_param())
    jac.col(pr_.cblk->offset()).head(dr) += cross / n;
}

// ---------------------------------------------------------------------------
// DrInternalBlock

DrInternalBlock::DrInternalBlock(std::string name, const RowData* rows,
                                 std::shared_ptr<const RowMat> fr,
                                 SharedModelRef shared, ProbRef pr, ProbRef ph,
                                 int stage)
    : EquationBlock(std::move(name), static_cast<int>(fr->cols()), stage),
      rows_(rows),
      fr_(std::move(fr)),
      shared_(std::move(shared)),
      pr_(pr),
      ph_(ph) {}

void DrInternalBlock::score(const Eigen::VectorXd& theta, int pidx,
                            double* out) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (rows_->internal_row[r] == 0.0) continue;
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double w = wcls_weight(p, ph_.at(theta, *rows_, r), a);
    const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
    const double term = w * (rows_->a[r] - p) * resid +
                        s2 * shared_.effect(theta, r) -
                        s2 * kernels::dot(fr_->row(r).data(), beta, dr);
    kernels::axpy(term, fr_->row(r).data(), out, dr);
  }
}

void DrInternalBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int dr = dim();
  Eigen::VectorXd w(rows_->n_rows), rhs_w(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (rows_->internal_row[r] == 0.0) {
      w[r] = rhs_w[r] = 0.0;
      continue;
    }
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double wt = wcls_weight(p, ph_.at(theta, *rows_, r), a);
    const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
    w[r] = s2;
    rhs_w[r] = wt * (rows_->a[r] - p) * resid + s2 * shared_.effect(theta, r);
  }
  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w.data(), rows_->n_rows, dr, gram.data());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dr);
  kernels::weighted_col_sum(fr_->data(), rhs_w.data(), rows_->n_rows, dr, rhs.data());
  theta.segment(offset(), dr) =
      solve_normal_equations(gram, rhs, "block '" + name() + "'");
}

double DrInternalBlock::score_scale(const Eigen::VectorXd& theta) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  double total = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (rows_->internal_row[r] == 0.0) continue;
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double w = wcls_weight(p, ph_.at(theta, *rows_, r), a);
    const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
    const double terms = std::abs(w * (rows_->a[r] - p) * resid) +
                         s2 * std::abs(shared_.effect(theta, r)) +
                         s2 * std::abs(kernels::dot(fr_->row(r).data(), beta, dr));
    total += terms * fr_->row(r).cwiseAbs().maxCoeff();
  }
  return total / rows_->n_participants;
}

bool DrInternalBlock::has_analytic_jacobian() const {
  if (ph_.kind == ProbRef::Kind::logistic_block) return false;
  if (pr_.kind == ProbRef::Kind::logistic_block) return false;
  if (shared_.ps.kind == ProbRef::Kind::logistic_block) return false;
  return true;
}

void DrInternalBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                    Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int dr = dim();
  const double n = rows_->n_participants;
  const double* beta = theta.data() + offset();
  const bool has_bs = !shared_.zero_beta_s;

  Eigen::VectorXd w_own(rows_->n_rows);
  Eigen::MatrixXd dalpha = Eigen::MatrixXd::Zero(dr, shared_.alpha_dim);
  Eigen::MatrixXd dbs =
      Eigen::MatrixXd::Zero(has_bs ? dr : 0, has_bs ? shared_.beta_s_dim : 0);
  Eigen::VectorXd dps = Eigen::VectorXd::Zero(
      has_bs && shared_.ps.is_single_param() ? dr : 0);
  Eigen::VectorXd dpr = Eigen::VectorXd::Zero(pr_.is_single_param() ? dr : 0);

  for (int r = 0; r < rows_->n_rows; ++r) {
    if (rows_->internal_row[r] == 0.0) {
      w_own[r] = 0.0;
      continue;
    }
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    const double s2 = p * (1.0 - p);
    const double ph = ph_.at(theta, *rows_, r);
    const double wt = wcls_weight(p, ph, a);
    const double centered_r = rows_->a[r] - p;
    const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
    w_own[r] = s2;

    const auto fr_row = fr_->row(r);
    dalpha.noalias() -= (wt * centered_r) * fr_row.transpose() * shared_.g->row(r);
    if (has_bs) {
      const double ps = shared_.ps.at(theta, *rows_, r);
      const double centered_s = rows_->a[r] - ps;
      dbs.noalias() +=
          (-wt * centered_r * centered_s + s2) * fr_row.transpose() * shared_.fs->row(r);
      if (shared_.ps.is_single_param()) {
        const double psdot = ps * (1.0 - ps);
        dps += (wt * centered_r * psdot * shared_.effect(theta, r)) *
               fr_row.transpose();
      }
    }
    if (pr_.is_single_param()) {
      const double pdot = p * (1.0 - p);
      const double dw = (2.0 * a - 1.0) * pdot / (a == 1 ? ph : 1.0 - ph);
      const double proj_resid =
          shared_.effect(theta, r) - kernels::dot(fr_row.data(), beta, dr);
      const double term = (dw * centered_r - wt * pdot) * resid +
                          pdot * (1.0 - 2.0 * p) * proj_resid;
      dpr += term * fr_row.transpose();
    }
  }

  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w_own.data(), rows_->n_rows, dr, gram.data());
  jac.block(0, offset(), dr, dr) -= gram / n;
  jac.block(0, shared_.alpha_offset, dr, shared_.alpha_dim) += dalpha / n;
  if (has_bs)
    jac.block(0, shared_.beta_s_offset, dr, shared_.beta_s_dim) += dbs / n;
  if (has_bs && shared_.ps.is_single_param())
    jac.col(shared_.ps.cblk->offset()).head(dr) += dps / n;
  if (pr_.is_single_param()) jac.col(pr_.cblk->offset()).head(dr) += dpr / n;
}

// ---------------------------------------------------------------------------
// DrExternalBlock

DrExternalBlock::DrExternalBlock(std::string name, const RowData* rows,
                                 std::shared_ptr<const RowMat> fr,
                                 SharedModelRef shared, ProbRef pr, ProbRef ph,
                                 RatioRef ratio, const ProportionBlock* pi_block,
                                 int stage)
    : EquationBlock(std::move(name), static_cast<int>(fr->cols()), stage),
      rows_(rows),
      fr_(std::move(fr)),
      shared_(std::move(shared)),
      pr_(pr),
      ph_(ph),
      ratio_(ratio),
      pi_block_(pi_block) {}

void DrExternalBlock::score(const Eigen::VectorXd& theta, int pidx,
                            double* out) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  const double pi = theta[pi_block_->offset()];
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    double term;
    if (rows_->internal_row[r] == 0.0) {
      const double wt = wcls_weight(p, ph_.at(theta, *rows_, r), a);
      const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
      term = ratio_.at(theta, r) * wt * (rows_->a[r] - p) * resid / (1.0 - pi);
    } else {
      const double s2 = p * (1.0 - p);
      term = s2 *
             (shared_.effect(theta, r) -
              kernels::dot(fr_->row(r).data(), beta, dr)) /
             pi;
    }
    kernels::axpy(term, fr_->row(r).data(), out, dr);
  }
}

void DrExternalBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int dr = dim();
  const double pi = theta[pi_block_->offset()];
  Eigen::VectorXd w(rows_->n_rows), rhs_w(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    if (rows_->internal_row[r] == 0.0) {
      const double wt = wcls_weight(p, ph_.at(theta, *rows_, r), a);
      const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
      w[r] = 0.0;
      rhs_w[r] = ratio_.at(theta, r) * wt * (rows_->a[r] - p) * resid / (1.0 - pi);
    } else {
      const double s2 = p * (1.0 - p);
      w[r] = s2 / pi;
      rhs_w[r] = s2 * shared_.effect(theta, r) / pi;
    }
  }
  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w.data(), rows_->n_rows, dr, gram.data());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dr);
  kernels::weighted_col_sum(fr_->data(), rhs_w.data(), rows_->n_rows, dr, rhs.data());
  theta.segment(offset(), dr) =
      solve_normal_equations(gram, rhs, "block '" + name() + "'");
}

double DrExternalBlock::score_scale(const Eigen::VectorXd& theta) const {
  const int dr = dim();
  const double* beta = theta.data() + offset();
  const double pi = theta[pi_block_->offset()];
  double total = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    double terms;
    if (rows_->internal_row[r] == 0.0) {
      const double w = wcls_weight(p, ph_.at(theta, *rows_, r), a);
      const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
      terms = std::abs(ratio_.at(theta, r) * w * (rows_->a[r] - p) * resid /
                       (1.0 - pi));
    } else {
      const double s2 = p * (1.0 - p);
      terms = s2 *
              (std::abs(shared_.effect(theta, r)) +
               std::abs(kernels::dot(fr_->row(r).data(), beta, dr))) /
              pi;
    }
    total += terms * fr_->row(r).cwiseAbs().maxCoeff();
  }
  return total / rows_->n_participants;
}

bool DrExternalBlock::has_analytic_jacobian() const {
  if (ph_.kind == ProbRef::Kind::logistic_block) return false;
  if (pr_.kind == ProbRef::Kind::logistic_block) return false;
  if (shared_.ps.kind == ProbRef::Kind::logistic_block) return false;
  return true;
}

void DrExternalBlock::mean_jacobian(const Eigen::VectorXd& theta,
                                    Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int dr = dim();
  const double n = rows_->n_participants;
  const double* beta = theta.data() + offset();
  const double pi = theta[pi_block_->offset()];
  const bool has_bs = !shared_.zero_beta_s;
  const bool has_omega = ratio_.depends_on_theta();

  Eigen::VectorXd w_own(rows_->n_rows);
  Eigen::MatrixXd dalpha = Eigen::MatrixXd::Zero(dr, shared_.alpha_dim);
  Eigen::MatrixXd dbs =
      Eigen::MatrixXd::Zero(has_bs ? dr : 0, has_bs ? shared_.beta_s_dim : 0);
  Eigen::VectorXd dps = Eigen::VectorXd::Zero(
      has_bs && shared_.ps.is_single_param() ? dr : 0);
  Eigen::VectorXd dpr = Eigen::VectorXd::Zero(pr_.is_single_param() ? dr : 0);
  Eigen::MatrixXd domega = Eigen::MatrixXd::Zero(
      has_omega ? dr : 0, has_omega ? ratio_.wblk->dim() : 0);
  Eigen::VectorXd dpi = Eigen::VectorXd::Zero(dr);

  for (int r = 0; r < rows_->n_rows; ++r) {
    const int a = static_cast<int>(rows_->a[r]);
    const double p = pr_.at(theta, *rows_, r);
    const auto fr_row = fr_->row(r);
    if (rows_->internal_row[r] == 0.0) {
      w_own[r] = 0.0;
      const double ph = ph_.at(theta, *rows_, r);
      const double wt = wcls_weight(p, ph, a);
      const double ratio = ratio_.at(theta, r);
      const double centered_r = rows_->a[r] - p;
      const double resid = rows_->y[r] - shared_.m(theta, *rows_, r);
      const double base = ratio * wt / (1.0 - pi);

      dalpha.noalias() -= (base * centered_r) * fr_row.transpose() * shared_.g->row(r);
      if (has_bs) {
        const double ps = shared_.ps.at(theta, *rows_, r);
        const double centered_s = rows_->a[r] - ps;
        dbs.noalias() -=
            (base * centered_r * centered_s) * fr_row.transpose() * shared_.fs->row(r);
        if (shared_.ps.is_single_param()) {
          const double psdot = ps * (1.0 - ps);
          dps += (base * centered_r * psdot * shared_.effect(theta, r)) *
                 fr_row.transpose();
        }
      }
      if (pr_.is_single_param()) {
        const double pdot = p * (1.0 - p);
        const double dw = (2.0 * a - 1.0) * pdot / (a == 1 ? ph : 1.0 - ph);
        dpr += (ratio / (1.0 - pi)) * ((dw * centered_r - wt * pdot) * resid) *
               fr_row.transpose();
      }
      if (has_omega) {
        const double s = base * centered_r * resid;
        domega.noalias() +=
            s * fr_row.transpose() * ratio_.wblk->d_matrix().row(r);
      }
      dpi += (base * centered_r * resid / (1.0 - pi)) * fr_row.transpose();
    } else {
      const double s2 = p * (1.0 - p);
      w_own[r] = s2 / pi;
      const double proj_resid =
          shared_.effect(theta, r) - kernels::dot(fr_row.data(), beta, dr);
      if (has_bs)
        dbs.noalias() += (s2 / pi) * fr_row.transpose() * shared_.fs->row(r);
      if (pr_.is_single_param()) {
        const double pdot = p * (1.0 - p);
        dpr += (pdot * (1.0 - 2.0 * p) * proj_resid / pi) * fr_row.transpose();
      }
      dpi -= (s2 * proj_resid / (pi * pi)) * fr_row.transpose();
    }
  }

  RowMat gram = RowMat::Zero(dr, dr);
  kernels::gram(fr_->data(), w_own.data(), rows_->n_rows, dr, gram.data());
  jac.block(0, offset(), dr, dr) -= gram / n;
  jac.block(0, shared_.alpha_offset, dr, shared_.alpha_dim) += dalpha / n;
  if (has_bs)
    jac.block(0, shared_.beta_s_offset, dr, shared_.beta_s_dim) += dbs / n;
  if (has_bs && shared_.ps.is_single_param())
    jac.col(shared_.ps.cblk->offset()).head(dr) += dps / n;
  if (pr_.is_single_param()) jac.col(pr_.cblk->offset()).head(dr) += dpr / n;
  if (has_omega)
    jac.block(0, ratio_.wblk->offset(), dr, ratio_.wblk->dim()) += domega / n;
  jac.col(pi_block_->offset()).head(dr) += dpi / n;
}

// ---------------------------------------------------------------------------
// shared assembly helpers

namespace {

struct Ctx {
  std::shared_ptr<RowData> rows;
  std::shared_ptr<RowMat> g, fr, fs, d;
  double rho = 1.0;
  int n1 = 0, n0 = 0;
};

Ctx make_ctx(const CombinedDataset& dataset, const ModeratorConfig& config,
             const IntegrateOptions& options, bool require_external,
             bool need_d = false) {
  validate_or_throw(dataset, config, options.epsilon, require_external);
  Ctx ctx;
  ctx.rows = std::make_shared<RowData>(flatten(dataset));
  ctx.g = std::make_shared<RowMat>(ctx.rows->features(config.g));
  ctx.fr = std::make_shared<RowMat>(ctx.rows->features(config.f_r));
  ctx.fs = std::make_shared<RowMat>(ctx.rows->features(config.f_s));
  if (need_d) ctx.d = std::make_shared<RowMat>(ctx.rows->features(config.d));
  ctx.n1 = dataset.n1;
  ctx.n0 = dataset.n0;
  if (dataset.n0 > 0) ctx.rho = static_cast<double>(dataset.n1) / dataset.n0;
  return ctx;
}

ProbRef add_ph(StackedSystem& system, Ctx& ctx, const IntegrateOptions& options) {
  if (!options.estimate_ph) {
    if (!ctx.rows->ph_supplied)
      throw ValidationError("randomization probabilities absent: supply "
                            "prob_h or set estimate_ph with a p_h feature spec");
    return ProbRef::supplied();
  }
  auto design = std::make_shared<RowMat>(ctx.rows->n_rows,
                                         options.ph_spec.dim() + 1);
  RowMat base = ctx.rows->features(options.ph_spec);
  // study indicator enters the treatment model alongside the covariates
  design->leftCols(options.ph_spec.dim()) = base;
  design->rightCols(1) = ctx.rows->internal_row;
  auto* blk = system.add<LogisticBlock>("p_h", ctx.rows.get(), design,
                                        ctx.rows->a,
                                        Eigen::VectorXd::Ones(ctx.rows->n_rows), 0);
  return ProbRef::logistic(blk);
}

struct ConstProb {
  ProbRef ref;
  const ConstantProbBlock* blk = nullptr;
};

ConstProb add_const_p(StackedSystem& system, Ctx& ctx, const std::string& name,
                      Population pop) {
  ConstProb out;
  out.blk = system.add<ConstantProbBlock>(name, ctx.rows.get(), pop, 1, 0);
  out.ref = ProbRef::constant(out.blk);
  return out;
}

struct RatioSetup {
  RatioRef ref;
  const DensityRatioBlock* blk = nullptr;
};

RatioSetup add_ratio(StackedSystem& system, Ctx& ctx,
                     const IntegrateOptions& options) {
  RatioSetup out;
  if (options.oracle_log_ratio) {
    auto log_ratio = std::make_shared<Eigen::VectorXd>(ctx.rows->n_rows);
    for (int r = 0; r < ctx.rows->n_rows; ++r) {
      std::span<const double> cov(ctx.rows->x.row(r).data(),
                                  static_cast<std::size_t>(ctx.rows->x.cols()));
      (*log_ratio)[r] = options.oracle_log_ratio(cov);
    }
    out.ref = RatioRef::fixed(std::move(log_ratio));
    return out;
  }
  if (options.fixed_omega) {
    auto log_ratio = std::make_shared<Eigen::VectorXd>(ctx.rows->n_rows);
    if (options.fixed_omega->size() != ctx.d->cols())
      throw DimensionError("fixed_omega dimension does not match d spec");
    Eigen::VectorXd u = (*ctx.d) * (*options.fixed_omega);
    *log_ratio = u;
    out.ref = RatioRef::fixed(std::move(log_ratio));
    return out;
  }
  out.blk = system.add<DensityRatioBlock>("omega", ctx.rows.get(), ctx.d,
                                          ctx.rho, 0);
  out.ref = RatioRef::omega(out.blk);
  return out;
}

EstimatorOutput make_output(const std::string& method, const FitResult& fit,
                            int offset, int dim, const Ctx& ctx) {
  EstimatorOutput out;
  out.method = method;
  out.beta_r = fit.theta.segment(offset, dim);
  out.covariance = fit.covariance_block(offset, dim);
  out.se = out.covariance.diagonal().cwiseSqrt();
  out.ci95.resize(dim, 2);
  for (int i = 0; i < dim; ++i) {
    out.ci95(i, 0) = out.beta_r[i] - 1.96 * out.se[i];
    out.ci95(i, 1) = out.beta_r[i] + 1.96 * out.se[i];
  }
  out.n_internal = ctx.n1;
  out.n_external = ctx.n0;
  return out;
}

EstimatorOutput output_from_meta(const std::string& method, const MetaResult& meta,
                                 const Ctx& ctx) {
  EstimatorOutput out;
  out.method = method;
  out.beta_r = meta.beta;
  out.covariance = meta.covariance;
  out.se = out.covariance.diagonal().cwiseSqrt();
  const int dim = static_cast<int>(meta.beta.size());
  out.ci95.resize(dim, 2);
  for (int i = 0; i < dim; ++i) {
    out.ci95(i, 0) = out.beta_r[i] - 1.96 * out.se[i];
    out.ci95(i, 1) = out.beta_r[i] + 1.96 * out.se[i];
  }
  out.n_internal = ctx.n1;
  out.n_external = ctx.n0;
  return out;
}

// Stacked estimates for the meta layer pulled from a joint fit.
StackedEstimates stack_from_fit(const FitResult& fit,
                                const std::vector<std::pair<int, int>>& slices) {
  const int J = static_cast<int>(slices.size());
  const int P = slices.front().second;
  StackedEstimates est;
  est.J = J;
  est.P = P;
  est.n = fit.n;
  est.theta.resize(J * P);
  est.sigma.resize(J * P, J * P);
  for (int j = 0; j < J; ++j) {
    est.theta.segment(j * P, P) = fit.theta.segment(slices[j].first, P);
    for (int k = 0; k < J; ++k)
      est.sigma.block(j * P, k * P, P, P) =
          fit.sigma.block(slices[j].first, slices[k].first, P, P);
  }
  return est;
}

void record_extreme_weights(const Eigen::VectorXd& theta, const RatioRef& ratio,
                            const RowData& rows, NuisanceReport& report) {
  std::vector<double> weights;
  for (int r = 0; r < rows.n_rows; ++r)
    if (rows.internal_row[r] == 0.0) weights.push_back(ratio.at(theta, r));
  if (weights.size() < 2) return;
  std::sort(weights.begin(), weights.end());
  const double median = weights[weights.size() / 2];
  const double max = weights.back();
  if (median > 0.0 && max / median > 1e3)
    report.warnings.push_back(
        "extreme density-ratio weights: max/median = " +
        std::to_string(max / median) + "; study overlap may be poor");
}

}  // namespace

// ---------------------------------------------------------------------------
// estimators

EstimatorOutput wcls_estimator(const CombinedDataset& dataset,
                               const ModeratorConfig& config, Population pop,
                               const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, pop == Population::all);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", pop);
  auto* blk = system.add<WclsBlock>("wcls", ctx.rows.get(), ctx.g, ctx.fr,
                                    pr.ref, ph, population_mask(*ctx.rows, pop),
                                    RatioRef::none(), 1);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  EstimatorOutput out = make_output(
      pop == Population::all ? "WCLS-Pooled" : "WCLS-Internal", fit,
      blk->beta_offset(), blk->beta_dim(), ctx);
  out.nuisance.p_r = pr.blk->prob(theta);
  return out;
}

GammaEstimate estimate_gamma(const CombinedDataset& dataset,
                             const ModeratorConfig& config,
                             const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, false);
  const int c = config.common_count;
  const int dr = config.f_r.dim();
  const int ds = config.f_s.dim();

  GammaEstimate out;
  out.c = c;
  out.d_r = dr;
  out.d_s = ds;
  out.gamma = Eigen::MatrixXd::Zero(dr, ds);
  for (int j = 0; j < c; ++j) out.gamma(j, j) = 1.0;
  if (c == ds) return out;

  StackedSystem system(ctx.rows);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  std::vector<const ProjectionBlock*> cols;
  for (int j = c; j < ds; ++j)
    cols.push_back(system.add<ProjectionBlock>(
        "gamma:" + std::to_string(j + 1), ctx.rows.get(), ctx.fr, ctx.fs,
        pr.ref, ctx.rows->internal_row, j, 0, 0, 1));
  Eigen::VectorXd theta = system.solve();
  for (int j = c; j < ds; ++j)
    out.gamma.col(j) = theta.segment(cols[j - c]->offset(), dr);
  return out;
}

namespace {

// Shared-model WCLS pieces used by P-WCLS, A-WCLS, DR and PET: the p_s
// centering fit and the (alpha_s, beta_s) block on the configured
// population.
struct SharedPieces {
  ConstProb ps;
  const WclsBlock* wcls_s = nullptr;
};

SharedPieces add_shared_model(StackedSystem& system, Ctx& ctx, ProbRef ph,
                              const IntegrateOptions& options) {
  const Population pop =
      options.beta_s_pooled ? Population::all : Population::internal;
  SharedPieces pieces;
  pieces.ps = add_const_p(system, ctx, "p_s", pop);
  pieces.wcls_s = system.add<WclsBlock>("wcls_s", ctx.rows.get(), ctx.g, ctx.fs,
                                        pieces.ps.ref, ph,
                                        population_mask(*ctx.rows, pop),
                                        RatioRef::none(), 1);
  return pieces;
}

SharedModelRef shared_ref(const Ctx& ctx, const SharedPieces& pieces,
                          const IntegrateOptions& options) {
  SharedModelRef ref;
  ref.g = ctx.g;
  ref.fs = ctx.fs;
  ref.alpha_offset = pieces.wcls_s->alpha_offset();
  ref.alpha_dim = pieces.wcls_s->alpha_dim();
  ref.beta_s_offset = pieces.wcls_s->beta_offset();
  ref.beta_s_dim = pieces.wcls_s->beta_dim();
  ref.ps = pieces.ps.ref;
  ref.zero_beta_s = options.zero_beta_s;
  return ref;
}

}  // namespace

EstimatorOutput pwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                      const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, options.beta_s_pooled);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  auto* proj = system.add<ProjectionBlock>(
      "beta_r", ctx.rows.get(), ctx.fr, ctx.fs, pr.ref, ctx.rows->internal_row,
      -1, shared.wcls_s->beta_offset(), shared.wcls_s->beta_dim(), 2);

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  EstimatorOutput out = make_output(
      options.beta_s_pooled ? "P-WCLS-Pooled" : "P-WCLS-Internal", fit,
      proj->offset(), proj->dim(), ctx);
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  return out;
}

EstimatorOutput awcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                      const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, options.beta_s_pooled);
  const int c = config.common_count;
  const int dr = config.f_r.dim();
  const int ds = config.f_s.dim();
  const int n_free = ds - c;

  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  std::vector<const ProjectionBlock*> cols;
  for (int j = c; j < ds; ++j)
    cols.push_back(system.add<ProjectionBlock>(
        "gamma:" + std::to_string(j + 1), ctx.rows.get(), ctx.fr, ctx.fs,
        pr.ref, ctx.rows->internal_row, j, 0, 0, 2));

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);

  // phi = (beta_s, gamma_{c+1}, ..., gamma_{d_s})
  std::vector<int> phi_idx;
  for (int i = 0; i < ds; ++i) phi_idx.push_back(shared.wcls_s->beta_offset() + i);
  for (const auto* blk : cols)
    for (int i = 0; i < dr; ++i) phi_idx.push_back(blk->offset() + i);

  auto build_gamma = [=](const Eigen::VectorXd& phi) {
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(dr, ds);
    for (int j = 0; j < c; ++j) gamma(j, j) = 1.0;
    for (int j = 0; j < n_free; ++j)
      gamma.col(c + j) = phi.segment(ds + j * dr, dr);
    return gamma;
  };
  auto transform = [=](const Eigen::VectorXd& phi) -> Eigen::VectorXd {
    return build_gamma(phi) * phi.head(ds);
  };
  auto jacobian = [=](const Eigen::VectorXd& phi) -> Eigen::MatrixXd {
    Eigen::MatrixXd d(dr, ds + n_free * dr);
    d.leftCols(ds) = build_gamma(phi);
    for (int j = 0; j < n_free; ++j)
      d.block(0, ds + j * dr, dr, dr) =
          phi[c + j] * Eigen::MatrixXd::Identity(dr, dr);
    return d;
  };

  DeltaResult delta = delta_method(fit, phi_idx, transform, jacobian);
  EstimatorOutput out;
  out.method = "A-WCLS";
  out.beta_r = delta.estimate;
  out.covariance = delta.covariance;
  out.se = out.covariance.diagonal().cwiseSqrt();
  out.ci95.resize(dr, 2);
  for (int i = 0; i < dr; ++i) {
    out.ci95(i, 0) = out.beta_r[i] - 1.96 * out.se[i];
    out.ci95(i, 1) = out.beta_r[i] + 1.96 * out.se[i];
  }
  out.n_internal = ctx.n1;
  out.n_external = ctx.n0;
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  return out;
}

EstimatorOutput etwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                       const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, true, true);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  RatioSetup ratio = add_ratio(system, ctx, options);
  auto* blk = system.add<WclsBlock>("wcls_et", ctx.rows.get(), ctx.g, ctx.fr,
                                    pr.ref, ph,
                                    population_mask(*ctx.rows, Population::external),
                                    ratio.ref, 1);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  EstimatorOutput out =
      make_output("ET-WCLS", fit, blk->beta_offset(), blk->beta_dim(), ctx);
  out.nuisance.p_r = pr.blk->prob(theta);
  if (ratio.blk != nullptr)
    out.nuisance.omega = theta.segment(ratio.blk->offset(), ratio.blk->dim());
  record_extreme_weights(theta, ratio.ref, *ctx.rows, out.nuisance);
  return out;
}

EstimatorOutput etwcls_pooled(const CombinedDataset& dataset,
                              const ModeratorConfig& config,
                              const IntegrateOptions& options, EtPooling pooling) {
  Ctx ctx = make_ctx(dataset, config, options, true, true);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  RatioSetup ratio = add_ratio(system, ctx, options);
  auto* internal = system.add<WclsBlock>(
      "wcls_internal", ctx.rows.get(), ctx.g, ctx.fr, pr.ref, ph,
      ctx.rows->internal_row, RatioRef::none(), 1);
  auto* tilted = system.add<WclsBlock>(
      "wcls_et", ctx.rows.get(), ctx.g, ctx.fr, pr.ref, ph,
      population_mask(*ctx.rows, Population::external), ratio.ref, 1);

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  StackedEstimates est =
      stack_from_fit(fit, {{internal->beta_offset(), internal->beta_dim()},
                           {tilted->beta_offset(), tilted->beta_dim()}});
  MetaResult meta;
  std::string label = "ET-WCLS";
  switch (pooling) {
    case EtPooling::optimal:
      meta = meta_combine(est);
      break;
    case EtPooling::kronecker:
      meta = meta_combine_kronecker(est);
      label = "ET-WCLS-Kron";
      break;
    case EtPooling::equal:
      meta = meta_combine_fixed(est, Eigen::Vector2d(0.5, 0.5));
      label = "ET-WCLS-Equal";
      break;
  }
  EstimatorOutput out = output_from_meta(label, meta, ctx);
  out.nuisance.p_r = pr.blk->prob(theta);
  if (ratio.blk != nullptr)
    out.nuisance.omega = theta.segment(ratio.blk->offset(), ratio.blk->dim());
  record_extreme_weights(theta, ratio.ref, *ctx.rows, out.nuisance);
  out.constituents.push_back(
      {"WCLS-Internal", fit.theta.segment(internal->beta_offset(), internal->beta_dim()),
       fit.covariance_block(internal->beta_offset(), internal->beta_dim())});
  out.constituents.push_back(
      {"ET-WCLS-Raw", fit.theta.segment(tilted->beta_offset(), tilted->beta_dim()),
       fit.covariance_block(tilted->beta_offset(), tilted->beta_dim())});
  return out;
}

EstimatorOutput dr_internal(const CombinedDataset& dataset,
                            const ModeratorConfig& config,
                            const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, options.beta_s_pooled);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  auto* blk = system.add<DrInternalBlock>("dr_internal", ctx.rows.get(), ctx.fr,
                                          shared_ref(ctx, shared, options),
                                          pr.ref, ph, 2);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  EstimatorOutput out =
      make_output("DR-WCLS-Internal", fit, blk->offset(), blk->dim(), ctx);
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  return out;
}

EstimatorOutput dr_external(const CombinedDataset& dataset,
                            const ModeratorConfig& config,
                            const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, true, true);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  RatioSetup ratio = add_ratio(system, ctx, options);
  auto* pi = system.add<ProportionBlock>("pi", ctx.rows.get(), 0);
  auto* blk = system.add<DrExternalBlock>("dr_external", ctx.rows.get(), ctx.fr,
                                          shared_ref(ctx, shared, options),
                                          pr.ref, ph, ratio.ref, pi, 2);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  EstimatorOutput out =
      make_output("DR-WCLS-External", fit, blk->offset(), blk->dim(), ctx);
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  out.nuisance.pi = theta[pi->offset()];
  if (ratio.blk != nullptr)
    out.nuisance.omega = theta.segment(ratio.blk->offset(), ratio.blk->dim());
  record_extreme_weights(theta, ratio.ref, *ctx.rows, out.nuisance);
  return out;
}

EstimatorOutput drwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                       const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, true, true);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  RatioSetup ratio = add_ratio(system, ctx, options);
  auto* pi = system.add<ProportionBlock>("pi", ctx.rows.get(), 0);
  SharedModelRef sref = shared_ref(ctx, shared, options);
  auto* internal = system.add<DrInternalBlock>("dr_internal", ctx.rows.get(),
                                               ctx.fr, sref, pr.ref, ph, 2);
  auto* external = system.add<DrExternalBlock>("dr_external", ctx.rows.get(),
                                               ctx.fr, sref, pr.ref, ph,
                                               ratio.ref, pi, 2);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  StackedEstimates est =
      stack_from_fit(fit, {{internal->offset(), internal->dim()},
                           {external->offset(), external->dim()}});
  MetaResult meta = meta_combine(est);
  EstimatorOutput out = output_from_meta("DR-WCLS", meta, ctx);
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  out.nuisance.pi = theta[pi->offset()];
  if (ratio.blk != nullptr)
    out.nuisance.omega = theta.segment(ratio.blk->offset(), ratio.blk->dim());
  record_extreme_weights(theta, ratio.ref, *ctx.rows, out.nuisance);
  out.constituents.push_back(
      {"DR-WCLS-Internal", fit.theta.segment(internal->offset(), internal->dim()),
       fit.covariance_block(internal->offset(), internal->dim())});
  out.constituents.push_back(
      {"DR-WCLS-External", fit.theta.segment(external->offset(), external->dim()),
       fit.covariance_block(external->offset(), external->dim())});
  return out;
}

EstimatorOutput petwcls(const CombinedDataset& dataset, const ModeratorConfig& config,
                        const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, true, true);
  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  SharedPieces shared = add_shared_model(system, ctx, ph, options);
  ConstProb pr = add_const_p(system, ctx, "p_r", Population::internal);
  RatioSetup ratio = add_ratio(system, ctx, options);

  auto* internal = system.add<WclsBlock>(
      "wcls_internal", ctx.rows.get(), ctx.g, ctx.fr, pr.ref, ph,
      ctx.rows->internal_row, RatioRef::none(), 1);
  auto* proj = system.add<ProjectionBlock>(
      "beta_r_p", ctx.rows.get(), ctx.fr, ctx.fs, pr.ref, ctx.rows->internal_row,
      -1, shared.wcls_s->beta_offset(), shared.wcls_s->beta_dim(), 2);
  auto* tilted = system.add<WclsBlock>(
      "wcls_et", ctx.rows.get(), ctx.g, ctx.fr, pr.ref, ph,
      population_mask(*ctx.rows, Population::external), ratio.ref, 1);

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);
  StackedEstimates est =
      stack_from_fit(fit, {{internal->beta_offset(), internal->beta_dim()},
                           {proj->offset(), proj->dim()},
                           {tilted->beta_offset(), tilted->beta_dim()}});
  MetaResult meta = meta_combine(est);
  EstimatorOutput out = output_from_meta("PET-WCLS", meta, ctx);
  out.nuisance.p_s = shared.ps.blk->prob(theta);
  out.nuisance.p_r = pr.blk->prob(theta);
  if (ratio.blk != nullptr)
    out.nuisance.omega = theta.segment(ratio.blk->offset(), ratio.blk->dim());
  record_extreme_weights(theta, ratio.ref, *ctx.rows, out.nuisance);
  out.constituents.push_back(
      {"WCLS-Internal", fit.theta.segment(internal->beta_offset(), internal->beta_dim()),
       fit.covariance_block(internal->beta_offset(), internal->beta_dim())});
  out.constituents.push_back(
      {"P-WCLS", fit.theta.segment(proj->offset(), proj->dim()),
       fit.covariance_block(proj->offset(), proj->dim())});
  out.constituents.push_back(
      {"ET-WCLS-Raw", fit.theta.segment(tilted->beta_offset(), tilted->beta_dim()),
       fit.covariance_block(tilted->beta_offset(), tilted->beta_dim())});
  return out;
}

SharedEffectsTest shared_effects_test(const CombinedDataset& dataset,
                                      const ModeratorConfig& config,
                                      const IntegrateOptions& options) {
  Ctx ctx = make_ctx(dataset, config, options, true);
  const int ds = config.f_s.dim();

  // moderators [f_s, I x f_s] on the pooled rows
  auto fs2 = std::make_shared<RowMat>(ctx.rows->n_rows, 2 * ds);
  fs2->leftCols(ds) = *ctx.fs;
  for (int r = 0; r < ctx.rows->n_rows; ++r)
    fs2->row(r).tail(ds) = ctx.fs->row(r) * ctx.rows->internal_row[r];

  StackedSystem system(ctx.rows);
  ProbRef ph = add_ph(system, ctx, options);
  ConstProb ps = add_const_p(system, ctx, "p_s", Population::all);
  auto* blk = system.add<WclsBlock>("wcls_interaction", ctx.rows.get(), ctx.g,
                                    fs2, ps.ref, ph,
                                    population_mask(*ctx.rows, Population::all),
                                    RatioRef::none(), 1);
  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, options.dof_adjust);

  const int off = blk->beta_offset() + ds;  // interaction slice
  Eigen::VectorXd b = theta.segment(off, ds);
  Eigen::MatrixXd v = fit.covariance_block(off, ds);
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError("shared_effects_test: interaction covariance "
                                   "is not positive definite");
  SharedEffectsTest out;
  out.statistic = b.dot(llt.solve(b));
  out.dof = ds;
  out.p_value = chi2_sf(out.statistic, ds);
  return out;
}

}  // namespace mrtint
