#include "mrtint/wcls.hpp"

#include <cmath>
#include <limits>

#include "mrtint/errors.hpp"
#include "mrtint/kernels.hpp"

namespace mrtint {

// ---------------------------------------------------------------------------
// ProbRef / RatioRef

ProbRef ProbRef::fixed(double value, int level) {
  ProbRef p;
  p.kind = Kind::fixed;
  p.fixed_value = value;
  p.level = level;
  return p;
}

ProbRef ProbRef::supplied(int level) {
  ProbRef p;
  p.kind = Kind::supplied_ph;
  p.level = level;
  return p;
}

ProbRef ProbRef::constant(const ConstantProbBlock* blk, int level) {
  ProbRef p;
  p.kind = Kind::const_block;
  p.cblk = blk;
  p.level = level;
  return p;
}

ProbRef ProbRef::logistic(const LogisticBlock* blk, int level) {
  ProbRef p;
  p.kind = Kind::logistic_block;
  p.lblk = blk;
  p.level = level;
  return p;
}

double ProbRef::at(const Eigen::VectorXd& theta, const RowData& rows,
                   int row) const {
  switch (kind) {
    case Kind::fixed:
      return fixed_value;
    case Kind::supplied_ph:
      return rows.ph(row, level - 1);
    case Kind::const_block:
      return cblk->prob(theta);
    case Kind::logistic_block:
      return lblk->prob(theta, row);
  }
  return 0.5;
}

RatioRef RatioRef::none() { return RatioRef{}; }

RatioRef RatioRef::omega(const DensityRatioBlock* blk) {
  RatioRef r;
  r.kind = Kind::omega_block;
  r.wblk = blk;
  return r;
}

RatioRef RatioRef::fixed(std::shared_ptr<const Eigen::VectorXd> log_ratio) {
  RatioRef r;
  r.kind = Kind::fixed_log;
  r.fixed_log = std::move(log_ratio);
  return r;
}

double RatioRef::at(const Eigen::VectorXd& theta, int row) const {
  double u = 0.0;
  switch (kind) {
    case Kind::none:
      return 1.0;
    case Kind::omega_block:
      u = kernels::dot(wblk->d_matrix().row(row).data(),
                       theta.data() + wblk->offset(), wblk->dim());
      break;
    case Kind::fixed_log:
      u = (*fixed_log)[row];
      break;
  }
  if (u > 50.0) u = 50.0;
  if (u < -50.0) u = -50.0;
  return std::exp(u);
}

double wcls_weight(double p_r_at, double p_h_at, int a) {
  const double num = a == 1 ? p_r_at : 1.0 - p_r_at;
  const double den = a == 1 ? p_h_at : 1.0 - p_h_at;
  return num / den;
}

// ---------------------------------------------------------------------------
// WclsBlock

WclsBlock::WclsBlock(std::string name, const RowData* rows,
                     std::shared_ptr<const RowMat> g_matrix,
                     std::shared_ptr<const RowMat> f_matrix, ProbRef center,
                     ProbRef ph, Eigen::VectorXd mask, RatioRef ratio, int stage)
    : EquationBlock(std::move(name),
                    static_cast<int>(g_matrix->cols() + f_matrix->cols()), stage),
      rows_(rows),
      g_(std::move(g_matrix)),
      f_(std::move(f_matrix)),
      center_(center),
      ph_(ph),
      mask_(std::move(mask)),
      ratio_(ratio) {}

void WclsBlock::row_terms(const Eigen::VectorXd& theta, int r, double* weight,
                          double* center_p) const {
  const int a = static_cast<int>(rows_->a[r]);
  const double p = center_.at(theta, *rows_, r);
  const double ph = ph_.at(theta, *rows_, r);
  *center_p = p;
  *weight = mask_[r] * ratio_.at(theta, r) * wcls_weight(p, ph, a);
}

void WclsBlock::score(const Eigen::VectorXd& theta, int pidx, double* out) const {
  const int qg = alpha_dim();
  const int df = beta_dim();
  const double* alpha = theta.data() + offset();
  const double* beta = alpha + qg;
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (mask_[r] == 0.0) continue;
    double w, p;
    row_terms(theta, r, &w, &p);
    const double centered = rows_->a[r] - p;
    const double* g = g_->row(r).data();
    const double* f = f_->row(r).data();
    const double resid = rows_->y[r] - kernels::dot(g, alpha, qg) -
                         centered * kernels::dot(f, beta, df);
    kernels::axpy(w * resid, g, out, qg);
    kernels::axpy(w * resid * centered, f, out + qg, df);
  }
}

void WclsBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int qg = alpha_dim();
  const int df = beta_dim();
  const int k = qg + df;
  RowMat design(rows_->n_rows, k);
  Eigen::VectorXd w(rows_->n_rows), wy(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) {
      w[r] = 0.0;
      wy[r] = 0.0;
      design.row(r).setZero();
      continue;
    }
    double weight, p;
    row_terms(theta, r, &weight, &p);
    const double centered = rows_->a[r] - p;
    design.row(r).head(qg) = g_->row(r);
    design.row(r).tail(df) = f_->row(r) * centered;
    w[r] = weight;
    wy[r] = weight * rows_->y[r];
  }
  RowMat gram = RowMat::Zero(k, k);
  kernels::gram(design.data(), w.data(), rows_->n_rows, k, gram.data());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
  kernels::weighted_col_sum(design.data(), wy.data(), rows_->n_rows, k, rhs.data());
  theta.segment(offset(), k) =
      solve_normal_equations(gram, rhs, "block '" + name() + "'");
}

double WclsBlock::score_scale(const Eigen::VectorXd& theta) const {
  const int qg = alpha_dim();
  const int df = beta_dim();
  const double* alpha = theta.data() + offset();
  const double* beta = alpha + qg;
  double total = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) continue;
    double w, p;
    row_terms(theta, r, &w, &p);
    const double centered = rows_->a[r] - p;
    const double* g = g_->row(r).data();
    const double* f = f_->row(r).data();
    double xmax = 0.0;
    for (int j = 0; j < qg; ++j) xmax = std::max(xmax, std::abs(g[j]));
    for (int j = 0; j < df; ++j) xmax = std::max(xmax, std::abs(centered * f[j]));
    const double fitted = std::abs(kernels::dot(g, alpha, qg)) +
                          std::abs(centered * kernels::dot(f, beta, df));
    total += std::abs(w) * (std::abs(rows_->y[r]) + fitted) * xmax;
  }
  return total / rows_->n_participants;
}

bool WclsBlock::has_analytic_jacobian() const {
  if (ph_.kind == ProbRef::Kind::logistic_block) return false;
  if (center_.kind == ProbRef::Kind::logistic_block) return false;
  return true;
}

void WclsBlock::mean_jacobian(const Eigen::VectorXd& theta,
                              Eigen::Ref<Eigen::MatrixXd> jac) const {
  const int qg = alpha_dim();
  const int df = beta_dim();
  const int k = qg + df;
  const double n = rows_->n_participants;
  const double* alpha = theta.data() + offset();
  const double* beta = alpha + qg;

  RowMat design(rows_->n_rows, k);
  Eigen::VectorXd w(rows_->n_rows);
  const bool cross_center = center_.is_single_param();
  const bool cross_omega = ratio_.depends_on_theta();
  Eigen::VectorXd cross_col = Eigen::VectorXd::Zero(cross_center ? k : 0);
  Eigen::MatrixXd omega_cols =
      Eigen::MatrixXd::Zero(cross_omega ? k : 0, cross_omega ? ratio_.wblk->dim() : 0);

  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) {
      w[r] = 0.0;
      design.row(r).setZero();
      continue;
    }
    double weight, p;
    row_terms(theta, r, &weight, &p);
    const double centered = rows_->a[r] - p;
    design.row(r).head(qg) = g_->row(r);
    design.row(r).tail(df) = f_->row(r) * centered;
    w[r] = weight;

    if (cross_center || cross_omega) {
      const double* g = g_->row(r).data();
      const double* f = f_->row(r).data();
      const double fb = kernels::dot(f, beta, df);
      const double resid =
          rows_->y[r] - kernels::dot(g, alpha, qg) - centered * fb;
      if (cross_center) {
        // d score / d gamma for p = sigmoid(gamma):
        //   dW/dgamma * e * x + W * (pdot f'beta) * x + W * e * [0; -pdot f]
        const double pdot = p * (1.0 - p);
        const int a = static_cast<int>(rows_->a[r]);
        const double ph = ph_.at(theta, *rows_, r);
        const double dw = mask_[r] * ratio_.at(theta, r) * (2.0 * a - 1.0) *
                          pdot / (a == 1 ? ph : 1.0 - ph);
        const double c1 = dw * resid + weight * pdot * fb;
        for (int j = 0; j < qg; ++j) cross_col[j] += c1 * g[j];
        for (int j = 0; j < df; ++j)
          cross_col[qg + j] += c1 * centered * f[j] - weight * resid * pdot * f[j];
      }
      if (cross_omega) {
        // d score / d omega = (row score) * d(S)'
        const double s = weight * resid;
        const double* d = ratio_.wblk->d_matrix().row(r).data();
        for (int j = 0; j < qg; ++j)
          for (int m = 0; m < ratio_.wblk->dim(); ++m)
            omega_cols(j, m) += s * g[j] * d[m];
        for (int j = 0; j < df; ++j)
          for (int m = 0; m < ratio_.wblk->dim(); ++m)
            omega_cols(qg + j, m) += s * centered * f[j] * d[m];
      }
    }
  }

  RowMat gram = RowMat::Zero(k, k);
  kernels::gram(design.data(), w.data(), rows_->n_rows, k, gram.data());
  jac.block(0, offset(), k, k) -= gram / n;
  if (cross_center)
    jac.col(center_.cblk->offset()).head(k) += cross_col / n;
  if (cross_omega)
    jac.block(0, ratio_.wblk->offset(), k, ratio_.wblk->dim()) += omega_cols / n;
}

// ---------------------------------------------------------------------------
// MultilevelWclsBlock

namespace {

int multilevel_dim(const RowMat& g,
                   const std::vector<std::shared_ptr<const RowMat>>& f) {
  int dim = static_cast<int>(g.cols());
  for (const auto& m : f) dim += static_cast<int>(m->cols());
  return dim;
}

}  // namespace

MultilevelWclsBlock::MultilevelWclsBlock(
    std::string name, const RowData* rows, std::shared_ptr<const RowMat> g_matrix,
    std::vector<std::shared_ptr<const RowMat>> f_matrices,
    std::vector<ProbRef> centers, Eigen::VectorXd mask, int stage)
    : EquationBlock(std::move(name), multilevel_dim(*g_matrix, f_matrices), stage),
      rows_(rows),
      g_(std::move(g_matrix)),
      f_(std::move(f_matrices)),
      centers_(std::move(centers)),
      mask_(std::move(mask)),
      total_dim_(dim()) {
  if (f_.size() != centers_.size())
    throw DimensionError("multilevel block: one centering probability per level required");
}

int MultilevelWclsBlock::beta_offset(int level) const {
  int off = offset() + alpha_dim();
  for (int j = 1; j < level; ++j) off += static_cast<int>(f_[j - 1]->cols());
  return off;
}

int MultilevelWclsBlock::beta_dim(int level) const {
  return static_cast<int>(f_[level - 1]->cols());
}

void MultilevelWclsBlock::build_row(const Eigen::VectorXd& theta, int r,
                                    double* weight, double* design_row) const {
  const int qg = alpha_dim();
  const int levels = static_cast<int>(f_.size());
  const int a = static_cast<int>(rows_->a[r]);

  for (int j = 0; j < qg; ++j) design_row[j] = (*g_)(r, j);
  int pos = qg;
  double p_obs = 1.0;  // p_r(a | R)
  double p_control = 1.0;
  for (int level = 1; level <= levels; ++level) {
    const double p = centers_[level - 1].at(theta, *rows_, r);
    p_control -= p;
    if (a == level) p_obs = p;
    const double centered = (a == level ? 1.0 : 0.0) - p;
    const auto& f = *f_[level - 1];
    for (int j = 0; j < f.cols(); ++j) design_row[pos + j] = centered * f(r, j);
    pos += static_cast<int>(f.cols());
  }
  if (a == 0) p_obs = p_control;

  double ph_obs;
  if (a == 0) {
    ph_obs = 1.0 - rows_->ph.row(r).sum();
  } else {
    ph_obs = rows_->ph(r, a - 1);
  }
  *weight = mask_[r] * p_obs / ph_obs;
}

void MultilevelWclsBlock::score(const Eigen::VectorXd& theta, int pidx,
                                double* out) const {
  std::vector<double> row(total_dim_);
  for (int r = rows_->row_begin[pidx]; r < rows_->row_begin[pidx + 1]; ++r) {
    if (mask_[r] == 0.0) continue;
    double w;
    build_row(theta, r, &w, row.data());
    const double resid =
        rows_->y[r] - kernels::dot(row.data(), theta.data() + offset(), total_dim_);
    kernels::axpy(w * resid, row.data(), out, total_dim_);
  }
}

double MultilevelWclsBlock::score_scale(const Eigen::VectorXd& theta) const {
  std::vector<double> row(total_dim_);
  double total = 0.0;
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) continue;
    double w;
    build_row(theta, r, &w, row.data());
    double xmax = 0.0;
    for (int j = 0; j < total_dim_; ++j) xmax = std::max(xmax, std::abs(row[j]));
    const double fitted =
        std::abs(kernels::dot(row.data(), theta.data() + offset(), total_dim_));
    total += std::abs(w) * (std::abs(rows_->y[r]) + fitted) * xmax;
  }
  return total / rows_->n_participants;
}

void MultilevelWclsBlock::solve_stage(Eigen::VectorXd& theta) const {
  const int k = total_dim_;
  RowMat design(rows_->n_rows, k);
  Eigen::VectorXd w(rows_->n_rows), wy(rows_->n_rows);
  for (int r = 0; r < rows_->n_rows; ++r) {
    if (mask_[r] == 0.0) {
      w[r] = 0.0;
      wy[r] = 0.0;
      design.row(r).setZero();
      continue;
    }
    double weight;
    build_row(theta, r, &weight, design.row(r).data());
    w[r] = weight;
    wy[r] = weight * rows_->y[r];
  }
  RowMat gram = RowMat::Zero(k, k);
  kernels::gram(design.data(), w.data(), rows_->n_rows, k, gram.data());
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
  kernels::weighted_col_sum(design.data(), wy.data(), rows_->n_rows, k, rhs.data());
  theta.segment(offset(), k) =
      solve_normal_equations(gram, rhs, "block '" + name() + "'");
}

// ---------------------------------------------------------------------------
// fits

namespace {

struct ProbSetup {
  ProbRef ref;
  const ConstantProbBlock* cblk = nullptr;
  const LogisticBlock* lblk = nullptr;
};

ProbSetup make_center_source(StackedSystem& system, const RowData* rows,
                             const WCLSSpec& spec, Population pop,
                             const std::string& label) {
  ProbSetup setup;
  switch (spec.pr_source) {
    case WCLSSpec::PrSource::supplied:
      setup.ref = ProbRef::fixed(spec.pr_supplied);
      break;
    case WCLSSpec::PrSource::constant_fit: {
      auto* blk = system.add<ConstantProbBlock>("p_r:" + label, rows, pop, 1, 0);
      setup.cblk = blk;
      setup.ref = ProbRef::constant(blk);
      break;
    }
    case WCLSSpec::PrSource::logistic_fit: {
      auto design = std::make_shared<RowMat>(rows->features(spec.pr_spec));
      auto* blk = system.add<LogisticBlock>("p_r:" + label, rows, design,
                                            rows->a, population_mask(*rows, pop), 0);
      setup.lblk = blk;
      setup.ref = ProbRef::logistic(blk);
      break;
    }
  }
  return setup;
}

ProbSetup make_ph_source(StackedSystem& system, const RowData* rows,
                         const WCLSSpec& spec, Population pop,
                         const std::string& label) {
  ProbSetup setup;
  if (spec.ph_source == WCLSSpec::PhSource::supplied) {
    if (!rows->ph_supplied)
      throw ValidationError("wcls: prob_h not supplied in the data; configure "
                            "ph_source = logistic_fit or provide prob_h");
    setup.ref = ProbRef::supplied();
  } else {
    auto design = std::make_shared<RowMat>(rows->features(spec.ph_spec));
    auto* blk = system.add<LogisticBlock>("p_h:" + label, rows, design, rows->a,
                                          population_mask(*rows, pop), 0);
    setup.lblk = blk;
    setup.ref = ProbRef::logistic(blk);
  }
  return setup;
}

}  // namespace

WCLSFit wcls_fit(const CombinedDataset& dataset, const WCLSSpec& spec) {
  auto rows = std::make_shared<RowData>(flatten(dataset));
  StackedSystem system(rows);

  const Population pop = spec.population;
  ProbSetup center = make_center_source(system, rows.get(), spec, pop, "wcls");
  ProbSetup ph = make_ph_source(system, rows.get(), spec, pop, "wcls");

  auto g_mat = std::make_shared<RowMat>(rows->features(spec.g));
  auto f_mat = std::make_shared<RowMat>(rows->features(spec.f_r));
  auto* wcls = system.add<WclsBlock>("wcls", rows.get(), g_mat, f_mat,
                                     center.ref, ph.ref,
                                     population_mask(*rows, pop),
                                     RatioRef::none(), 1);

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, spec.dof_adjust);

  WCLSFit out;
  out.alpha = theta.segment(wcls->alpha_offset(), wcls->alpha_dim());
  out.beta_r = theta.segment(wcls->beta_offset(), wcls->beta_dim());
  out.beta_covariance = fit.covariance_block(wcls->beta_offset(), wcls->beta_dim());
  out.beta_se = out.beta_covariance.diagonal().cwiseSqrt();
  out.beta_offset = wcls->beta_offset();
  out.pr_constant = center.cblk != nullptr ? center.cblk->prob(theta)
                    : spec.pr_source == WCLSSpec::PrSource::supplied
                        ? spec.pr_supplied
                        : std::numeric_limits<double>::quiet_NaN();
  out.fit = std::move(fit);
  return out;
}

MultilevelWCLSFit wcls_fit_multilevel(const CombinedDataset& dataset,
                                      const std::vector<FeatureSpec>& f_r_levels,
                                      const FeatureSpec& g, const WCLSSpec& spec) {
  const int levels = static_cast<int>(f_r_levels.size());
  if (levels < 1) throw ConfigError("wcls_fit_multilevel: no treatment levels");

  auto rows = std::make_shared<RowData>(flatten(dataset));
  for (int level = 1; level <= levels; ++level) {
    bool seen = false;
    for (int r = 0; r < rows->n_rows && !seen; ++r) seen = rows->a[r] == level;
    if (!seen)
      throw UnobservedLevelError("wcls_fit_multilevel: level " +
                                 std::to_string(level) + " never observed");
  }
  if (!rows->ph_supplied)
    throw ValidationError("wcls_fit_multilevel: per-level prob_h required");

  StackedSystem system(rows);
  const Population pop = spec.population;
  std::vector<ProbRef> centers;
  for (int level = 1; level <= levels; ++level) {
    auto* blk = system.add<ConstantProbBlock>("p_r:level" + std::to_string(level),
                                              rows.get(), pop, level, 0);
    centers.push_back(ProbRef::constant(blk, level));
  }

  auto g_mat = std::make_shared<RowMat>(rows->features(g));
  std::vector<std::shared_ptr<const RowMat>> f_mats;
  for (const auto& f : f_r_levels)
    f_mats.push_back(std::make_shared<RowMat>(rows->features(f)));
  auto* blk = system.add<MultilevelWclsBlock>("wcls:multilevel", rows.get(),
                                              g_mat, f_mats, centers,
                                              population_mask(*rows, pop), 1);

  Eigen::VectorXd theta = system.solve();
  FitResult fit = system.sandwich(theta, spec.dof_adjust);

  MultilevelWCLSFit out;
  out.alpha = theta.segment(blk->offset(), blk->alpha_dim());
  int total_beta = 0;
  for (int level = 1; level <= levels; ++level) total_beta += blk->beta_dim(level);
  out.joint_covariance.resize(total_beta, total_beta);
  int row_pos = 0;
  for (int li = 1; li <= levels; ++li) {
    out.beta.push_back(theta.segment(blk->beta_offset(li), blk->beta_dim(li)));
    int col_pos = 0;
    for (int lj = 1; lj <= levels; ++lj) {
      out.joint_covariance.block(row_pos, col_pos, blk->beta_dim(li), blk->beta_dim(lj)) =
          fit.sigma.block(blk->beta_offset(li), blk->beta_offset(lj),
                          blk->beta_dim(li), blk->beta_dim(lj)) /
          static_cast<double>(fit.n);
      col_pos += blk->beta_dim(lj);
    }
    row_pos += blk->beta_dim(li);
  }
  out.fit = std::move(fit);
  return out;
}

}  // namespace mrtint
