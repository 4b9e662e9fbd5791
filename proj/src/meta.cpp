#include "mrtint/meta.hpp"

#include <Eigen/Cholesky>

#include "mrtint/errors.hpp"

namespace mrtint {
namespace {

void check_shape(const StackedEstimates& est, const char* who) {
  if (est.J < 1 || est.P < 1 || est.n < 1)
    throw DimensionError(std::string(who) + ": J, P and n must be positive");
  if (est.theta.size() != est.J * est.P)
    throw DimensionError(std::string(who) + ": theta length != J*P");
  if (est.sigma.rows() != est.J * est.P || est.sigma.cols() != est.J * est.P)
    throw DimensionError(std::string(who) + ": sigma shape != (J*P)^2");
}

Eigen::MatrixXd pd_inverse(const Eigen::MatrixXd& m, const char* who) {
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (m + m.transpose()));
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError(std::string(who) +
                                   ": matrix is not positive definite");
  return llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

}  // namespace

MetaResult meta_combine(const StackedEstimates& est) {
  check_shape(est, "meta_combine");
  const int J = est.J, P = est.P;
  Eigen::MatrixXd lambda = pd_inverse(est.sigma, "meta_combine");

  // Omega = (sum_jk Lambda_jk)^{-1}; block-row sums weight theta.
  Eigen::MatrixXd block_sum = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd weighted = Eigen::VectorXd::Zero(P);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < J; ++k) {
      block_sum += lambda.block(j * P, k * P, P, P);
      weighted += lambda.block(j * P, k * P, P, P) * est.theta.segment(k * P, P);
    }
  Eigen::MatrixXd omega = pd_inverse(block_sum, "meta_combine");

  MetaResult out;
  out.omega = omega;
  out.beta = omega * weighted;
  // (1' (x) Omega) Lambda (1 (x) Omega) / n
  Eigen::MatrixXd left(P, J * P);
  for (int j = 0; j < J; ++j) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(P, P);
    for (int k = 0; k < J; ++k) acc += lambda.block(k * P, j * P, P, P);
    left.block(0, j * P, P, P) = omega * acc;
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(P, P);
  for (int j = 0; j < J; ++j) cov += left.block(0, j * P, P, P) * omega;
  out.covariance = cov / static_cast<double>(est.n);
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

MetaResult meta_combine_fixed(const StackedEstimates& est,
                              const Eigen::VectorXd& weights) {
  check_shape(est, "meta_combine_fixed");
  if (weights.size() != est.J)
    throw DimensionError("meta_combine_fixed: one weight per block required");
  if (std::abs(weights.sum() - 1.0) > 1e-10)
    throw ConfigError("meta_combine_fixed: weights must sum to 1");
  const int J = est.J, P = est.P;

  MetaResult out;
  out.beta = Eigen::VectorXd::Zero(P);
  for (int j = 0; j < J; ++j)
    out.beta += weights[j] * est.theta.segment(j * P, P);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(P, P);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < J; ++k)
      cov += weights[j] * weights[k] * est.sigma.block(j * P, k * P, P, P);
  out.covariance = cov / static_cast<double>(est.n);
  out.omega = Eigen::MatrixXd::Zero(P, P);
  return out;
}

MetaResult meta_combine_kronecker(const StackedEstimates& est,
                                  bool average_coordinates) {
  check_shape(est, "meta_combine_kronecker");
  const int J = est.J, P = est.P;

  // J x J factor taken from a shared coordinate of each block (the first),
  // optionally averaged over all P coordinates.
  Eigen::MatrixXd sigma_tilde = Eigen::MatrixXd::Zero(J, J);
  const int n_coords = average_coordinates ? P : 1;
  for (int q = 0; q < n_coords; ++q)
    for (int j = 0; j < J; ++j)
      for (int k = 0; k < J; ++k)
        sigma_tilde(j, k) += est.sigma(j * P + q, k * P + q) / n_coords;

  Eigen::MatrixXd lambda_tilde = pd_inverse(sigma_tilde, "meta_combine_kronecker");
  const double total = lambda_tilde.sum();
  Eigen::VectorXd row_sum = lambda_tilde.rowwise().sum();

  MetaResult out;
  out.beta = Eigen::VectorXd::Zero(P);
  for (int j = 0; j < J; ++j)
    out.beta += row_sum[j] * est.theta.segment(j * P, P);
  out.beta /= total;

  // [(sum_j Ltilde_{j.}) (x) I] sigma [(sum_j Ltilde_{.j}) (x) I] / (n total^2)
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(P, P);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < J; ++k)
      cov += row_sum[j] * row_sum[k] * est.sigma.block(j * P, k * P, P, P);
  out.covariance = cov / (static_cast<double>(est.n) * total * total);
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  out.omega = Eigen::MatrixXd::Zero(P, P);
  return out;
}

}  // namespace mrtint
