#pragma once

#include <Eigen/Dense>

namespace mrtint {

// J stacked P-dimensional estimates of a common parameter, with the joint
// covariance of sqrt(n) * theta_hat (within- and between-block dependence).
struct StackedEstimates {
  Eigen::VectorXd theta;  // length J * P
  Eigen::MatrixXd sigma;  // (J*P) x (J*P), covariance of sqrt(n) theta_hat
  int J = 1;
  int P = 1;
  int n = 1;
};

struct MetaResult {
  Eigen::VectorXd beta;        // combined estimate, length P
  Eigen::MatrixXd covariance;  // plain covariance of the combined estimate
  Eigen::MatrixXd omega;       // (sum_jk Lambda_jk)^{-1}
};

// Generalized precision weighting: beta = Omega * sum_j Lambda_{j.} theta,
// Lambda = sigma^{-1}, with covariance (1' (x) Omega) Lambda (1 (x) Omega) / n.
// Requires sigma positive definite (Cholesky-checked).
MetaResult meta_combine(const StackedEstimates& est);

// Fixed scalar weights per block (must sum to 1):
// beta = sum_j w_j theta_j, covariance (w' (x) I) sigma (w (x) I) / n.
MetaResult meta_combine_fixed(const StackedEstimates& est,
                              const Eigen::VectorXd& weights);

// Kronecker-structured variant: the J x J factor is estimated from one
// shared coordinate per block (the first), or averaged over all P
// coordinates when average_coordinates is set. Valid (though not optimal)
// even when sigma has no Kronecker structure.
MetaResult meta_combine_kronecker(const StackedEstimates& est,
                                  bool average_coordinates = false);

}  // namespace mrtint
