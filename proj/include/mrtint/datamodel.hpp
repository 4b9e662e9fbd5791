#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mrtint/features.hpp"

namespace mrtint {

// One randomization occasion. The proximal outcome observed after the
// randomization at time t is stored on the same row, so a trajectory is one
// row per randomization with no off-by-one joins.
struct TimePoint {
  int t = 1;                    // 1-based decision-point index
  std::vector<double> covariates;
  int treatment = 0;            // 0 = control, 1..J = treatment levels
  double outcome = 0.0;         // proximal outcome for this randomization
  // Randomization probabilities P(A_t = j | H_t) for j = 1..J when known;
  // empty when the probabilities must be estimated.
  std::vector<double> prob_h;
};

struct Trajectory {
  std::string participant_id;
  int study_indicator = 1;  // 1 = internal study, 0 = external
  std::vector<TimePoint> points;
};

struct CombinedDataset {
  std::vector<Trajectory> trajectories;
  int n1 = 0;           // internal participants
  int n0 = 0;           // external participants
  int max_t = 0;
  int level_count = 1;  // number of non-control treatment levels
  int covariate_dim = 0;

  int n_total() const { return n1 + n0; }
};

// Assembles counts/dimensions from trajectories. Throws DimensionError on
// inconsistent covariate dimensions within a trajectory.
CombinedDataset make_dataset(std::vector<Trajectory> trajectories,
                             int level_count = 1);

struct Violation {
  enum class Code {
    positivity,
    non_monotone_time,
    dimension_mismatch,
    empty_internal_study,
    empty_external_study,
    treatment_out_of_range,
  };
  Code code;
  std::string message;
  std::string participant_id;  // empty for dataset-level violations
  int t = 0;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string summary() const;
};

// Structural checks behind every estimator's preconditions: supplied
// probabilities strictly inside (epsilon, 1-epsilon), strictly increasing t,
// constant covariate dimension, nonempty internal arm. require_external adds
// the pooled-method requirement n0 >= 1.
ValidationReport validate(const CombinedDataset& dataset,
                          const ModeratorConfig& config,
                          double epsilon = 1e-6,
                          bool require_external = false);

// Throwing wrapper used by the fitting entry points.
void validate_or_throw(const CombinedDataset& dataset,
                       const ModeratorConfig& config, double epsilon = 1e-6,
                       bool require_external = false);

}  // namespace mrtint
