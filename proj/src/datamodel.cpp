#include "mrtint/datamodel.hpp"

#include <sstream>

#include "mrtint/errors.hpp"

namespace mrtint {

CombinedDataset make_dataset(std::vector<Trajectory> trajectories,
                             int level_count) {
  CombinedDataset ds;
  ds.level_count = level_count;
  ds.trajectories = std::move(trajectories);
  for (const auto& traj : ds.trajectories) {
    if (traj.study_indicator == 1)
      ++ds.n1;
    else
      ++ds.n0;
    for (const auto& pt : traj.points) {
      ds.max_t = std::max(ds.max_t, pt.t);
      const int dim = static_cast<int>(pt.covariates.size());
      if (ds.covariate_dim == 0)
        ds.covariate_dim = dim;
      else if (dim != ds.covariate_dim)
        throw DimensionError("participant '" + traj.participant_id +
                             "' has covariate dimension " + std::to_string(dim) +
                             ", expected " + std::to_string(ds.covariate_dim));
    }
  }
  return ds;
}

std::string ValidationReport::summary() const {
  if (ok()) return "ok";
  std::ostringstream os;
  os << violations.size() << " violation(s):";
  for (const auto& v : violations) {
    os << "\n  " << v.message;
  }
  return os.str();
}

ValidationReport validate(const CombinedDataset& dataset,
                          const ModeratorConfig& config, double epsilon,
                          bool require_external) {
  ValidationReport report;
  auto add = [&](Violation::Code code, std::string msg, std::string pid = "",
                 int t = 0) {
    report.violations.push_back({code, std::move(msg), std::move(pid), t});
  };

  if (dataset.n1 < 1)
    add(Violation::Code::empty_internal_study,
        "no internal-study participants (study = 1); the target effect is "
        "defined in the internal population");
  if (require_external && dataset.n0 < 1)
    add(Violation::Code::empty_external_study,
        "no external-study participants (study = 0) but a pooled method was "
        "requested");

  const int max_feature_index =
      std::max(std::max(config.f_r.max_index(), config.f_s.max_index()),
               std::max(config.g.max_index(), config.d.max_index()));
  if (max_feature_index >= dataset.covariate_dim)
    add(Violation::Code::dimension_mismatch,
        "feature specs reference x" + std::to_string(max_feature_index + 1) +
            " but the dataset has only " +
            std::to_string(dataset.covariate_dim) + " covariates");

  for (const auto& traj : dataset.trajectories) {
    int last_t = 0;
    for (const auto& pt : traj.points) {
      if (pt.t <= last_t) {
        add(Violation::Code::non_monotone_time,
            "participant '" + traj.participant_id +
                "': time index not strictly increasing at t=" +
                std::to_string(pt.t),
            traj.participant_id, pt.t);
      }
      last_t = pt.t;
      if (static_cast<int>(pt.covariates.size()) != dataset.covariate_dim) {
        add(Violation::Code::dimension_mismatch,
            "participant '" + traj.participant_id + "', t=" +
                std::to_string(pt.t) + ": covariate dimension " +
                std::to_string(pt.covariates.size()) +
                " incompatible with dataset/features",
            traj.participant_id, pt.t);
      }
      if (pt.treatment < 0 || pt.treatment > dataset.level_count) {
        add(Violation::Code::treatment_out_of_range,
            "participant '" + traj.participant_id + "', t=" +
                std::to_string(pt.t) + ": treatment " +
                std::to_string(pt.treatment) + " outside 0.." +
                std::to_string(dataset.level_count),
            traj.participant_id, pt.t);
      }
      if (!pt.prob_h.empty()) {
        double total = 0.0;
        for (double p : pt.prob_h) {
          total += p;
          if (!(p > epsilon) || !(p < 1.0 - epsilon)) {
            add(Violation::Code::positivity,
                "participant '" + traj.participant_id + "', t=" +
                    std::to_string(pt.t) + ": prob_h=" + std::to_string(p) +
                    " outside (" + std::to_string(epsilon) + ", " +
                    std::to_string(1.0 - epsilon) + ")",
                traj.participant_id, pt.t);
          }
        }
        // control probability 1 - sum must satisfy positivity as well
        if (dataset.level_count > 1 &&
            (!(1.0 - total > epsilon) || !(1.0 - total < 1.0 - epsilon))) {
          add(Violation::Code::positivity,
              "participant '" + traj.participant_id + "', t=" +
                  std::to_string(pt.t) +
                  ": implied control probability outside bounds",
              traj.participant_id, pt.t);
        }
      }
    }
  }
  return report;
}

void validate_or_throw(const CombinedDataset& dataset,
                       const ModeratorConfig& config, double epsilon,
                       bool require_external) {
  auto report = validate(dataset, config, epsilon, require_external);
  if (!report.ok()) throw ValidationError(report.summary());
}

}  // namespace mrtint
