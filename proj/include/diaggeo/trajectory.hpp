#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace diaggeo {

/// One recorded snapshot of a run. Optional fields are absent when the
/// corresponding statistic was not requested or was undefined at that step.
struct TrajectoryRecord {
  std::uint64_t step = 0;
  double loss_bar = 0.0;
  double E_norm = 0.0;
  double E_min = 0.0;
  double E_max = 0.0;
  std::optional<double> rmed_l1_hess, rmed_l1_closed, rmed_l2_hess, rmed_l2_closed;
  std::optional<double> r_diag_mean;
  std::optional<double> rank1_delta1, rank1_delta2;
  std::optional<double> ru, rv, stable_rank;
  int segment = 0;

  /// Hessian route when recorded, else the closed form.
  std::optional<double> rmed_l1() const { return rmed_l1_hess ? rmed_l1_hess : rmed_l1_closed; }
  std::optional<double> rmed_l2() const { return rmed_l2_hess ? rmed_l2_hess : rmed_l2_closed; }
};

using Trajectory = std::vector<TrajectoryRecord>;

}  // namespace diaggeo
