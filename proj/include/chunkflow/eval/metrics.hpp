#pragma once

#include <vector>

#include "chunkflow/core/tensor.hpp"
#include "chunkflow/data/layout.hpp"

namespace chunkflow {

/// Per-slice chunk errors in denormalized units.
struct EvalReport {
  double action_mse = 0.0;
  double position_mse = 0.0;
  double rotation_geodesic_rad = 0.0;
  double rotation_param_mse = 0.0;  // raw rotation columns, for the slice decomposition
  double gripper_mse = 0.0;
  std::size_t samples = 0;

  /// Unweighted mean of the four headline metrics, each divided by `reference`'s.
  double aggregate(const EvalReport& reference) const;
};

/// Metrics for one chunk pair [T, d], averaged over timesteps and arms.
EvalReport chunk_metrics(const Tensor& pred, const Tensor& gt, const ActionLayout& layout);

/// Sample-weighted mean of reports.
EvalReport merge_reports(const std::vector<EvalReport>& reports);

/// Mean metrics over a batch; pred and gt are [N, T, d] or lists of [T, d].
EvalReport batch_metrics(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt, const ActionLayout& layout);

}  // namespace chunkflow
