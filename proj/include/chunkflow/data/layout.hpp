#pragma once

#include <utility>
#include <vector>

#include "chunkflow/core/tensor.hpp"
#include "chunkflow/data/rotation.hpp"

namespace chunkflow {

enum class RotationFormat { kAxisAngle, kSixD };

/// Starting columns of one arm's blocks inside an action row.
struct ArmSlice {
  Index position = 0;
  Index rotation = 0;
  Index gripper = 0;
};

/// Column layout of an action row: per arm [position 3, rotation, gripper 1].
/// Supported d: 7 and 14 (axis-angle), 10 and 20 (6D).
struct ActionLayout {
  Index d = 14;
  RotationFormat rotation = RotationFormat::kAxisAngle;
  std::vector<ArmSlice> arms;

  static ActionLayout for_dimension(Index d);

  Index rotation_width() const { return rotation == RotationFormat::kAxisAngle ? 3 : 6; }
  Index arm_count() const { return static_cast<Index>(arms.size()); }

  /// Rotation matrix stored in row `t` of `chunk[T, d]` for `arm`.
  Mat3<double> rotation_at(const Tensor& chunk, Index t, Index arm) const;
  /// Writes `r` into row `t` in this layout's format.
  void set_rotation(Tensor& chunk, Index t, Index arm, const Mat3<double>& r) const;

  /// Declared per-column value ranges (before normalization).
  std::vector<std::pair<double, double>> ranges() const;
};

}  // namespace chunkflow
