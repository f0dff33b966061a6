#include "chunkflow/data/layout.hpp"

#include <numbers>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

ActionLayout ActionLayout::for_dimension(Index d) {
  ActionLayout layout;
  layout.d = d;
  Index arms = 0;
  switch (d) {
    case 7:
      arms = 1;
      layout.rotation = RotationFormat::kAxisAngle;
      break;
    case 14:
      arms = 2;
      layout.rotation = RotationFormat::kAxisAngle;
      break;
    case 10:
      arms = 1;
      layout.rotation = RotationFormat::kSixD;
      break;
    case 20:
      arms = 2;
      layout.rotation = RotationFormat::kSixD;
      break;
    default:
      throw ConfigError("no action layout for d=" + std::to_string(d) + " (supported: 7, 10, 14, 20)");
  }
  const Index stride = 3 + layout.rotation_width() + 1;
  for (Index a = 0; a < arms; ++a) layout.arms.push_back({a * stride, a * stride + 3, a * stride + 3 + layout.rotation_width()});
  return layout;
}

Mat3<double> ActionLayout::rotation_at(const Tensor& chunk, Index t, Index arm) const {
  if (chunk.rank() != 2 || chunk.dim(1) != d) throw DimensionError("rotation_at: chunk " + shape_string(chunk.shape));
  const double* row = chunk.data.data() + t * d + arms[static_cast<std::size_t>(arm)].rotation;
  if (rotation == RotationFormat::kAxisAngle) return rotvec_to_matrix<double>(Vec3<double>(row[0], row[1], row[2]));
  Vec6<double> v;
  for (int i = 0; i < 6; ++i) v[i] = row[i];
  return from_6d<double>(v);
}

void ActionLayout::set_rotation(Tensor& chunk, Index t, Index arm, const Mat3<double>& r) const {
  double* row = chunk.data.data() + t * d + arms[static_cast<std::size_t>(arm)].rotation;
  if (rotation == RotationFormat::kAxisAngle) {
    const Vec3<double> v = matrix_to_rotvec<double>(r);
    for (int i = 0; i < 3; ++i) row[i] = v[i];
  } else {
    const Vec6<double> v = to_6d<double>(r);
    for (int i = 0; i < 6; ++i) row[i] = v[i];
  }
}

std::vector<std::pair<double, double>> ActionLayout::ranges() const {
  std::vector<std::pair<double, double>> out(static_cast<std::size_t>(d));
  const double rot = rotation == RotationFormat::kAxisAngle ? std::numbers::pi : 1.0;
  for (const ArmSlice& arm : arms) {
    for (Index i = 0; i < 3; ++i) out[static_cast<std::size_t>(arm.position + i)] = {-1.0, 1.0};
    for (Index i = 0; i < rotation_width(); ++i) out[static_cast<std::size_t>(arm.rotation + i)] = {-rot, rot};
    out[static_cast<std::size_t>(arm.gripper)] = {0.0, 0.1};
  }
  return out;
}

}  // namespace chunkflow
