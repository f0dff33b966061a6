#include "chunkflow/eval/metrics.hpp"

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

double EvalReport::aggregate(const EvalReport& ref) const {
  auto ratio = [](double v, double r) { return r > 0 ? v / r : v; };
  return 0.25 * (ratio(action_mse, ref.action_mse) + ratio(position_mse, ref.position_mse) +
                 ratio(rotation_geodesic_rad, ref.rotation_geodesic_rad) + ratio(gripper_mse, ref.gripper_mse));
}

EvalReport chunk_metrics(const Tensor& pred, const Tensor& gt, const ActionLayout& layout) {
  if (pred.shape != gt.shape) throw DimensionError("chunk_metrics: shapes differ");
  if (pred.rank() != 2 || pred.dim(1) != layout.d) throw DimensionError("chunk_metrics: chunk width does not match the layout");
  const Index T = pred.dim(0), d = layout.d, rw = layout.rotation_width();
  EvalReport r;
  r.samples = 1;
  for (Index t = 0; t < T; ++t) {
    for (Index c = 0; c < d; ++c) {
      const double e = pred[t * d + c] - gt[t * d + c];
      r.action_mse += e * e;
    }
    for (Index a = 0; a < layout.arm_count(); ++a) {
      const ArmSlice& s = layout.arms[std::size_t(a)];
      for (Index k = 0; k < 3; ++k) {
        const double e = pred[t * d + s.position + k] - gt[t * d + s.position + k];
        r.position_mse += e * e;
      }
      for (Index k = 0; k < rw; ++k) {
        const double e = pred[t * d + s.rotation + k] - gt[t * d + s.rotation + k];
        r.rotation_param_mse += e * e;
      }
      const double e = pred[t * d + s.gripper] - gt[t * d + s.gripper];
      r.gripper_mse += e * e;
      r.rotation_geodesic_rad += rotation_geodesic(layout.rotation_at(pred, t, a), layout.rotation_at(gt, t, a));
    }
  }
  const double slots = double(T * layout.arm_count());
  r.action_mse /= double(T * d);
  r.position_mse /= slots * 3;
  r.rotation_param_mse /= slots * double(rw);
  r.gripper_mse /= slots;
  r.rotation_geodesic_rad /= slots;
  return r;
}

EvalReport merge_reports(const std::vector<EvalReport>& reports) {
  EvalReport out;
  for (const EvalReport& r : reports) {
    const double w = double(r.samples);
    out.action_mse += w * r.action_mse;
    out.position_mse += w * r.position_mse;
    out.rotation_geodesic_rad += w * r.rotation_geodesic_rad;
    out.rotation_param_mse += w * r.rotation_param_mse;
    out.gripper_mse += w * r.gripper_mse;
    out.samples += r.samples;
  }
  if (out.samples == 0) return out;
  const double n = double(out.samples);
  out.action_mse /= n;
  out.position_mse /= n;
  out.rotation_geodesic_rad /= n;
  out.rotation_param_mse /= n;
  out.gripper_mse /= n;
  return out;
}

EvalReport batch_metrics(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt, const ActionLayout& layout) {
  if (pred.size() != gt.size()) throw DimensionError("batch_metrics: batch sizes differ");
  std::vector<EvalReport> parts;
  parts.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) parts.push_back(chunk_metrics(pred[i], gt[i], layout));
  return merge_reports(parts);
}

}  // namespace chunkflow
