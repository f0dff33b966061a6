#include "chunkflow/core/optim.hpp"

#include <cmath>
#include <numbers>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

void adamw_step(const ParameterList& params, OptimizerState& state, double lr) {
  const AdamWConfig& c = state.config;
  if (state.first_moment.empty()) {
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.shape);
      state.second_moment.emplace_back(p->value.shape);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("optimizer state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  for (const Parameter* p : params) {
    if (p->grad.shape != p->value.shape) throw DimensionError("gradient/parameter shape mismatch for " + p->name);
    if (!p->grad.is_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    if (m.shape != p.value.shape) throw DimensionError("moment/parameter shape mismatch for " + p.name);
    for (Index j = 0; j < p.value.numel(); ++j) {
      const double g = p.grad[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      double& w = p.value[j];
      w -= lr * c.weight_decay * w;
      w -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
    }
  }
}

double global_grad_norm(const ParameterList& params) {
  double s = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data) s += g * g;
  }
  return std::sqrt(s);
}

double clip_global_norm(const ParameterList& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm needs max_norm > 0");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.data) g *= s;
    }
  }
  return norm;
}

void ema_update(Tensor& target, const Tensor& source, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ContractError("ema decay must lie in [0, 1)");
  if (target.shape != source.shape) {
    throw DimensionError("ema_update: " + shape_string(target.shape) + " vs " + shape_string(source.shape));
  }
  for (Index i = 0; i < target.numel(); ++i) target[i] = decay * target[i] + (1.0 - decay) * source[i];
}

double LrSchedule::at(std::int64_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (kind == Kind::kConstant) return base_lr;
  const std::int64_t span = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace chunkflow
