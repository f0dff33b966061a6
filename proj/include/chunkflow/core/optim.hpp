#pragma once

#include <cstdint>
#include <vector>

#include "chunkflow/core/tape.hpp"

namespace chunkflow {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Moments are kept in the order of the parameter list passed to
/// adamw_step; the same list (same order) must be used on every call.
struct OptimizerState {
  AdamWConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update at learning rate `lr`. Throws
/// NumericError naming the parameter if any gradient is non-finite.
void adamw_step(const ParameterList& params, OptimizerState& state, double lr);
inline void adamw_step(const ParameterList& params, OptimizerState& state) {
  adamw_step(params, state, state.config.lr);
}

double global_grad_norm(const ParameterList& params);
/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(const ParameterList& params, double max_norm);

/// target <- decay * target + (1 - decay) * source
void ema_update(Tensor& target, const Tensor& source, double decay);

/// Linear warm-up followed by a constant or cosine-decayed rate.
struct LrSchedule {
  enum class Kind { kConstant, kCosine };
  Kind kind = Kind::kConstant;
  double base_lr = 1e-4;
  std::int64_t warmup_steps = 500;
  std::int64_t total_steps = 0;  // cosine only
  double final_lr = 0.0;         // cosine only

  double at(std::int64_t step) const;
};

}  // namespace chunkflow
