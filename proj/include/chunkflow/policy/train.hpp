#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "chunkflow/core/optim.hpp"
#include "chunkflow/data/datagen.hpp"
#include "chunkflow/eval/metrics.hpp"
#include "chunkflow/policy/flow.hpp"

namespace chunkflow {

/// Debiased exponential smoothing: s_k = sum_i w^(k-i) (1-w) x_i / (1 - w^k).
class LossSmoother {
 public:
  explicit LossSmoother(double weight = 0.99) : weight_(weight) {}
  double push(double x);
  double value() const { return norm_ > 0 ? acc_ / norm_ : 0.0; }
  double weight() const { return weight_; }
  std::pair<double, double> state() const { return {acc_, norm_}; }
  void restore(double acc, double norm) { acc_ = acc, norm_ = norm; }

 private:
  double weight_;
  double acc_ = 0.0;
  double norm_ = 0.0;
};

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double smoothed = 0.0;
};

struct ValidationRecord {
  std::int64_t step = 0;
  EvalReport report;
};

struct PolicyTrainConfig {
  std::int64_t steps = 2000;
  Index batch = 32;
  double lr = 1e-4;
  std::int64_t warmup = 500;
  double clip = 1.0;
  double smoothing = 0.99;
  std::int64_t eval_every = 2500;
  std::int64_t divergence_window = 500;
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;
  bool train_encoder = true;
};

/// Normalized actions and contexts of `count` chunks drawn with replacement.
FlowBatch sample_batch(const std::vector<DemoChunk>& chunks, const NormStats& stats, Index count, Rng& rng);
FlowBatch make_batch(const std::vector<DemoChunk>& chunks, const NormStats& stats);

/// Samples S-step chunks for `eval` contexts and scores them denormalized.
EvalReport validate_policy(FlowPolicy& policy, const std::vector<DemoChunk>& eval, const NormStats& stats, Index steps,
                           Rng& rng);

/// Owns the policy, optimizer and random stream of one Stage-2 run.
class PolicyTrainer {
 public:
  PolicyTrainer(FlowPolicy policy, const PolicyTrainConfig& cfg);

  /// One AdamW step on `batch`. Throws NumericError after a sustained divergence.
  LossRecord step(const FlowBatch& batch);
  /// Runs until `config().steps`, drawing batches from `train`; validation on
  /// `eval` every eval_every steps when it is non-empty.
  void run(const std::vector<DemoChunk>& train, const NormStats& stats, const std::vector<DemoChunk>& eval = {});

  FlowPolicy& policy() { return policy_; }
  const PolicyTrainConfig& config() const { return config_; }
  void set_total_steps(std::int64_t steps) { config_.steps = steps; }
  std::int64_t steps_done() const { return step_; }
  const std::vector<LossRecord>& log() const { return log_; }
  const std::vector<ValidationRecord>& validation() const { return validation_; }
  Rng& rng() { return rng_; }
  /// Training compute so far in multiply-accumulates: three times the forward
  /// cost of the differentiated graph plus the forward cost of a frozen encoder.
  double compute_macs() const { return macs_; }
  /// Parameters updated by step(); excludes the encoder when it is frozen.
  ParameterList trainable();

  Checkpoint to_checkpoint();
  static PolicyTrainer from_checkpoint(const Checkpoint& ck);

 private:
  FlowPolicy policy_;
  PolicyTrainConfig config_;
  OptimizerState opt_;
  Rng rng_;
  LossSmoother smoother_;
  std::int64_t step_ = 0;
  double initial_loss_ = 0.0;
  std::int64_t over_ = 0;
  double macs_ = 0.0;
  std::vector<LossRecord> log_;
  std::vector<ValidationRecord> validation_;
};

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path);
std::vector<LossRecord> read_loss_csv(const std::filesystem::path& path);
void write_validation_csv(const std::vector<ValidationRecord>& log, const std::filesystem::path& path);

}  // namespace chunkflow
