#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "chunkflow/policy/token_head.hpp"
#include "chunkflow/policy/train.hpp"
#include "chunkflow/tokenize/rvq.hpp"

namespace chunkflow {

/// Multi-step output F(A0, c) of a frozen teacher.
using Teacher = std::function<Tensor(const Tensor& context, const Tensor& x0)>;

/// S-step Euler integration from the given noise: the euler_sample code path.
Tensor teacher_generate(FlowPolicy& teacher, const Tensor& context, const Tensor& x0, Index steps);
/// Wraps a frozen copy of `policy` as a Teacher.
Teacher policy_teacher(const FlowPolicy& policy, Index steps);

/// G(A0, c) = A0 + v(0, A0, c), recorded on `t`.
Var student_output(Tape& t, VelocityNet& net, Var cond, const Tensor& x0);
/// One-pass generation with the distilled policy.
Tensor student_generate(FlowPolicy& student, const Tensor& context, const Tensor& x0);

struct DistillConfig {
  Index teacher_steps = 5;
  std::int64_t steps = 2000;
  Index batch = 32;
  double lr = 1e-4;
  std::int64_t warmup = 500;
  /// Cosine decay to zero over `steps` instead of a constant rate.
  bool cosine = false;
  double clip = 1.0;
  double smoothing = 0.99;
  std::uint64_t seed = 0;
};

struct DistillRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double smoothed = 0.0;
  bool skipped = false;
};

/// Regresses a one-pass student onto the teacher, with targets produced on the
/// fly for fresh noise and never stored. The condition encoder stays frozen.
class Distiller {
 public:
  /// Student starts as a bitwise copy of the teacher.
  Distiller(const FlowPolicy& teacher, const DistillConfig& cfg);
  Distiller(Teacher teacher, FlowPolicy student, const DistillConfig& cfg);

  /// One update on a batch of contexts. A non-finite teacher output skips the
  /// batch with a warning and leaves the student unchanged.
  DistillRecord step(const Tensor& context);
  /// Steps until config().steps, drawing contexts from `chunks`; actions are unused.
  void run(const std::vector<DemoChunk>& chunks);

  FlowPolicy& student() { return student_; }
  const DistillConfig& config() const { return config_; }
  const std::vector<DistillRecord>& log() const { return log_; }
  std::int64_t steps_done() const { return step_; }

 private:
  Teacher teacher_;
  FlowPolicy student_;
  DistillConfig config_;
  OptimizerState opt_;
  Rng rng_;
  LossSmoother smoother_;
  std::int64_t step_ = 0;
  std::vector<DistillRecord> log_;
};

struct LatencyVariant {
  std::string name;
  Index passes_per_chunk = 0;
  /// Produces one chunk for a [1, context_dim] context, condition included.
  std::function<void(const Tensor& context)> run;
};

struct LatencyResult {
  std::string variant;
  Index passes_per_chunk = 0;
  double median_ms = 0.0;
  double chunks_per_s = 0.0;
};

/// Wall-clock per chunk at batch size 1 over `chunks` timed calls after `warmup` untimed ones.
std::vector<LatencyResult> latency_bench(const std::vector<LatencyVariant>& variants, const Tensor& contexts,
                                         int chunks = 200, int warmup = 20);

/// The three standard variants: token head plus detokenizer, flow at S=5, distilled at S=1.
std::vector<LatencyVariant> standard_variants(FlowPolicy& flow, FlowPolicy& distilled, TokenHead& head,
                                              RvqModel& tokenizer, Index flow_steps = 5);

void write_latency_csv(const std::vector<LatencyResult>& rows, const std::filesystem::path& path);
std::vector<LatencyResult> read_latency_csv(const std::filesystem::path& path);

}  // namespace chunkflow
