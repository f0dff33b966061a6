#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chunkflow/core/rng.hpp"
#include "chunkflow/core/tensor.hpp"
#include "chunkflow/data/layout.hpp"

namespace chunkflow {

/// One trajectory generator: a task family (fixes start pose and rotation
/// axis) plus a signed vertical detour. Modes of the same family differ only
/// by the detour, which the context does not reveal.
struct ModeSpec {
  int family = 0;
  double detour = 0.0;  // meters at mid-chunk
  double sigma = 0.005;
  double weight = 1.0;
};

struct TaskSpec {
  Index d = 14;
  Index chunk_size = 32;
  std::vector<ModeSpec> modes;
  Index context_dim = 16;
  double context_noise = 0.05;
  std::uint64_t seed = 0;

  int family_count() const;
  Index goal_dim() const;
  ActionLayout layout() const { return ActionLayout::for_dimension(d); }
  void validate() const;

  /// 2 families x 2 detours.
  static TaskSpec default_task();
  /// 1 family, detours of opposite sign: two modes per context.
  static TaskSpec two_mode_task();
};

/// Per-column affine normalization, x_n = (x - mean) / scale.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> scale;

  static constexpr double kMinScale = 1e-6;

  Index dim() const { return static_cast<Index>(mean.size()); }
  Tensor normalize(const Tensor& chunk) const;
  Tensor denormalize(const Tensor& chunk) const;

  std::string to_json() const;
  static NormStats from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static NormStats load(const std::filesystem::path& path);
};

struct DemoChunk {
  Tensor actions;  // [T_a, d]
  std::vector<double> context;
  int instruction_id = 0;
  int mode_id = 0;
  std::vector<double> goals;  // generator parameters, evaluation only
};

struct Dataset {
  TaskSpec spec;
  std::vector<DemoChunk> chunks;
  NormStats stats;
};

/// Noise-free chunk of `mode` for the given goal parameters.
Tensor render_mode(const TaskSpec& spec, int mode, const std::vector<double>& goals);

/// Context vector for (family, goals) before noise.
std::vector<double> context_mean(const TaskSpec& spec, int family, const std::vector<double>& goals);

/// Draws `n_chunks` samples. `split` selects an independent sample stream
/// (train, held-out, ...) over the same task.
Dataset generate_dataset(const TaskSpec& spec, Index n_chunks, std::uint64_t split = 0);

/// Mean and standard deviation per column over every row of every chunk.
/// Scales below kMinScale are clamped, with a warning.
NormStats compute_norm_stats(const std::vector<DemoChunk>& chunks);

}  // namespace chunkflow
