#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "chunkflow/data/datagen.hpp"
#include "chunkflow/eval/metrics.hpp"
#include "chunkflow/tokenize/rvq.hpp"

namespace chunkflow {

/// Normalized actions of `chunks` as one [N, T, d] batch.
Tensor stack_normalized(const std::vector<DemoChunk>& chunks, const NormStats& stats);
/// [N, T, d] -> N tensors of [T, d].
std::vector<Tensor> unstack(const Tensor& batch);

struct ParetoPoint {
  std::string tokenizer;  // "rvq", "dct_bpe", "binning"
  std::string budget;
  double tokens_per_chunk = 0.0;
  EvalReport report;
};

struct ParetoConfig {
  std::vector<int> bin_counts{2, 4, 8, 16, 32, 64, 128, 256};
  std::vector<Index> dct_keep{1, 2, 3, 4, 6, 8, 12, 16};
  std::vector<double> dct_scales{1, 2, 4, 8, 16, 32};
  int bpe_merges = 1024;
  std::size_t bpe_corpus = 1024;  // training chunks used for BPE
};

/// Sweeps every tokenizer family over its budgets, scoring reconstructions
/// of `eval` in denormalized units. `train` fits bin ranges and BPE merges.
std::vector<ParetoPoint> pareto_sweep(RvqModel& rvq, const NormStats& stats, const std::vector<DemoChunk>& train,
                                      const std::vector<DemoChunk>& eval, const ParetoConfig& cfg = {});

/// RVQ points only, one per truncation depth.
std::vector<ParetoPoint> rvq_sweep(RvqModel& rvq, const NormStats& stats, const std::vector<DemoChunk>& eval);

/// Fewest mean tokens per chunk among `family`'s points with position MSE
/// at or below `target`; infinity if none qualifies.
double tokens_at_error(const std::vector<ParetoPoint>& points, const std::string& family, double target);

struct MatchedPoint {
  double target_pos_mse = 0.0;
  double rvq = 0.0;
  double dct_bpe = 0.0;
  double binning = 0.0;
  bool ordered() const { return rvq < dct_bpe && dct_bpe < binning; }
};

/// `count` log-spaced position-MSE targets between the full-depth and the
/// depth-one RVQ errors, with each family's token cost at each target.
std::vector<MatchedPoint> matched_error_points(const std::vector<ParetoPoint>& points, int count = 5);

void write_pareto_csv(const std::vector<ParetoPoint>& points, const std::filesystem::path& path);
std::vector<ParetoPoint> read_pareto_csv(const std::filesystem::path& path);

}  // namespace chunkflow
