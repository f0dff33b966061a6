#pragma once

#include <string>
#include <vector>

#include "chunkflow/policy/token_head.hpp"
#include "chunkflow/policy/train.hpp"
#include "chunkflow/tokenize/rvq.hpp"

namespace chunkflow {

struct HybridConfig {
  PolicyConfig policy;
  /// hidden, latents, depth and codebook_size are taken from the policy and tokenizer.
  TokenHeadConfig head;
  /// Flow stage of the hybrid arm; the scratch arm uses the same settings with
  /// the encoder trained and runs until it has spent the hybrid arm's compute.
  PolicyTrainConfig flow;
  std::int64_t pretrain_steps = 1000;
  double pretrain_lr = 1e-4;
};

struct ArmResult {
  std::string name;
  std::vector<double> ce_loss;  // pretraining, hybrid arm only
  std::vector<LossRecord> flow_log;
  double compute_macs = 0.0;

  double final_smoothed() const { return flow_log.empty() ? 0.0 : flow_log.back().smoothed; }
};

struct HybridResult {
  ArmResult hybrid;
  ArmResult scratch;
};

/// Raw RVQ indices of every chunk, normalized with `stats` first.
std::vector<std::vector<int>> tokenize_chunks(RvqModel& tokenizer, const std::vector<DemoChunk>& chunks,
                                              const NormStats& stats);

struct PretrainResult {
  std::vector<double> losses;
  double compute_macs = 0.0;
};

/// Cross-entropy training of the condition encoder and the token head.
PretrainResult pretrain_encoder(FlowPolicy& policy, TokenHead& head, const std::vector<DemoChunk>& chunks,
                                const std::vector<std::vector<int>>& tokens, const HybridConfig& cfg, Rng& rng);

/// Scratch arm alone: joint flow training until `compute_macs` is spent.
ArmResult train_scratch(FlowPolicy policy, const Dataset& data, const PolicyTrainConfig& cfg, double compute_macs);

/// Both arms from the same initial weights. Compute counts three forward
/// passes per differentiated step and one for the frozen encoder.
HybridResult hybrid_vs_scratch(const Dataset& data, RvqModel& tokenizer, const HybridConfig& cfg);

void write_ablation_csv(const HybridResult& result, const std::filesystem::path& path);

}  // namespace chunkflow
