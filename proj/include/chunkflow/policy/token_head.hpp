#pragma once

#include <vector>

#include "chunkflow/policy/flow.hpp"

namespace chunkflow {

struct TokenHeadConfig {
  Index layers = 1;
  Index hidden = 128;
  Index q_heads = 8;
  Index kv_heads = 4;
  Index ffn_mult = 2;
  Index latents = 8;         // n
  Index depth = 4;           // m
  Index codebook_size = 256; // K

  Index sequence_length() const { return latents * depth; }
  void validate() const;
};

struct TokenBlock {
  LayerNormLayer self_norm, cross_norm, ff_norm;
  AttentionLayer self_attn, cross_attn;
  FeedForward ff;

  TokenBlock() = default;
  TokenBlock(const std::string& name, const TokenHeadConfig& cfg, Rng& rng);
  void collect(ParameterList& out);
};

/// Causal transformer over RVQ tokens, cross-attending to all condition
/// tokens. Position p holds depth p % m; logits cover that depth's K entries.
struct TokenHead {
  TokenHeadConfig config;
  Parameter embed;      // [m * K + 1, hidden], last row is BOS
  Parameter positions;  // [n * m, hidden]
  std::vector<TokenBlock> blocks;
  LayerNormLayer out_norm;
  LinearLayer out_proj;  // hidden -> K

  TokenHead() = default;
  TokenHead(const TokenHeadConfig& cfg, Rng& rng);

  /// Teacher-forced logits [B * n * m, K] for raw index sequences.
  Var logits(Tape& t, Var cond, const std::vector<std::vector<int>>& tokens);
  /// Mean cross entropy of the sequences under teacher forcing.
  Var loss(Tape& t, Var cond, const std::vector<std::vector<int>>& tokens);

  /// Greedy decoding with a key/value cache, one condition row per sequence.
  std::vector<std::vector<int>> generate(const Tensor& cond);
  /// Greedy decoding that recomputes the full prefix at each position.
  std::vector<std::vector<int>> generate_uncached(const Tensor& cond);

  void collect(ParameterList& out);
};

}  // namespace chunkflow
