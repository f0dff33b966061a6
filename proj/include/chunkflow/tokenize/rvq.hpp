#pragma once

#include <filesystem>
#include <vector>

#include "chunkflow/core/checkpoint.hpp"
#include "chunkflow/core/layers.hpp"
#include "chunkflow/core/optim.hpp"

namespace chunkflow {

enum class Distance { kEuclidean, kCosine };

struct RvqConfig {
  Index chunk_size = 32;    // T_a
  Index action_dim = 14;    // d
  Index latents = 8;        // n
  Index latent_dim = 64;    // C
  Index depth = 4;          // m
  Index codebook_size = 256;  // K
  Index hidden = 64;        // conv channels
  double beta = 0.25;
  Distance distance = Distance::kCosine;
  bool use_ema = true;
  double ema_decay = 0.99;
  bool restarts = true;
  int restart_period = 500;
  int restart_threshold = 1;
  int vocab_offset = 0;
  Index reserved_vocab = 1024;
  /// Backpropagate the codebook term into the entries even when EMA is on.
  bool codebook_grad_with_ema = false;

  Index downsample() const { return chunk_size / latents; }
  Index stages() const;
  void validate() const;
};

enum class Activation { kGelu, kNone };

/// conv k3 -> act -> [conv k4 stride 2 -> act] x stages -> conv k1.
struct TemporalEncoder {
  Conv1dLayer input;
  std::vector<Conv1dLayer> down;
  Conv1dLayer output;
  Activation activation = Activation::kGelu;

  TemporalEncoder() = default;
  TemporalEncoder(const std::string& name, Index cin, Index hidden, Index cout, Index stages, Rng& rng);

  Var operator()(Tape& t, Var x);
  void collect(ParameterList& out);
};

/// Mirror of TemporalEncoder with transpose convs; restores `length`.
struct TemporalDecoder {
  Conv1dLayer input;
  std::vector<ConvTranspose1dLayer> up;
  Conv1dLayer output;
  Activation activation = Activation::kGelu;

  TemporalDecoder() = default;
  TemporalDecoder(const std::string& name, Index cin, Index hidden, Index cout, Index stages, Rng& rng);

  Var operator()(Tape& t, Var z, Index length);
  void collect(ParameterList& out);
};

struct Codebook {
  Parameter entries;     // [K, C]
  Tensor ema_size;       // [K]
  Tensor ema_sum;        // [K, C]
  std::vector<double> usage;  // assignments since the last restart

  Codebook() = default;
  Codebook(const std::string& name, Tensor init);
  Index size() const { return entries.value.dim(0); }
  Index dim() const { return entries.value.dim(1); }
};

/// Raw indices k in [0, K), ordered latent-major: (i, j) at i * m + j.
struct TokenSequence {
  Index latents = 0;
  Index depth = 0;
  std::vector<int> indices;

  int at(Index i, Index j) const { return indices[std::size_t(i * depth + j)]; }
  std::vector<int> vocab_ids(int offset, Index codebook_size) const;
  static TokenSequence from_vocab_ids(const std::vector<int>& ids, int offset, Index codebook_size, Index depth);
};

int vocab_id(int offset, Index codebook_size, Index depth_index, int k);

struct QuantizeResult {
  std::vector<TokenSequence> tokens;  // per batch element
  Tensor zhat;                        // [B, n, C]
  Tensor residual_norms;              // [B, n, m + 1], entry 0 is |z|
  std::vector<Tensor> depth_inputs;   // per depth, [B * n, C] residuals r_{j-1}
  Tensor reconstruction;              // [B, T, d] normalized; empty from quantize_rvq alone
};

/// Greedy residual quantization of latents[..., C] against `books`.
/// Ties go to the lowest index.
QuantizeResult quantize_rvq(const Tensor& latents, const std::vector<Codebook>& books, Distance distance);
/// Index of the entry nearest to `r` under `distance`.
int nearest_entry(std::span<const double> r, const Tensor& entries, Distance distance);

struct RvqModel {
  RvqConfig config;
  TemporalEncoder encoder;
  TemporalDecoder decoder;
  std::vector<Codebook> books;
  std::int64_t step = 0;

  RvqModel() = default;
  RvqModel(const RvqConfig& cfg, Rng& rng);

  /// Encoder and decoder parameters; codebook entries are listed separately.
  ParameterList network_parameters();
  ParameterList codebook_parameters();

  /// chunk[B, T, d] (normalized) -> latents [B, n, C].
  Var encode(Tape& t, Var chunk);
  Tensor encode_latents(const Tensor& chunk);
  /// zhat[B, n, C] -> chunk [B, T, d].
  Var decode(Tape& t, Var zhat);
  Tensor decode_latents(const Tensor& zhat);

  QuantizeResult quantize(const Tensor& chunk);
  /// Sum of selected entries through depth `use_depth` (all if -1), decoded.
  Tensor dequantize(const std::vector<TokenSequence>& tokens, Index use_depth = -1);
  Tensor reconstruct(const Tensor& chunk, Index use_depth = -1);

  Checkpoint to_checkpoint();
  static RvqModel from_checkpoint(const Checkpoint& ck);
};

struct RvqLossTerms {
  Var total;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
};

/// z + sg(zhat - z): forward value zhat, gradient of identity into z.
Var straight_through(Var z, Var zhat);

/// mean over batch of |A - Ahat|^2 + |sg(z) - zhat|^2 + beta |z - sg(zhat)|^2,
/// with the straight-through estimator feeding the decoder. The codebook
/// term is only differentiated when `codebook_grad` is set.
RvqLossTerms tokenizer_loss(Tape& t, Var chunk, Var z, Var zhat, Var reconstruction, double beta, bool codebook_grad);

/// EMA cluster statistics update for one depth. `inputs[N, C]` are the
/// depth's input residuals and `assign` their chosen entries.
void ema_codebook_update(Codebook& book, const Tensor& inputs, const std::vector<int>& assign, double decay);

/// Re-seeds entries used fewer than `threshold` times from random rows of
/// `inputs`. Resets usage counters. Returns the number re-seeded.
int restart_dead_codes(Codebook& book, const Tensor& inputs, int threshold, Rng& rng);

struct RvqStepStats {
  double loss = 0.0;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
  int restarts = 0;
};

RvqStepStats rvq_train_step(RvqModel& model, OptimizerState& opt, const Tensor& batch, Rng& rng, double lr);

/// Fraction of entries per depth used at least once when quantizing `chunks`.
std::vector<double> codebook_utilization(RvqModel& model, const Tensor& chunks);

}  // namespace chunkflow
