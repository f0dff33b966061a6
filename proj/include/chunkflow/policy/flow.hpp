#pragma once

#include <functional>
#include <vector>

#include "chunkflow/core/checkpoint.hpp"
#include "chunkflow/core/layers.hpp"

namespace chunkflow {

struct PolicyConfig {
  Index layers = 4;
  Index hidden = 128;
  Index q_heads = 8;
  Index kv_heads = 4;
  Index cond_tokens = 2;  // per layer group
  Index ffn_mult = 4;
  Index chunk_size = 32;
  Index action_dim = 14;
  Index context_dim = 16;
  Index steps = 5;  // Euler steps S

  Index total_cond_tokens() const { return layers * cond_tokens; }
  void validate() const;
};

/// Maps a context vector to layers * cond_tokens condition tokens.
struct ConditionEncoder {
  LinearLayer input;
  LayerNormLayer norm;
  FeedForward ff;
  Parameter positions;  // [tokens, hidden]
  Index tokens = 0;
  Index hidden = 0;
  std::int64_t calls = 0;  // forward invocations, for the once-per-sample contract

  ConditionEncoder() = default;
  ConditionEncoder(const std::string& name, Index context_dim, Index tokens, Index hidden, Index ffn, Rng& rng);

  /// context[B, ctx] -> tokens [B, tokens, hidden]
  Var operator()(Tape& t, Var context);
  void collect(ParameterList& out);
};

struct ExpertBlock {
  LayerNormLayer self_norm, cross_norm, ff_norm;
  AttentionLayer self_attn, cross_attn;
  FeedForward ff;

  ExpertBlock() = default;
  ExpertBlock(const std::string& name, const PolicyConfig& cfg, Rng& rng);
  void collect(ParameterList& out);
};

/// v(tau, x, c): transformer over chunk rows with per-layer cross attention
/// to its group of condition tokens, tau injected into every group.
struct VelocityNet {
  PolicyConfig config;
  LinearLayer in_proj;
  Tensor row_positions;  // fixed sinusoidal [T, hidden]
  LinearLayer time_up, time_down;
  std::vector<ExpertBlock> blocks;
  LayerNormLayer out_norm;
  LinearLayer out_proj;
  LinearLayer skip;  // d -> d, zero at init
  std::int64_t calls = 0;

  VelocityNet() = default;
  VelocityNet(const PolicyConfig& cfg, Rng& rng);

  /// tau has one entry per batch row; x[B, T, d]; cond[B, L * G, hidden].
  Var operator()(Tape& t, const std::vector<double>& tau, Var x, Var cond);
  void collect(ParameterList& out);
};

struct FlowPolicy {
  PolicyConfig config;
  ConditionEncoder encoder;
  VelocityNet net;

  FlowPolicy() = default;
  FlowPolicy(const PolicyConfig& cfg, Rng& rng);

  ParameterList parameters();
  ParameterList encoder_parameters();
  ParameterList net_parameters();

  /// Condition tokens as a plain tensor (no tape kept).
  Tensor condition(const Tensor& context);
  /// One velocity evaluation outside any training graph.
  Tensor velocity(const std::vector<double>& tau, const Tensor& x, const Tensor& cond);

  Checkpoint to_checkpoint();
  static FlowPolicy from_checkpoint(const Checkpoint& ck, const std::string& prefix = "");
  void write(Checkpoint& ck, const std::string& prefix = "");
};

/// tau = sigmoid(g), g ~ N(0, 1).
double sample_timestep(Rng& rng);
double logistic(double g);

struct NoisySample {
  Tensor noisy;   // (1 - tau) eps + tau A
  Tensor target;  // A - eps
};
/// Rows of `actions[B, T, d]` and `eps` mixed with per-row `tau`.
NoisySample make_noisy(const Tensor& actions, const Tensor& eps, const std::vector<double>& tau);

struct FlowBatch {
  Tensor actions;  // [B, T, d], normalized
  Tensor context;  // [B, ctx]
};

/// Velocity field for a whole batch: (tau, x) -> v, with tau shared by all rows.
using VelocityField = std::function<Tensor(double tau, const Tensor& x)>;

/// Left-endpoint Euler on tau_k = k / S, k = 0..S-1.
Tensor euler_integrate(const VelocityField& v, Tensor x0, Index steps);

/// Fresh noise, condition computed once, S Euler steps.
Tensor euler_sample(FlowPolicy& policy, const Tensor& context, Index steps, Rng& rng);
/// euler_sample with a given starting point.
Tensor euler_from(FlowPolicy& policy, const Tensor& context, const Tensor& x0, Index steps);

/// Mean over batch of |v - (A - eps)|^2 summed over elements. `cond` is
/// passed in so callers can freeze or train the encoder.
Var flow_matching_loss(Tape& t, VelocityNet& net, Var cond, const Tensor& actions, Rng& rng);

/// Recorded velocity for a batch of timesteps and noisy chunks.
using VelocityFn = std::function<Var(Tape& t, const std::vector<double>& tau, Var x)>;
Var flow_matching_loss(Tape& t, const VelocityFn& v, const Tensor& actions, Rng& rng);

}  // namespace chunkflow
