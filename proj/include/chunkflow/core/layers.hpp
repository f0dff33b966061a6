#pragma once

#include <string>

#include "chunkflow/core/tape.hpp"

namespace chunkflow {

/// y = x W + b, W initialized N(0, 1/in) unless `init_std` is given.
struct LinearLayer {
  Parameter weight;
  Parameter bias;

  LinearLayer() = default;
  LinearLayer(const std::string& name, Index in, Index out, Rng& rng, double init_std = -1.0);

  Index in_features() const { return weight.value.dim(0); }
  Index out_features() const { return weight.value.dim(1); }
  Var operator()(Tape& t, Var x) { return linear(x, t.param(weight), t.param(bias)); }
  void collect(ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct LayerNormLayer {
  Parameter gamma;
  Parameter beta;

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, Index width);

  Var operator()(Tape& t, Var x) { return layer_norm(x, t.param(gamma), t.param(beta)); }
  void collect(ParameterList& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

struct Conv1dLayer {
  Parameter kernel;  // [k, Cin, Cout]
  Parameter bias;
  Index stride = 1;
  Index pad = 0;

  Conv1dLayer() = default;
  Conv1dLayer(const std::string& name, Index cin, Index cout, Index k, Index stride, Index pad, Rng& rng);

  Var operator()(Tape& t, Var x) { return conv1d(x, t.param(kernel), t.param(bias), stride, pad); }
  void collect(ParameterList& out) {
    out.push_back(&kernel);
    out.push_back(&bias);
  }
};

struct ConvTranspose1dLayer {
  Parameter kernel;  // [k, Cin, Cout]
  Parameter bias;
  Index stride = 1;
  Index pad = 0;

  ConvTranspose1dLayer() = default;
  ConvTranspose1dLayer(const std::string& name, Index cin, Index cout, Index k, Index stride, Index pad, Rng& rng);

  /// Upsamples to exactly `target_length`.
  Var operator()(Tape& t, Var x, Index target_length);
  void collect(ParameterList& out) {
    out.push_back(&kernel);
    out.push_back(&bias);
  }
};

/// Multi-head attention with grouped key/value heads. `source` is the
/// sequence attended over: `x` itself for self-attention, condition tokens
/// for cross-attention.
struct AttentionLayer {
  LinearLayer query;
  LinearLayer key;
  LinearLayer value;
  LinearLayer output;
  Index q_heads = 1;
  Index kv_heads = 1;

  AttentionLayer() = default;
  AttentionLayer(const std::string& name, Index width, Index q_heads, Index kv_heads, Rng& rng);

  Index head_dim() const { return query.out_features() / q_heads; }
  Var operator()(Tape& t, Var x, Var source, bool causal);
  void collect(ParameterList& out);
};

/// Pre-norm two-layer GELU MLP, without the residual.
struct FeedForward {
  LinearLayer up;
  LinearLayer down;

  FeedForward() = default;
  FeedForward(const std::string& name, Index width, Index hidden, Rng& rng);

  Var operator()(Tape& t, Var x) { return down(t, gelu(up(t, x))); }
  void collect(ParameterList& out) {
    up.collect(out);
    down.collect(out);
  }
};

/// Number of scalars across `params`.
Index count_parameters(const ParameterList& params);
void zero_grads(const ParameterList& params);

/// Sinusoidal features of scalar times, one row per entry, `width` columns.
Tensor sinusoidal_embedding(std::span<const double> times, Index width, double max_frequency = 1000.0);

}  // namespace chunkflow
