#include "chunkflow/core/layers.hpp"

#include <cmath>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

LinearLayer::LinearLayer(const std::string& name, Index in, Index out, Rng& rng, double init_std)
    : weight(name + ".weight", Tensor::randn({in, out}, rng, init_std >= 0.0 ? init_std : 1.0 / std::sqrt(double(in)))),
      bias(name + ".bias", Tensor::zeros({out})) {}

LayerNormLayer::LayerNormLayer(const std::string& name, Index width)
    : gamma(name + ".gamma", Tensor::ones({width})), beta(name + ".beta", Tensor::zeros({width})) {}

Conv1dLayer::Conv1dLayer(const std::string& name, Index cin, Index cout, Index k, Index stride_, Index pad_, Rng& rng)
    : kernel(name + ".kernel", Tensor::randn({k, cin, cout}, rng, 1.0 / std::sqrt(double(k * cin)))),
      bias(name + ".bias", Tensor::zeros({cout})),
      stride(stride_),
      pad(pad_) {}

ConvTranspose1dLayer::ConvTranspose1dLayer(const std::string& name, Index cin, Index cout, Index k, Index stride_,
                                           Index pad_, Rng& rng)
    : kernel(name + ".kernel", Tensor::randn({k, cin, cout}, rng, 1.0 / std::sqrt(double(k * cin) / double(stride_)))),
      bias(name + ".bias", Tensor::zeros({cout})),
      stride(stride_),
      pad(pad_) {}

Var ConvTranspose1dLayer::operator()(Tape& t, Var x, Index target_length) {
  const Index k = kernel.value.dim(0);
  const Index in_len = x.dim(1);
  const Index base = (in_len - 1) * stride - 2 * pad + k;
  return conv_transpose1d(x, t.param(kernel), t.param(bias), stride, pad, target_length - base);
}

AttentionLayer::AttentionLayer(const std::string& name, Index width, Index q_heads_, Index kv_heads_, Rng& rng)
    : q_heads(q_heads_), kv_heads(kv_heads_) {
  if (q_heads < 1 || kv_heads < 1 || q_heads % kv_heads != 0) {
    throw ConfigError("query heads must be a positive multiple of kv heads");
  }
  if (width % q_heads != 0) throw ConfigError("attention width must be divisible by the query head count");
  const Index hd = width / q_heads;
  query = LinearLayer(name + ".query", width, width, rng);
  key = LinearLayer(name + ".key", width, kv_heads * hd, rng);
  value = LinearLayer(name + ".value", width, kv_heads * hd, rng);
  output = LinearLayer(name + ".output", width, width, rng);
}

Var AttentionLayer::operator()(Tape& t, Var x, Var source, bool causal) {
  const Index batch = x.dim(0), len = x.dim(1), src_len = source.dim(1);
  const Index hd = head_dim();
  Var q = reshape(query(t, x), {batch, len, q_heads, hd});
  Var k = reshape(key(t, source), {batch, src_len, kv_heads, hd});
  Var v = reshape(value(t, source), {batch, src_len, kv_heads, hd});
  Var o = reshape(gqa_attention(q, k, v, causal), {batch, len, q_heads * hd});
  return output(t, o);
}

void AttentionLayer::collect(ParameterList& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  output.collect(out);
}

FeedForward::FeedForward(const std::string& name, Index width, Index hidden, Rng& rng)
    : up(name + ".up", width, hidden, rng), down(name + ".down", hidden, width, rng) {}

Index count_parameters(const ParameterList& params) {
  Index n = 0;
  for (const Parameter* p : params) n += p->value.numel();
  return n;
}

void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) {
    if (p->grad.shape != p->value.shape) p->grad = Tensor(p->value.shape);
    p->zero_grad();
  }
}

Tensor sinusoidal_embedding(std::span<const double> times, Index width, double max_frequency) {
  if (width < 2 || width % 2 != 0) throw ConfigError("sinusoidal embedding width must be even");
  const Index half = width / 2;
  Tensor out({static_cast<Index>(times.size()), width});
  for (std::size_t r = 0; r < times.size(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const double freq = std::pow(max_frequency, 1.0 - double(i) / double(std::max<Index>(half - 1, 1)));
      out[static_cast<Index>(r) * width + i] = std::sin(times[r] * freq);
      out[static_cast<Index>(r) * width + half + i] = std::cos(times[r] * freq);
    }
  }
  return out;
}

}  // namespace chunkflow
