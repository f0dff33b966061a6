#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkflow/core/tensor.hpp"

namespace chunkflow {

/// A named trainable tensor with its gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {
    value.requires_grad = true;
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

using ParameterList = std::vector<Parameter*>;

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  Index dim(Index axis) const { return value().dim(axis); }
  bool requires_grad() const;
};

/// Records primitive operations in execution order and replays them in
/// reverse for gradients. Forward values are never touched by backward, so
/// backward may be called repeatedly and yields identical gradients.
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value, bool requires_grad);
  /// Registers a parameter as a leaf; registering the same parameter twice
  /// returns the same node.
  Var param(Parameter& p);

  /// Appends an op node. `fn` is dropped when no input requires grad.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return value(v.id); }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Computes d(loss)/d(node) for every node and assigns parameter gradients
  /// for the parameters registered on this tape. Throws ContractError for a
  /// non-scalar loss.
  void backward(Var loss);
  /// Gradient of a node from the latest backward pass.
  Tensor grad(Var v) const;

  /// Only valid inside a BackwardFn.
  Tensor& grad_buffer(int id);

  /// Multiply-accumulate count of all recorded forward ops.
  double macs() const { return macs_; }
  void add_macs(double n) { macs_ += n; }

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  double macs_ = 0.0;
};

// ---------------------------------------------------------------------------
// Primitive ops. All shapes are row-major; "..." means any leading dims.

/// x[..., I] * w[I, O] (+ b[O]).
Var matmul(Var x, Var w);
Var linear(Var x, Var w, Var b);

/// Elementwise with numpy-style broadcasting of either side to the result.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var square(Var a);
Var gelu(Var a);
Var tanh(Var a);

Var sum(Var a);
Var mean(Var a);
/// Sum of squares, fused.
Var sum_squares(Var a);

/// Identity forward, zero gradient backward.
Var detach(Var a);
Var reshape(Var a, Shape shape);
Var slice(Var a, Index axis, Index start, Index length);
Var concat(const std::vector<Var>& parts, Index axis);

/// Normalizes over the last dim, then applies gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Rows of `table[V, H]` selected by `ids`, shaped `out_shape + [H]`.
Var embedding(Var table, const std::vector<int>& ids, Shape out_shape);

/// Mean negative log-likelihood of integer targets under softmax(logits[N, K]).
Var softmax_cross_entropy(Var logits, const std::vector<int>& targets);

/// Zero padding that keeps length T (stride 1) or halves it (stride 2, even k)
/// for a kernel of width k.
Index same_padding(Index kernel, Index stride);
/// Output length of conv1d.
Index conv_output_length(Index length, Index kernel, Index stride, Index pad);
/// Output padding so that conv_transpose1d restores `length` after conv1d.
Index transpose_output_padding(Index length, Index kernel, Index stride, Index pad);

/// x[B, T, Cin] with kernel[k, Cin, Cout] and bias[Cout].
Var conv1d(Var x, Var kernel, Var bias, Index stride, Index pad);
/// Adjoint of conv1d in the length arithmetic: T' = (T-1)*stride - 2*pad + k + output_padding.
Var conv_transpose1d(Var x, Var kernel, Var bias, Index stride, Index pad, Index output_padding);

/// Grouped-query attention. q[B, Tq, Hq, D]; k, v[B, Tk, Hkv, D]; query head
/// h uses kv head h * Hkv / Hq. Tk may differ from Tq (cross-attention). With
/// `causal`, query i sees keys j <= i + (Tk - Tq).
Var gqa_attention(Var q, Var k, Var v, bool causal);

}  // namespace chunkflow
