#include "chunkflow/core/tape.hpp"

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("Var is not bound to a tape");
  return tape->value(id);
}

bool Var::requires_grad() const { return tape != nullptr && tape->requires_grad(id); }

Var Tape::constant(Tensor value) { return input(std::move(value), false); }

Var Tape::input(Tensor value, bool requires_grad) {
  Node n;
  value.requires_grad = requires_grad;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return {this, id};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn fn) {
  Node n;
  for (int id : inputs) n.requires_grad = n.requires_grad || requires_grad(id);
  value.requires_grad = n.requires_grad;
  n.value = std::move(value);
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
  auto& g = grads_[static_cast<std::size_t>(id)];
  if (g.shape != nodes_[static_cast<std::size_t>(id)].value.shape || g.data.empty()) {
    g = Tensor(nodes_[static_cast<std::size_t>(id)].value.shape);
  }
  return g;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss does not belong to this tape");
  const Tensor& lv = value(loss);
  if (lv.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(lv.shape));
  }
  grads_.assign(nodes_.size(), Tensor());
  grad_buffer(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.backward) continue;
    if (grads_[static_cast<std::size_t>(i)].data.empty()) continue;
    n.backward(*this, grads_[static_cast<std::size_t>(i)]);
  }
  for (const auto& entry : param_nodes_) {
    const int id = entry.second;
    Parameter* param = nodes_[static_cast<std::size_t>(id)].param;
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    param->grad = g.data.empty() ? Tensor(param->value.shape) : g;
    param->grad.requires_grad = false;
  }
}

Tensor Tape::grad(Var v) const {
  if (static_cast<std::size_t>(v.id) >= grads_.size()) throw ContractError("grad() before backward()");
  const Tensor& g = grads_[static_cast<std::size_t>(v.id)];
  return g.data.empty() ? Tensor(value(v).shape) : g;
}

}  // namespace chunkflow
