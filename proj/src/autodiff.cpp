#include "kcalnet/autodiff.hpp"

#include <optional>

#include "kcalnet/errors.hpp"

namespace kcalnet {

const Tensor& Var::value() const {
  if (!tape_) throw ArgumentError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::of(const Parameter& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) throw ArgumentError("no gradient recorded for parameter '" + p.name + "'");
  return it->second;
}

const Tensor& Gradients::of(Var leaf) const {
  auto it = leaves_.find(leaf.id());
  if (it == leaves_.end()) throw ArgumentError("no gradient recorded for node " + std::to_string(leaf.id()));
  return it->second;
}

void Tape::note_branches(std::uint64_t digest) {
  branch_signature_ = (branch_signature_ ^ digest) * 0x100000001b3ULL;
}

Var Tape::push(Node node) {
  if (precision_ == Precision::kSingle) {
    for (auto& v : node.value.data()) v = static_cast<double>(static_cast<float>(v));
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::watch(const Parameter& p) {
  if (auto it = watched_.find(&p); it != watched_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.is_leaf = true;
  n.requires_grad = true;
  n.param = &p;
  Var v = push(std::move(n));
  watched_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ArgumentError("operand recorded on a different tape");
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Gradients Tape::backward(Var loss) {
  if (loss.tape() != this) throw ArgumentError("loss recorded on a different tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ArgumentError("backward requires a scalar loss, got shape " + shape_string(lv.shape()));

  std::vector<std::optional<Tensor>> grads(loss.id() + 1);
  grads[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !grads[i] || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t j = node.inputs[k];
      if (!nodes_[j].requires_grad) continue;
      if (!grads[j]) grads[j] = Tensor(nodes_[j].value.shape(), 0.0);
      slots[k] = &*grads[j];
    }
    node.backward(*grads[i], node.value, slots);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.is_leaf || !node.requires_grad) continue;
    Tensor g = (i < grads.size() && grads[i]) ? std::move(*grads[i]) : Tensor(node.value.shape(), 0.0);
    if (node.param) {
      out.params_.emplace(node.param, g);
    }
    out.leaves_.emplace(i, std::move(g));
  }
  return out;
}

}  // namespace kcalnet
