#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kcalnet/tensor.hpp"

namespace kcalnet {

/// Storage precision of values recorded on a tape. Single rounds every recorded
/// value to float; accumulation inside kernels stays in double.
enum class Precision { kSingle, kDouble };

/// A named trainable tensor. Layers own their parameters; the optimizer mutates
/// `value` in place between forward passes.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward rule of a primitive: given the gradient of its output and the output
/// itself, accumulates (+=) into the gradient slot of each input that requires a
/// gradient. Slots of inputs that do not are null.
using BackwardFn =
    std::function<void(const Tensor& grad_out, const Tensor& output, std::span<Tensor* const> input_grads)>;

/// Result of a backward pass: gradients of the loss with respect to every
/// watched parameter and every leaf variable of the tape.
class Gradients {
 public:
  bool contains(const Parameter& p) const { return params_.count(&p) != 0; }
  const Tensor& of(const Parameter& p) const;
  const Tensor& of(Var leaf) const;
  std::size_t parameter_count() const { return params_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const Parameter*, Tensor> params_;
  std::unordered_map<std::size_t, Tensor> leaves_;
};

/// Records primitive applications in execution order (which is a topological
/// order) and replays them in reverse to compute gradients.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::kDouble) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that requires a gradient but is not bound to a parameter.
  Var variable(Tensor value);
  /// Leaf bound to `p`. Watching the same parameter twice returns the same node.
  Var watch(const Parameter& p);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse pass from a single-element loss. Parameters watched but not
  /// reachable from the loss receive zero gradients.
  Gradients backward(Var loss);

  /// Piecewise primitives (relu, relu6) fold a digest of which piece each
  /// element fell on into the tape's branch signature. Two evaluations with the
  /// same signature took the same linear pieces everywhere.
  void note_branches(std::uint64_t digest);
  std::uint64_t branch_signature() const { return branch_signature_; }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  Precision precision() const { return precision_; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    const Parameter* param = nullptr;
  };

  Var push(Node node);

  Precision precision_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> watched_;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
};

}  // namespace kcalnet
