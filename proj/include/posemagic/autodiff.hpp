#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "posemagic/tensor.hpp"

namespace posemagic {

/// A learnable tensor with its accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string name, Tensor value);

  void zero_grad();
  std::size_t size() const { return value.size(); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Lazily materialized parent gradients handed to a backward closure.
class GradSink {
 public:
  /// Zero-initialized accumulator for parent `i`, or nullptr when that parent
  /// does not require a gradient.
  Tensor* grad(std::size_t i);

 private:
  friend class Tape;
  GradSink(Tape* tape, const std::vector<std::size_t>* parents) : tape_(tape), parents_(parents) {}

  Tape* tape_;
  const std::vector<std::size_t>* parents_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Records a forward computation for one reverse pass. Nodes are appended in
/// evaluation order, so reverse creation order is a valid topological order.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Input leaf; its gradient is readable through grad() after backward().
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf bound to a Param. Repeated calls with the same Param share one node.
  Var param(Param& p);
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Reverse pass from a scalar; gradients are added into every bound Param.
  void backward(const Var& loss);

  /// Gradient of any node after backward(); zeros when none flowed.
  Tensor grad(const Var& v) const;
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  /// Number of backward closures invoked by the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  friend class GradSink;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Param* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Param*, std::size_t> param_nodes_;
  bool grad_enabled_;
  std::size_t last_visits_ = 0;
};

/// Differentiable operations on Vars. Each mirrors the ops:: kernel of the same name.
namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var permute(const Var& a, std::vector<std::size_t> perm);
Var transpose(const Var& a, int axis0, int axis1);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, int axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, int axis);
Var flip(const Var& a, int axis);
Var softmax(const Var& a, int axis);
Var sum(const Var& a);
Var mean(const Var& a);
Var activate(const Var& a, ops::Activation kind);
Var relu(const Var& a);
Var gelu(const Var& a);
Var tanh(const Var& a);
Var softplus(const Var& a);
/// Euclidean norm over the last axis (the axis is dropped). The gradient at a
/// zero vector is taken as zero.
Var norm_last(const Var& a);

/// x @ w (+ bias), with w of shape [in, out].
Var linear(const Var& x, const Var& w, const Var* bias = nullptr);

}  // namespace ad

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries = 0;
};

/// Compares reverse-mode gradients of `f` against numeric derivatives, entry
/// by entry: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8 * max(1, max |analytic|)).
/// Numeric derivatives are Ridders-extrapolated central differences starting
/// from a per-entry step between eps and 1e-2; an entry whose central
/// difference at eps is exactly zero is taken as zero.
/// Throws if two evaluations of `f` disagree or eps is outside [1e-7, 1e-4].
GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Param* const> params,
                           double eps = 1e-5);

}  // namespace posemagic
