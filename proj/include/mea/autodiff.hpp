#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mea/tensor.hpp"

namespace mea::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  Tape* tape = nullptr;
  std::size_t id = kNone;

  bool valid() const { return tape != nullptr && id != kNone; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using GradMap = std::map<std::size_t, Tensor>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// order is a topological order and backward is a single reverse sweep.
class Tape {
 public:
  /// Propagates `upstream` (adjoint of the node's output) into input adjoints.
  using Backward = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf; gradients are accumulated for it when `requires_grad`.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op node. `backward` is dropped when no input requires grad.
  Var record(std::string op, std::vector<std::size_t> inputs, Tensor value, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Adds g into the adjoint of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g);

  /// Zeroes adjoints, seeds d(loss)/d(loss) = 1 and sweeps in reverse.
  /// Returns the adjoint of every leaf that requires grad. The loss must
  /// have shape {1}; anything else throws ContractError.
  GradMap backward(Var loss);

  /// Adjoint of a node after backward(); zero-shaped like the value if unreached.
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor adjoint;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

// ---- differentiable ops ---------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// out[b, ...] = s[b] * t[b, ...]; s has one entry per slice of axis 0.
Var scale_blocks(Var t, Var s);

Var matmul(Var a, Var b);
Var transpose(Var a);
/// Batched a[b] * b[b]: (B x m x k) . (B x k x n) -> B x m x n.
Var bmm(Var a, Var b);
/// Batched a[b] * b[b]^T: (B x m x k) . (B x n x k) -> B x m x n.
Var bmm_nt(Var a, Var b);

Var reshape(Var a, Shape shape);
Var swap01(Var a);
Var slice_last(Var a, std::size_t offset, std::size_t len);

Var softmax_rows(Var a, bool causal);
Var rms_norm(Var x, Var gain, double eps);
Var head_mix(Var t, Var w);
/// Rotary embedding on N x h x d; axis 0 is the position.
Var rope(Var x, double base);
/// silu(gate) * up
Var swiglu(Var gate, Var up);
/// Rows of `table` selected by `tokens`.
Var embedding(Var table, std::span<const int> tokens);

/// h x N x d -> N x (h*d), i.e. Concat(C_1, ..., C_h) along features.
Var concat_heads(Var head_major);

Var sum(Var a);
/// mean((a - target)^2)
Var mse(Var a, const Tensor& target);
/// Mean token cross-entropy of row-wise logits against integer targets.
Var cross_entropy(Var logits, std::span<const int> targets);

// ---- gradient checking ------------------------------------------------------

/// A scalar-valued program over parameter leaves.
using Program = std::function<Var(Tape&, std::span<const Var>)>;

/// Analytic gradients of `f` at `params`.
std::vector<Tensor> gradients(const Program& f, std::span<const Tensor> params);

/// Value of `f` at `params` (forward only).
double evaluate(const Program& f, std::span<const Tensor> params);

/// Max over parameter tensors of ||analytic - central||_inf / (||central||_inf + 1e-12).
double grad_check(const Program& f, std::span<const Tensor> params, double step = 1e-5);

}  // namespace mea::ad
