// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "qadapt/tensor.hpp"

namespace qadapt::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  ScaleBy,
  AddRowVec,
  Gelu,
  Sigmoid,
  Softmax,
  CausalSoftmax,
  LayerNorm,
  SliceRows,
  SliceCols,
  ConcatRows,
  ConcatCols,
  GatherRows,
  Mean,
  Sum,
  CrossEntropy,
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);
/// Every op that has a backward rule.
std::span<const OpKind> differentiable_ops();

using NodeId = std::uint32_t;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Receives the gradient flowing into a node's output and scatters it into the
/// node's inputs through Tape::grad_buffer.
using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

struct TapeNode {
  OpKind kind = OpKind::Leaf;
  std::vector<NodeId> inputs;
  Tensor value;
  bool requires_grad = false;
  BackwardFn backward;
};

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so inputs always precede the nodes that
/// consume them and a single reverse sweep is a valid backward pass. A tape is
/// confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. The node requires a gradient iff any input does;
  /// otherwise the backward rule is dropped.
  Var push(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(NodeId id) const { return nodes_[id]; }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Reverse accumulation from a single-element loss node.
  void backward(Var loss);

  /// Gradient of the last backward() loss with respect to `v`, or nullptr when
  /// `v` does not require a gradient or was not reached.
  const Tensor* grad(Var v) const;

  /// Zero-initialized on first use. Only valid inside backward().
  Tensor& grad_buffer(NodeId id);

 private:
  std::vector<TapeNode> nodes_;
  std::vector<Tensor> grads_;
};

/// Test hook: when set, the backward rule of `kind` receives a scaled
/// gradient, producing a deliberately wrong derivative. Process-wide.
void set_backward_fault(std::optional<OpKind> kind);
std::optional<OpKind> backward_fault();

}  // namespace qadapt::ad
