// SPDX-License-Identifier: Apache-2.0
#include "qadapt/tape.hpp"

#include <array>
#include <atomic>
#include <string>

#include "qadapt/errors.hpp"

namespace qadapt::ad {

namespace {

struct OpInfo {
  OpKind kind;
  std::string_view name;
};

constexpr std::array kOps{
    OpInfo{OpKind::Leaf, "leaf"},
    OpInfo{OpKind::Constant, "constant"},
    OpInfo{OpKind::MatMul, "matmul"},
    OpInfo{OpKind::Transpose, "transpose"},
    OpInfo{OpKind::Add, "add"},
    OpInfo{OpKind::Sub, "sub"},
    OpInfo{OpKind::Mul, "mul"},
    OpInfo{OpKind::Scale, "scale"},
    OpInfo{OpKind::ScaleBy, "scale_by"},
    OpInfo{OpKind::AddRowVec, "add_rowvec"},
    OpInfo{OpKind::Gelu, "gelu"},
    OpInfo{OpKind::Sigmoid, "sigmoid"},
    OpInfo{OpKind::Softmax, "softmax_rows"},
    OpInfo{OpKind::CausalSoftmax, "causal_softmax_rows"},
    OpInfo{OpKind::LayerNorm, "layer_norm"},
    OpInfo{OpKind::SliceRows, "slice_rows"},
    OpInfo{OpKind::SliceCols, "slice_cols"},
    OpInfo{OpKind::ConcatRows, "concat_rows"},
    OpInfo{OpKind::ConcatCols, "concat_cols"},
    OpInfo{OpKind::GatherRows, "gather_rows"},
    OpInfo{OpKind::Mean, "mean"},
    OpInfo{OpKind::Sum, "sum"},
    OpInfo{OpKind::CrossEntropy, "cross_entropy"},
};

constexpr std::array kDifferentiable{
    OpKind::MatMul,   OpKind::Transpose,     OpKind::Add,       OpKind::Sub,       OpKind::Mul,
    OpKind::Scale,    OpKind::ScaleBy,       OpKind::AddRowVec, OpKind::Gelu,      OpKind::Sigmoid,
    OpKind::Softmax,  OpKind::CausalSoftmax, OpKind::LayerNorm, OpKind::SliceRows, OpKind::SliceCols,
    OpKind::ConcatRows, OpKind::ConcatCols,  OpKind::GatherRows, OpKind::Mean,     OpKind::Sum,
    OpKind::CrossEntropy,
};

std::atomic<int> g_fault{-1};

}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& info : kOps) {
    if (info.kind == kind) return info.name;
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (const auto& info : kOps) {
    if (info.name == name) return info.kind;
  }
  return std::nullopt;
}

std::span<const OpKind> differentiable_ops() { return kDifferentiable; }

void set_backward_fault(std::optional<OpKind> kind) { g_fault = kind ? static_cast<int>(*kind) : -1; }

std::optional<OpKind> backward_fault() {
  const int f = g_fault.load();
  if (f < 0) return std::nullopt;
  return static_cast<OpKind>(f);
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (value.empty()) throw ContractError("tape leaf needs a non-empty tensor");
  value.check_finite("tape leaf");
  TapeNode n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Var Tape::push(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite output of " + std::string(op_name(kind)));
  TapeNode n;
  n.kind = kind;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape input refers to a later node");
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(NodeId id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(nodes_[id].value.shape());
  return g;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward called with a variable from another tape");
  if (value(loss.id).numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(value(loss.id).shape()));
  }
  grads_.assign(nodes_.size(), Tensor{});
  if (!nodes_[loss.id].requires_grad) return;
  grads_[loss.id] = Tensor::filled(value(loss.id).shape(), 1.0);
  const auto fault = backward_fault();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    TapeNode& n = nodes_[i];
    if (!n.requires_grad || !n.backward || grads_[i].empty()) continue;
    if (fault && *fault == n.kind) {
      Tensor corrupted = grads_[i];
      for (auto& g : corrupted.mutable_data()) g *= 1.5;
      n.backward(*this, corrupted);
    } else {
      // Rules only write input gradients (lower ids), so this reference stays valid.
      n.backward(*this, grads_[i]);
    }
  }
}

const Tensor* Tape::grad(Var v) const {
  if (v.id >= grads_.size()) return nullptr;
  const Tensor& g = grads_[v.id];
  return g.empty() ? nullptr : &g;
}

}  // namespace qadapt::ad
