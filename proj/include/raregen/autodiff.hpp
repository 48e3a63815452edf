#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "raregen/tensor.hpp"

namespace raregen::numerics {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kNeg,
  kMul,
  kDiv,
  kScale,
  kOffset,
  kMatVec,
  kMatMul,
  kDot,
  kSum,
  kExp,
  kLog,
  kTanh,
  kLogistic,
  kSqrt,
  kRelu,
  kAbs,
  kSoftmax,
  kReshape,
  kSlice,
  kConcat,
  kExpandRows,
  kScalarMul,
  kDiag,
  kPermuteRows,
};

const char* op_name(Op op);

// Gradients keyed by node id; nodes that do not require a gradient map to an
// empty tensor.
class GradientMap {
 public:
  explicit GradientMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  bool contains(NodeId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() && grads_[id].size() > 0;
  }
  const Tensor& at(NodeId id) const;

 private:
  std::vector<Tensor> grads_;
};

// Eager evaluation tape for reverse-mode differentiation. Nodes are appended
// in evaluation order, so node ids are already a topological order; a backward
// pass is one reverse sweep that touches each node exactly once. Only scalar
// outputs may be differentiated. Every operation checks its result for
// non-finite values and reports the offending node.
class Tape {
 public:
  NodeId leaf(Tensor value);
  NodeId constant(Tensor value);
  NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId offset(NodeId a, double c);
  NodeId matvec(NodeId m, NodeId v);
  NodeId matmul(NodeId a, NodeId b);
  NodeId dot(NodeId a, NodeId b);
  NodeId sum(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId tanh(NodeId a);
  NodeId logistic(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId relu(NodeId a);
  NodeId abs(NodeId a);
  NodeId softmax(NodeId a);
  NodeId reshape(NodeId a, std::vector<std::size_t> shape);
  NodeId slice(NodeId a, std::size_t offset, std::size_t length);
  NodeId concat(std::span<const NodeId> parts);
  // y[c, d] = s[c] for d in [0, width): broadcast a channel vector across a row.
  NodeId expand_rows(NodeId s, std::size_t width);
  // y = s * v for a one-element node s.
  NodeId scalar_mul(NodeId v, NodeId s);
  NodeId diag(NodeId v);
  NodeId permute_rows(NodeId a, std::vector<std::size_t> perm);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t node_count() const { return nodes_.size(); }
  bool tracked(NodeId id) const { return nodes_[id].track; }

  // Reverse sweep from a scalar output. Also usable repeatedly on one tape.
  GradientMap backward(NodeId output) const;

 private:
  struct Node {
    Op op;
    std::vector<NodeId> in;
    Tensor value;
    bool track = false;
    double aux = 0.0;
    std::size_t aux_index = 0;
    std::vector<std::size_t> aux_perm;
  };

  NodeId push(Node node);
  bool any_tracked(std::span<const NodeId> ids) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
};

}  // namespace raregen::numerics
