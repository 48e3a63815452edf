#include "raregen/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "raregen/errors.hpp"

namespace raregen::numerics {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kNeg: return "neg";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kOffset: return "offset";
    case Op::kMatVec: return "matvec";
    case Op::kMatMul: return "matmul";
    case Op::kDot: return "dot";
    case Op::kSum: return "sum";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kLogistic: return "logistic";
    case Op::kSqrt: return "sqrt";
    case Op::kRelu: return "relu";
    case Op::kAbs: return "abs";
    case Op::kSoftmax: return "softmax";
    case Op::kReshape: return "reshape";
    case Op::kSlice: return "slice";
    case Op::kConcat: return "concat";
    case Op::kExpandRows: return "expand_rows";
    case Op::kScalarMul: return "scalar_mul";
    case Op::kDiag: return "diag";
    case Op::kPermuteRows: return "permute_rows";
  }
  return "?";
}

const Tensor& GradientMap::at(NodeId id) const {
  if (!contains(id)) {
    throw ContractViolation("no gradient recorded for node " + std::to_string(id));
  }
  return grads_[id];
}

void Tape::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ContractViolation("invalid node id " + std::to_string(id));
  }
}

bool Tape::any_tracked(std::span<const NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return nodes_[id].track; });
}

NodeId Tape::push(Node node) {
  if (node.op != Op::kLeaf && node.op != Op::kConstant && !node.value.all_finite()) {
    throw NumericError("non-finite value at node " + std::to_string(nodes_.size()) + " (" +
                       op_name(node.op) + ")");
  }
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw ContractViolation("leaf: non-finite values");
  return push({Op::kLeaf, {}, std::move(value), true});
}

NodeId Tape::constant(Tensor value) {
  if (!value.all_finite()) throw ContractViolation("constant: non-finite values");
  return push({Op::kConstant, {}, std::move(value), false});
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push({Op::kAdd, {a, b}, numerics::add(value(a), value(b)), any_tracked(std::array{a, b})});
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push({Op::kSub, {a, b}, numerics::sub(value(a), value(b)), any_tracked(std::array{a, b})});
}

NodeId Tape::neg(NodeId a) {
  check_id(a);
  return push({Op::kNeg, {a}, numerics::scale(value(a), -1.0), nodes_[a].track});
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push({Op::kMul, {a, b}, numerics::mul(value(a), value(b)), any_tracked(std::array{a, b})});
}

NodeId Tape::div(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) throw ContractViolation("div: shape mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= y[i];
  return push({Op::kDiv, {a, b}, std::move(out), any_tracked(std::array{a, b})});
}

NodeId Tape::scale(NodeId a, double c) {
  check_id(a);
  Node n{Op::kScale, {a}, numerics::scale(value(a), c), nodes_[a].track};
  n.aux = c;
  return push(std::move(n));
}

NodeId Tape::offset(NodeId a, double c) {
  check_id(a);
  Tensor out = value(a);
  for (auto& v : out.data()) v += c;
  Node n{Op::kOffset, {a}, std::move(out), nodes_[a].track};
  n.aux = c;
  return push(std::move(n));
}

NodeId Tape::matvec(NodeId m, NodeId v) {
  check_id(m);
  check_id(v);
  return push(
      {Op::kMatVec, {m, v}, numerics::matvec(value(m), value(v)), any_tracked(std::array{m, v})});
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push(
      {Op::kMatMul, {a, b}, numerics::matmul(value(a), value(b)), any_tracked(std::array{a, b})});
}

NodeId Tape::dot(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  return push({Op::kDot,
               {a, b},
               Tensor::scalar(numerics::dot(value(a), value(b))),
               any_tracked(std::array{a, b})});
}

NodeId Tape::sum(NodeId a) {
  check_id(a);
  return push({Op::kSum, {a}, Tensor::scalar(numerics::sum(value(a))), nodes_[a].track});
}

namespace {
template <typename F>
Tensor map_elementwise(const Tensor& a, F&& f) {
  Tensor out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}
}  // namespace

NodeId Tape::exp(NodeId a) {
  check_id(a);
  return push({Op::kExp, {a}, map_elementwise(value(a), [](double v) { return std::exp(v); }),
               nodes_[a].track});
}

NodeId Tape::log(NodeId a) {
  check_id(a);
  return push({Op::kLog, {a}, map_elementwise(value(a), [](double v) { return std::log(v); }),
               nodes_[a].track});
}

NodeId Tape::tanh(NodeId a) {
  check_id(a);
  return push({Op::kTanh, {a}, map_elementwise(value(a), [](double v) { return std::tanh(v); }),
               nodes_[a].track});
}

NodeId Tape::logistic(NodeId a) {
  check_id(a);
  return push({Op::kLogistic, {a},
               map_elementwise(value(a), [](double v) { return 1.0 / (1.0 + std::exp(-v)); }),
               nodes_[a].track});
}

NodeId Tape::sqrt(NodeId a) {
  check_id(a);
  return push({Op::kSqrt, {a}, map_elementwise(value(a), [](double v) { return std::sqrt(v); }),
               nodes_[a].track});
}

NodeId Tape::relu(NodeId a) {
  check_id(a);
  return push({Op::kRelu, {a}, map_elementwise(value(a), [](double v) { return v > 0.0 ? v : 0.0; }),
               nodes_[a].track});
}

NodeId Tape::abs(NodeId a) {
  check_id(a);
  return push({Op::kAbs, {a}, map_elementwise(value(a), [](double v) { return std::abs(v); }),
               nodes_[a].track});
}

NodeId Tape::softmax(NodeId a) {
  check_id(a);
  const Tensor& x = value(a);
  double mx = x[0];
  for (double v : x.data()) mx = std::max(mx, v);
  Tensor out = x;
  double z = 0.0;
  for (auto& v : out.data()) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : out.data()) v /= z;
  return push({Op::kSoftmax, {a}, std::move(out), nodes_[a].track});
}

NodeId Tape::reshape(NodeId a, std::vector<std::size_t> shape) {
  check_id(a);
  return push({Op::kReshape, {a}, value(a).reshaped(std::move(shape)), nodes_[a].track});
}

NodeId Tape::slice(NodeId a, std::size_t offset, std::size_t length) {
  check_id(a);
  const Tensor& x = value(a);
  if (offset + length > x.size()) throw ContractViolation("slice: out of range");
  Tensor out({length});
  for (std::size_t i = 0; i < length; ++i) out[i] = x[offset + i];
  Node n{Op::kSlice, {a}, std::move(out), nodes_[a].track};
  n.aux_index = offset;
  return push(std::move(n));
}

NodeId Tape::concat(std::span<const NodeId> parts) {
  if (parts.empty()) throw ContractViolation("concat: empty input");
  std::size_t total = 0;
  for (NodeId id : parts) {
    check_id(id);
    total += value(id).size();
  }
  Tensor out({total});
  std::size_t at = 0;
  for (NodeId id : parts) {
    for (double v : value(id).data()) out[at++] = v;
  }
  Node n{Op::kConcat, {parts.begin(), parts.end()}, std::move(out), any_tracked(parts)};
  return push(std::move(n));
}

NodeId Tape::expand_rows(NodeId s, std::size_t width) {
  check_id(s);
  const Tensor& x = value(s);
  Tensor out({x.size(), width});
  for (std::size_t c = 0; c < x.size(); ++c) {
    for (std::size_t d = 0; d < width; ++d) out.at(c, d) = x[c];
  }
  Node n{Op::kExpandRows, {s}, std::move(out), nodes_[s].track};
  n.aux_index = width;
  return push(std::move(n));
}

NodeId Tape::scalar_mul(NodeId v, NodeId s) {
  check_id(v);
  check_id(s);
  if (value(s).size() != 1) throw ContractViolation("scalar_mul: scalar operand required");
  return push({Op::kScalarMul,
               {v, s},
               numerics::scale(value(v), value(s)[0]),
               any_tracked(std::array{v, s})});
}

NodeId Tape::diag(NodeId v) {
  check_id(v);
  const Tensor& x = value(v);
  Tensor out({x.size(), x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) out.at(i, i) = x[i];
  return push({Op::kDiag, {v}, std::move(out), nodes_[v].track});
}

NodeId Tape::permute_rows(NodeId a, std::vector<std::size_t> perm) {
  check_id(a);
  const Tensor& x = value(a);
  if (x.rank() != 2 || perm.size() != x.rows()) {
    throw ContractViolation("permute_rows: permutation does not match row count");
  }
  Tensor out({x.rows(), x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(perm[r], c);
  }
  Node n{Op::kPermuteRows, {a}, std::move(out), nodes_[a].track};
  n.aux_perm = std::move(perm);
  return push(std::move(n));
}

GradientMap Tape::backward(NodeId output) const {
  check_id(output);
  if (value(output).size() != 1) {
    throw ContractViolation("backward: output must be scalar-valued");
  }
  std::vector<Tensor> grads(nodes_.size());
  auto grad_of = [&](NodeId id) -> Tensor& {
    Tensor& g = grads[id];
    if (g.size() == 0) g = Tensor::zeros(nodes_[id].value.shape());
    return g;
  };
  if (nodes_[output].track) grad_of(output)[0] = 1.0;

  for (NodeId id = output; id >= 0; --id) {
    const Node& node = nodes_[id];
    if (!node.track || grads[id].size() == 0) continue;
    const Tensor& g = grads[id];
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient at node " + std::to_string(id) + " (" +
                         op_name(node.op) + ")");
    }
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[node.in[k]].value; };
    auto tracked_in = [&](std::size_t k) { return nodes_[node.in[k]].track; };
    switch (node.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd: {
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
        break;
      }
      case Op::kNeg: {
        Tensor& da = grad_of(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] -= g[i];
        break;
      }
      case Op::kMul: {
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          const Tensor& b = in(1);
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          const Tensor& a = in(0);
          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
        }
        break;
      }
      case Op::kDiv: {
        const Tensor& b = in(1);
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / b[i];
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          const Tensor& y = node.value;
          for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i] * y[i] / b[i];
        }
        break;
      }
      case Op::kScale: {
        Tensor& da = grad_of(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += node.aux * g[i];
        break;
      }
      case Op::kOffset:
      case Op::kReshape: {
        Tensor& da = grad_of(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        break;
      }
      case Op::kMatVec: {
        const Tensor& m = in(0);
        const Tensor& v = in(1);
        if (tracked_in(0)) {
          Tensor& dm = grad_of(node.in[0]);
          for (std::size_t r = 0; r < m.rows(); ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            for (std::size_t c = 0; c < m.cols(); ++c) dm.at(r, c) += gr * v[c];
          }
        }
        if (tracked_in(1)) {
          Tensor& dv = grad_of(node.in[1]);
          for (std::size_t r = 0; r < m.rows(); ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            for (std::size_t c = 0; c < m.cols(); ++c) dv[c] += gr * m.at(r, c);
          }
        }
        break;
      }
      case Op::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < b.cols(); ++c) s += g.at(i, c) * b.at(j, c);
              da.at(i, j) += s;
            }
          }
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          for (std::size_t j = 0; j < b.rows(); ++j) {
            for (std::size_t c = 0; c < b.cols(); ++c) {
              double s = 0.0;
              for (std::size_t i = 0; i < a.rows(); ++i) s += a.at(i, j) * g.at(i, c);
              db.at(j, c) += s;
            }
          }
        }
        break;
      }
      case Op::kDot: {
        const double gs = g[0];
        if (tracked_in(0)) {
          Tensor& da = grad_of(node.in[0]);
          const Tensor& b = in(1);
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += gs * b[i];
        }
        if (tracked_in(1)) {
          Tensor& db = grad_of(node.in[1]);
          const Tensor& a = in(0);
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += gs * a[i];
        }
        break;
      }
      case Op::kSum: {
        Tensor& da = grad_of(node.in[0]);
        const double gs = g[0];
        for (auto& v : da.data()) v += gs;
        break;
      }
      case Op::kExp: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& y = node.value;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
        break;
      }
      case Op::kLog: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / x[i];
        break;
      }
      case Op::kTanh: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& y = node.value;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::kLogistic: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& y = node.value;
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::kSqrt: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& y = node.value;
        // Zero cotangent short-circuits so clamped branches upstream of a
        // zero-distance sqrt do not emit 0 * inf.
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (g[i] == 0.0) continue;
          da[i] += g[i] / (2.0 * y[i]);
        }
        break;
      }
      case Op::kRelu: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) da[i] += g[i];
        }
        break;
      }
      case Op::kAbs: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) {
            da[i] += g[i];
          } else if (x[i] < 0.0) {
            da[i] -= g[i];
          }
        }
        break;
      }
      case Op::kSoftmax: {
        Tensor& da = grad_of(node.in[0]);
        const Tensor& y = node.value;
        double inner = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) inner += g[i] * y[i];
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += y[i] * (g[i] - inner);
        break;
      }
      case Op::kSlice: {
        Tensor& da = grad_of(node.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) da[node.aux_index + i] += g[i];
        break;
      }
      case Op::kConcat: {
        std::size_t at = 0;
        for (NodeId part : node.in) {
          const std::size_t len = nodes_[part].value.size();
          if (nodes_[part].track) {
            Tensor& dp = grad_of(part);
            for (std::size_t i = 0; i < len; ++i) dp[i] += g[at + i];
          }
          at += len;
        }
        break;
      }
      case Op::kExpandRows: {
        Tensor& ds = grad_of(node.in[0]);
        const std::size_t width = node.aux_index;
        for (std::size_t c = 0; c < ds.size(); ++c) {
          double s = 0.0;
          for (std::size_t d = 0; d < width; ++d) s += g[c * width + d];
          ds[c] += s;
        }
        break;
      }
      case Op::kScalarMul: {
        const double sv = in(1)[0];
        if (tracked_in(0)) {
          Tensor& dv = grad_of(node.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dv[i] += sv * g[i];
        }
        if (tracked_in(1)) {
          Tensor& ds = grad_of(node.in[1]);
          const Tensor& v = in(0);
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * v[i];
          ds[0] += s;
        }
        break;
      }
      case Op::kDiag: {
        Tensor& dv = grad_of(node.in[0]);
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += g.at(i, i);
        break;
      }
      case Op::kPermuteRows: {
        Tensor& da = grad_of(node.in[0]);
        const std::size_t cols = node.value.cols();
        for (std::size_t r = 0; r < node.aux_perm.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            da.at(node.aux_perm[r], c) += g.at(r, c);
          }
        }
        break;
      }
    }
  }
  return GradientMap(std::move(grads));
}

}  // namespace raregen::numerics
