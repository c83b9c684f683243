#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Graph is an append-only tape. Every op appends a node holding its output
// value and a closure that pushes the output gradient into its inputs.
// Because inputs always precede outputs, reverse append order is a valid
// topological order for the backward sweep.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "avex/errors.hpp"

namespace avex {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = RowMatrix<double>;

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Dense n-dimensional array. Storage is a row-major matrix whose row count
/// is the leading extent and whose column count is the product of the rest.
template <typename Scalar>
class Tensor {
 public:
  using MatrixType = RowMatrix<Scalar>;

  Tensor() = default;

  explicit Tensor(std::vector<Index> shape, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    auto [rows, cols] = storage_extent(shape_);
    value_ = MatrixType::Zero(rows, cols);
    if (requires_grad_) grad_ = MatrixType::Zero(rows, cols);
  }

  static Tensor from_matrix(MatrixType value, bool requires_grad = false) {
    Tensor t;
    t.shape_ = {value.rows(), value.cols()};
    t.requires_grad_ = requires_grad;
    if (requires_grad) t.grad_ = MatrixType::Zero(value.rows(), value.cols());
    t.value_ = std::move(value);
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index size() const { return value_.size(); }
  bool requires_grad() const { return requires_grad_; }

  MatrixType& value() { return value_; }
  const MatrixType& value() const { return value_; }

  MatrixType& grad() {
    if (!requires_grad_) throw ContractError("tensor does not require grad");
    return grad_;
  }
  const MatrixType& grad() const {
    if (!requires_grad_) throw ContractError("tensor does not require grad");
    return grad_;
  }

  void zero_grad() {
    if (requires_grad_) grad_.setZero();
  }

  bool all_finite() const { return value_.allFinite(); }

 private:
  static std::pair<Index, Index> storage_extent(const std::vector<Index>& shape) {
    for (Index s : shape) {
      if (s <= 0) throw DimensionError("tensor extents must be positive");
    }
    if (shape.empty()) return {1, 1};
    Index cols = std::accumulate(shape.begin() + 1, shape.end(), Index{1},
                                 std::multiplies<Index>());
    return {shape.front(), cols};
  }

  std::vector<Index> shape_{1, 1};
  MatrixType value_ = MatrixType::Zero(1, 1);
  MatrixType grad_;
  bool requires_grad_ = false;
};

enum class Op {
  kConstant,
  kParameter,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kTanh,
  kSigmoid,
  kSoftmax,
  kLogSumExp,
  kConcat,
  kRowSelect,
  kSliceCols,
  kSum,
  kSegmentSum,
  kScale,
  kDropout,
  kCustom,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "elementwise-mul";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSumExp: return "log-sum-exp";
    case Op::kConcat: return "concat";
    case Op::kRowSelect: return "row-select";
    case Op::kSliceCols: return "slice-cols";
    case Op::kSum: return "sum";
    case Op::kSegmentSum: return "segment-sum";
    case Op::kScale: return "scalar-scale";
    case Op::kDropout: return "dropout";
    case Op::kCustom: return "custom";
  }
  return "unknown";
}

namespace detail {

/// True when every entry is finite; inf * 0 and NaN * 0 are NaN.
template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  using S = typename Derived::Scalar;
  return (m.derived().array() * S(0)).sum() == S(0);
}

}  // namespace detail

template <typename Scalar>
class Graph;

template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  const RowMatrix<Scalar>& value() const { return graph->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Graph {
 public:
  using MatrixType = RowMatrix<Scalar>;
  /// Receives the graph and the id of the node whose gradient is ready.
  using BackwardFn = std::function<void(Graph&, int)>;

  struct Node {
    Op op = Op::kConstant;
    std::string label;
    std::vector<int> inputs;
    MatrixType value;
    MatrixType grad;
    bool needs_grad = false;
    Tensor<Scalar>* param = nullptr;
    BackwardFn backward;
  };

  /// With `track_gradients` off, parameters enter as constants and no
  /// backward closures are kept; used for inference.
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracks_gradients() const { return track_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Var<Scalar> constant(MatrixType value) {
    return push(Op::kConstant, {}, std::move(value), nullptr, "constant");
  }

  /// Leaf for a persistent tensor. Repeated calls with the same tensor
  /// return the same node so gradients from every use sum at one place.
  Var<Scalar> parameter(Tensor<Scalar>& tensor) {
    auto it = param_nodes_.find(&tensor);
    if (it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.op = Op::kParameter;
    n.label = "parameter";
    n.value = tensor.value();
    n.needs_grad = track_ && tensor.requires_grad();
    n.param = n.needs_grad ? &tensor : nullptr;
    check_finite(n.value, n.label);
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&tensor, id);
    return {this, id};
  }

  /// Appends an op node. `backward` runs only when the node needs a gradient.
  Var<Scalar> record(Op op, std::vector<int> inputs, MatrixType value, BackwardFn backward,
                     const char* label = nullptr) {
    bool needs = false;
    if (track_) {
      for (int in : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(in)).needs_grad;
    }
    Node n;
    n.op = op;
    n.label = label ? label : op_name(op);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    check_finite(n.value, n.label);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const MatrixType& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool needs_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).needs_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  MatrixType& grad(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.size() == 0) n.grad = MatrixType::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Propagates d(loss)/d(node) for every node reachable from `loss` and
  /// accumulates parameter gradients into their tensors.
  void backward(Var<Scalar> loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    const MatrixType& v = value(loss.id);
    if (v.rows() != 1 || v.cols() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_string(v));
    }
    if (!track_) throw ContractError("backward: graph was built without gradient tracking");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad(loss.id)(0, 0) = Scalar(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (!detail::all_finite(n.grad)) {
        throw NumericError("non-finite gradient at op '" + n.label + "'");
      }
      if (n.param != nullptr) {
        n.param->grad() += n.grad;
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

 private:
  Var<Scalar> push(Op op, std::vector<int> inputs, MatrixType value, Tensor<Scalar>* param,
                   const char* label) {
    Node n;
    n.op = op;
    n.label = label;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.param = param;
    check_finite(n.value, n.label);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  static void check_finite(const MatrixType& m, const std::string& label) {
    if (!detail::all_finite(m)) throw NumericError("non-finite output from op '" + label + "'");
  }

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, int> param_nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.graph != b.graph || a.graph == nullptr) throw ContractError("operands from different graphs");
}

/// 1 / (1 + e^-x), vectorized; saturates to 0 or 1 without producing NaN.
template <typename Scalar>
RowMatrix<Scalar> sigmoid(const RowMatrix<Scalar>& x) {
  return ((-x.array()).exp() + Scalar(1)).inverse().matrix();
}

/// tanh(x) = 1 - 2 / (e^{2x} + 1), vectorized; saturates to +-1.
template <typename Scalar>
RowMatrix<Scalar> tanh(const RowMatrix<Scalar>& x) {
  return (Scalar(1) - Scalar(2) * ((Scalar(2) * x.array()).exp() + Scalar(1)).inverse()).matrix();
}

template <typename Scalar>
RowMatrix<Scalar> softmax_rows(const RowMatrix<Scalar>& x) {
  RowMatrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    Scalar mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.value()) + " x " + shape_string(b.value()));
  }
  RowMatrix<Scalar> out = a.value() * b.value();
  return a.graph->record(Op::kMatMul, {a.id, b.id}, std::move(out), [a, b](Graph<Scalar>& g, int self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(a.id)) g.grad(a.id).noalias() += dy * g.value(b.id).transpose();
    if (g.needs_grad(b.id)) g.grad(b.id).noalias() += g.value(a.id).transpose() * dy;
  });
}

/// a + b. `b` may also be a single row, broadcast over the rows of `a`.
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool row_bcast = b.rows() == 1 && b.cols() == a.cols();
  if (!same && !row_bcast) {
    throw DimensionError("add: " + shape_string(a.value()) + " + " + shape_string(b.value()));
  }
  RowMatrix<Scalar> out = a.value();
  if (same) {
    out += b.value();
  } else {
    out.rowwise() += b.value().row(0);
  }
  return a.graph->record(Op::kAdd, {a.id, b.id}, std::move(out), [a, b, same](Graph<Scalar>& g, int self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(a.id)) g.grad(a.id) += dy;
    if (g.needs_grad(b.id)) {
      if (same) {
        g.grad(b.id) += dy;
      } else {
        g.grad(b.id) += dy.colwise().sum();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("sub: " + shape_string(a.value()) + " - " + shape_string(b.value()));
  }
  RowMatrix<Scalar> out = a.value() - b.value();
  return a.graph->record(Op::kSub, {a.id, b.id}, std::move(out), [a, b](Graph<Scalar>& g, int self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(a.id)) g.grad(a.id) += dy;
    if (g.needs_grad(b.id)) g.grad(b.id) -= dy;
  });
}

/// Elementwise a * b. `b` may also be a single column, broadcast over the
/// columns of `a` (row scaling).
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool col_bcast = b.cols() == 1 && b.rows() == a.rows();
  if (!same && !col_bcast) {
    throw DimensionError("elementwise-mul: " + shape_string(a.value()) + " * " +
                         shape_string(b.value()));
  }
  RowMatrix<Scalar> out;
  if (same) {
    out = a.value().cwiseProduct(b.value());
  } else {
    out = b.value().col(0).asDiagonal() * a.value();
  }
  return a.graph->record(Op::kMul, {a.id, b.id}, std::move(out), [a, b, same](Graph<Scalar>& g, int self) {
    const auto& dy = g.grad(self);
    const auto& av = g.value(a.id);
    const auto& bv = g.value(b.id);
    if (same) {
      if (g.needs_grad(a.id)) g.grad(a.id) += dy.cwiseProduct(bv);
      if (g.needs_grad(b.id)) g.grad(b.id) += dy.cwiseProduct(av);
    } else {
      if (g.needs_grad(a.id)) g.grad(a.id) += bv.col(0).asDiagonal() * dy;
      if (g.needs_grad(b.id)) g.grad(b.id) += dy.cwiseProduct(av).rowwise().sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> x) {
  RowMatrix<Scalar> out = detail::tanh<Scalar>(x.value());
  return x.graph->record(Op::kTanh, {x.id}, std::move(out), [x](Graph<Scalar>& g, int self) {
    const auto& y = g.value(self);
    g.grad(x.id).array() += g.grad(self).array() * (Scalar(1) - y.array().square());
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  RowMatrix<Scalar> out = detail::sigmoid<Scalar>(x.value());
  return x.graph->record(Op::kSigmoid, {x.id}, std::move(out), [x](Graph<Scalar>& g, int self) {
    const auto& y = g.value(self);
    g.grad(x.id).array() += g.grad(self).array() * y.array() * (Scalar(1) - y.array());
  });
}

/// Row-wise softmax.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
  RowMatrix<Scalar> out = detail::softmax_rows<Scalar>(x.value());
  return x.graph->record(Op::kSoftmax, {x.id}, std::move(out), [x](Graph<Scalar>& g, int self) {
    const auto& y = g.value(self);
    const auto& dy = g.grad(self);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = dy.cwiseProduct(y).rowwise().sum();
    RowMatrix<Scalar> shifted = dy;
    shifted.colwise() -= dot;
    g.grad(x.id) += y.cwiseProduct(shifted);
  });
}

/// Row-wise log-sum-exp; the result has one column.
template <typename Scalar>
Var<Scalar> log_sum_exp(Var<Scalar> x) {
  const auto& xv = x.value();
  RowMatrix<Scalar> out(xv.rows(), 1);
  for (Index r = 0; r < xv.rows(); ++r) {
    Scalar mx = xv.row(r).maxCoeff();
    out(r, 0) = mx + std::log((xv.row(r).array() - mx).exp().sum());
  }
  return x.graph->record(Op::kLogSumExp, {x.id}, std::move(out), [x](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(x.id);
    const auto& y = g.value(self);
    const auto& dy = g.grad(self);
    auto& dx = g.grad(x.id);
    for (Index r = 0; r < xv.rows(); ++r) {
      dx.row(r).array() += dy(r, 0) * (xv.row(r).array() - y(r, 0)).exp();
    }
  });
}

/// Column-wise concatenation [a, b].
template <typename Scalar>
Var<Scalar> concat(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_graph(a, b);
  if (a.rows() != b.rows()) {
    throw DimensionError("concat: " + shape_string(a.value()) + " | " + shape_string(b.value()));
  }
  RowMatrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index ac = a.cols();
  const Index bc = b.cols();
  return a.graph->record(Op::kConcat, {a.id, b.id}, std::move(out), [a, b, ac, bc](Graph<Scalar>& g, int self) {
    const auto& dy = g.grad(self);
    if (g.needs_grad(a.id)) g.grad(a.id) += dy.leftCols(ac);
    if (g.needs_grad(b.id)) g.grad(b.id) += dy.rightCols(bc);
  });
}

/// Row-wise concatenation of equally wide blocks, top to bottom.
template <typename Scalar>
Var<Scalar> stack_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("stack_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    detail::require_same_graph(parts.front(), p);
    if (p.cols() != cols) {
      throw DimensionError("concat: row blocks " + shape_string(parts.front().value()) + " and " +
                           shape_string(p.value()));
    }
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id);
  }
  RowMatrix<Scalar> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return parts.front().graph->record(Op::kConcat, ids, std::move(out),
                                     [ids, offsets](Graph<Scalar>& g, int self) {
                                       const auto& dy = g.grad(self);
                                       for (std::size_t i = 0; i < ids.size(); ++i) {
                                         if (!g.needs_grad(ids[i])) continue;
                                         auto& dx = g.grad(ids[i]);
                                         dx += dy.middleRows(offsets[i], dx.rows());
                                       }
                                     });
}

/// Gathers rows of `x` by index; repeated indices are allowed and their
/// gradients accumulate.
template <typename Scalar>
Var<Scalar> select_rows(Var<Scalar> x, std::vector<Index> rows) {
  const auto& xv = x.value();
  RowMatrix<Scalar> out(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) {
      throw DimensionError("row-select: index " + std::to_string(rows[i]) + " outside " +
                           shape_string(xv));
    }
    out.row(static_cast<Index>(i)) = xv.row(rows[i]);
  }
  return x.graph->record(Op::kRowSelect, {x.id}, std::move(out),
                         [x, rows = std::move(rows)](Graph<Scalar>& g, int self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < rows.size(); ++i) {
                             dx.row(rows[i]) += dy.row(static_cast<Index>(i));
                           }
                         });
}

/// Contiguous block of rows [start, start + count).
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.rows()) {
    throw DimensionError("row-select: block [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_string(x.value()));
  }
  RowMatrix<Scalar> out = x.value().middleRows(start, count);
  return x.graph->record(Op::kRowSelect, {x.id}, std::move(out), [x, start, count](Graph<Scalar>& g, int self) {
    g.grad(x.id).middleRows(start, count) += g.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.cols()) {
    throw DimensionError("slice-cols: block outside " + shape_string(x.value()));
  }
  RowMatrix<Scalar> out = x.value().middleCols(start, count);
  return x.graph->record(Op::kSliceCols, {x.id}, std::move(out), [x, start, count](Graph<Scalar>& g, int self) {
    g.grad(x.id).middleCols(start, count) += g.grad(self);
  });
}

/// Sum of all entries, as a 1x1 result.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.graph->record(Op::kSum, {x.id}, std::move(out), [x](Graph<Scalar>& g, int self) {
    g.grad(x.id).array() += g.grad(self)(0, 0);
  });
}

/// out.row(segment[i]) += x.row(i); the adjoint of select_rows.
template <typename Scalar>
Var<Scalar> segment_sum(Var<Scalar> x, std::vector<Index> segment, Index segments) {
  if (static_cast<Index>(segment.size()) != x.rows()) {
    throw DimensionError("segment-sum: " + std::to_string(segment.size()) + " ids for " +
                         shape_string(x.value()));
  }
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(segments, x.cols());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] < 0 || segment[i] >= segments) throw DimensionError("segment-sum: id out of range");
    out.row(segment[i]) += x.value().row(static_cast<Index>(i));
  }
  return x.graph->record(Op::kSegmentSum, {x.id}, std::move(out),
                         [x, segment = std::move(segment)](Graph<Scalar>& g, int self) {
                           const auto& dy = g.grad(self);
                           auto& dx = g.grad(x.id);
                           for (std::size_t i = 0; i < segment.size(); ++i) {
                             dx.row(static_cast<Index>(i)) += dy.row(segment[i]);
                           }
                         });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor) {
  RowMatrix<Scalar> out = x.value() * factor;
  return x.graph->record(Op::kScale, {x.id}, std::move(out), [x, factor](Graph<Scalar>& g, int self) {
    g.grad(x.id) += g.grad(self) * factor;
  });
}

/// Inverted dropout: out = x * mask / keep_prob while training, identity
/// otherwise. `mask` holds 0/1 entries with the shape of `x`.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, const RowMatrix<Scalar>& mask, Scalar keep_prob, bool training) {
  if (!training) return x;
  if (!(keep_prob > 0) || keep_prob > 1) throw ContractError("dropout: keep probability must lie in (0, 1]");
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) {
    throw DimensionError("dropout: mask " + shape_string(mask) + " for input " + shape_string(x.value()));
  }
  RowMatrix<Scalar> scaled = mask / keep_prob;
  RowMatrix<Scalar> out = x.value().cwiseProduct(scaled);
  return x.graph->record(Op::kDropout, {x.id}, std::move(out),
                         [x, scaled = std::move(scaled)](Graph<Scalar>& g, int self) {
                           g.grad(x.id) += g.grad(self).cwiseProduct(scaled);
                         });
}

/// Bernoulli(keep_prob) 0/1 mask.
template <typename Scalar, typename Rng>
RowMatrix<Scalar> dropout_mask(Index rows, Index cols, Scalar keep_prob, Rng& rng) {
  std::bernoulli_distribution keep(static_cast<double>(keep_prob));
  RowMatrix<Scalar> mask(rows, cols);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? Scalar(1) : Scalar(0);
  return mask;
}

}  // namespace avex
