#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gcnas/tensor.hpp"

namespace gcnas {

using NodeId = std::int32_t;
using Index = std::shared_ptr<const std::vector<std::int32_t>>;

inline Index make_index(std::vector<std::int32_t> v) {
  return std::make_shared<const std::vector<std::int32_t>>(std::move(v));
}

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  ScalarMul,
  Mul,
  Relu,
  RowSoftmax,
  Mean,
  Sum,
  Concat,
  Gather,
  ScatterAdd,
  CrossEntropy,
  Transpose,
  SegmentSoftmax,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::ScalarMul: return "scalar-mul";
    case OpKind::Mul: return "elementwise-mul";
    case OpKind::Relu: return "relu";
    case OpKind::RowSoftmax: return "row-softmax";
    case OpKind::Mean: return "mean-over-axis";
    case OpKind::Sum: return "sum-over-axis";
    case OpKind::Concat: return "concat";
    case OpKind::Gather: return "index-gather";
    case OpKind::ScatterAdd: return "index-scatter-add";
    case OpKind::CrossEntropy: return "cross-entropy-loss";
    case OpKind::Transpose: return "transpose";
    case OpKind::SegmentSoftmax: return "segment-softmax";
  }
  return "?";
}

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct Node {
  OpKind op = OpKind::Leaf;
  std::vector<NodeId> inputs;
  Tensor value;
  bool requires_grad = false;
  double scalar = 0.0;   // ScalarMul factor
  int axis = 0;          // Mean/Sum/Concat axis; -1 reduces everything
  Index index;           // Gather/ScatterAdd rows, CrossEntropy labels, SegmentSoftmax segments
  std::size_t count = 0; // ScatterAdd output rows, SegmentSoftmax segment count
  Tensor saved;          // CrossEntropy probabilities
};

// Append-only record of a forward computation. Nodes are stored in creation
// order, which is a topological order by construction.
class Tape {
 public:
  NodeId leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return record(std::move(n));
  }
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId record(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(NodeId id) const { return node(id).value; }
  std::size_t size() const { return nodes_.size(); }

  void tag(const std::string& name, NodeId id) { tags_[name] = id; }
  std::optional<NodeId> find_tag(const std::string& name) const {
    auto it = tags_.find(name);
    if (it == tags_.end()) return std::nullopt;
    return it->second;
  }
  NodeId tagged(const std::string& name) const {
    auto it = tags_.find(name);
    if (it == tags_.end()) throw std::out_of_range("no tape node tagged '" + name + "'");
    return it->second;
  }
  const std::map<std::string, NodeId>& tags() const { return tags_; }

 private:
  std::deque<Node> nodes_;  // stable references across appends
  std::map<std::string, NodeId> tags_;
};

// Handle to a tape node; cheap to copy.
struct Var {
  Tape* tape = nullptr;
  NodeId id = -1;

  const Tensor& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const { return tape->node(id).requires_grad; }
};

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}

inline Var emit(Tape& tape, OpKind op, std::vector<NodeId> inputs, Tensor value) {
  Node n;
  n.op = op;
  n.requires_grad = false;
  for (NodeId i : inputs) n.requires_grad = n.requires_grad || tape.node(i).requires_grad;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  return {&tape, tape.record(std::move(n))};
}

inline Var emit(Tape& tape, Node n) {
  n.requires_grad = false;
  for (NodeId i : n.inputs) n.requires_grad = n.requires_grad || tape.node(i).requires_grad;
  return {&tape, tape.record(std::move(n))};
}

enum class Broadcast { Same, Row, Col, Scalar };

inline Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (a.rank() == 2 && b.rank() == 2) {
    if (b.shape[0] == 1 && b.shape[1] == a.shape[1]) return Broadcast::Row;
    if (b.shape[1] == 1 && b.shape[0] == a.shape[0]) return Broadcast::Col;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape) + " onto " + shape_str(a.shape));
}

inline std::size_t bidx(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::Same: return i;
    case Broadcast::Row: return i % cols;
    case Broadcast::Col: return i / cols;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

template <class F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f) {
  const Broadcast k = broadcast_kind(op, a, b);
  Tensor out(a.shape);
  const std::size_t n = a.numel();
  const double* x = a.data.data();
  const double* y = b.data.data();
  double* o = out.data.data();
  switch (k) {
    case Broadcast::Same:
      for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], y[i]);
      break;
    case Broadcast::Scalar:
      for (std::size_t i = 0; i < n; ++i) o[i] = f(x[i], y[0]);
      break;
    case Broadcast::Row:
    case Broadcast::Col: {
      const std::size_t r = a.rows(), c = a.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[i * c + j] = f(x[i * c + j], y[k == Broadcast::Row ? j : i]);
      break;
    }
  }
  return out;
}

// Sums a full-shape gradient down to the broadcast operand's shape.
inline Tensor reduce_to(const Tensor& g, const Tensor& b, Broadcast k) {
  if (k == Broadcast::Same) return g;
  Tensor out(b.shape);
  const std::size_t c = g.cols();
  for (std::size_t i = 0; i < g.numel(); ++i) out.data[bidx(k, i, c)] += g.data[i];
  return out;
}

inline void check_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape));
}

inline void softmax_rows_inplace(Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double* row = t.data.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
}

}  // namespace detail

// ---- forward operators -----------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::check_rank2("matmul", a.value());
  detail::check_rank2("matmul", b.value());
  return detail::emit(t, OpKind::MatMul, {a.id, b.id}, matmul(a.value(), b.value()));
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return detail::emit(t, OpKind::Add, {a.id, b.id},
                      detail::binary("add", a.value(), b.value(), [](double x, double y) { return x + y; }));
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return detail::emit(t, OpKind::Sub, {a.id, b.id},
                      detail::binary("sub", a.value(), b.value(), [](double x, double y) { return x - y; }));
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return detail::emit(t, OpKind::Mul, {a.id, b.id},
                      detail::binary("elementwise-mul", a.value(), b.value(), [](double x, double y) { return x * y; }));
}

inline Var scale(Var a, double s) {
  Tensor v = a.value();
  for (double& x : v.data) x *= s;
  Node n;
  n.op = OpKind::ScalarMul;
  n.inputs = {a.id};
  n.value = std::move(v);
  n.scalar = s;
  return detail::emit(*a.tape, std::move(n));
}

// relu'(0) is taken as 0.
inline Var relu(Var a) {
  Tensor v = a.value();
  for (double& x : v.data) x = x > 0.0 ? x : 0.0;
  return detail::emit(*a.tape, OpKind::Relu, {a.id}, std::move(v));
}

inline Var row_softmax(Var a) {
  Tensor v = a.value();
  if (v.numel() == 0) throw ShapeError("row-softmax: empty tensor");
  detail::softmax_rows_inplace(v);
  return detail::emit(*a.tape, OpKind::RowSoftmax, {a.id}, std::move(v));
}

inline Var transpose(Var a) {
  detail::check_rank2("transpose", a.value());
  return detail::emit(*a.tape, OpKind::Transpose, {a.id}, transpose(a.value()));
}

namespace detail {
inline Tensor reduce_axis(const Tensor& x, int axis, bool mean) {
  const std::size_t r = x.rows(), c = x.cols();
  if (axis == -1) {
    double s = 0.0;
    for (double v : x.data) s += v;
    return Tensor::scalar(mean ? s / static_cast<double>(x.numel()) : s);
  }
  if (axis == 0) {
    Tensor out = Tensor::matrix(1, c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[j] += x.data[i * c + j];
    if (mean)
      for (double& v : out.data) v /= static_cast<double>(r);
    return out;
  }
  if (axis == 1) {
    Tensor out = Tensor::matrix(r, 1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[i] += x.data[i * c + j];
    if (mean)
      for (double& v : out.data) v /= static_cast<double>(c);
    return out;
  }
  throw ShapeError("reduction axis must be -1, 0 or 1");
}

inline Var reduce(Var a, int axis, bool mean) {
  Node n;
  n.op = mean ? OpKind::Mean : OpKind::Sum;
  n.inputs = {a.id};
  n.value = reduce_axis(a.value(), axis, mean);
  n.axis = axis;
  return emit(*a.tape, std::move(n));
}
}  // namespace detail

// axis 0 reduces rows (result 1×C), axis 1 reduces columns (R×1), -1 reduces all (1×1).
inline Var sum(Var a, int axis = -1) { return detail::reduce(a, axis, false); }
inline Var mean(Var a, int axis = -1) { return detail::reduce(a, axis, true); }

inline Var concat(const std::vector<Var>& parts, int axis = 0) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts.front().tape;
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    detail::check_rank2("concat", p.value());
    ids.push_back(p.id);
  }
  const Tensor& first = parts.front().value();
  Tensor out;
  if (axis == 0) {
    std::size_t rows = 0;
    for (const Var& p : parts) {
      if (p.value().cols() != first.cols())
        throw ShapeError("concat: column mismatch " + shape_str(first.shape) + " vs " + shape_str(p.shape()));
      rows += p.value().rows();
    }
    out = Tensor::matrix(rows, first.cols());
    std::size_t off = 0;
    for (const Var& p : parts) {
      std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
      off += p.value().numel();
    }
  } else if (axis == 1) {
    std::size_t cols = 0;
    for (const Var& p : parts) {
      if (p.value().rows() != first.rows())
        throw ShapeError("concat: row mismatch " + shape_str(first.shape) + " vs " + shape_str(p.shape()));
      cols += p.value().cols();
    }
    out = Tensor::matrix(first.rows(), cols);
    std::size_t coff = 0;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t j = 0; j < v.cols(); ++j) out.data[i * cols + coff + j] = v.data[i * v.cols() + j];
      coff += v.cols();
    }
  } else {
    throw ShapeError("concat: axis must be 0 or 1");
  }
  Node n;
  n.op = OpKind::Concat;
  n.inputs = std::move(ids);
  n.value = std::move(out);
  n.axis = axis;
  return detail::emit(t, std::move(n));
}

// out[i, :] = a[index[i], :]
inline Var gather_rows(Var a, Index index) {
  const Tensor& x = a.value();
  detail::check_rank2("index-gather", x);
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(index->size(), c);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto r = (*index)[i];
    if (r < 0 || static_cast<std::size_t>(r) >= x.rows())
      throw IndexError("index-gather: row " + std::to_string(r) + " out of range for " + shape_str(x.shape));
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  Node n;
  n.op = OpKind::Gather;
  n.inputs = {a.id};
  n.value = std::move(out);
  n.index = std::move(index);
  return detail::emit(*a.tape, std::move(n));
}

// out has `rows` rows; out[index[i], :] += a[i, :]
inline Var scatter_add_rows(Var a, Index index, std::size_t rows) {
  const Tensor& x = a.value();
  detail::check_rank2("index-scatter-add", x);
  if (index->size() != x.rows())
    throw ShapeError("index-scatter-add: " + std::to_string(index->size()) + " indices for " + shape_str(x.shape));
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto r = (*index)[i];
    if (r < 0 || static_cast<std::size_t>(r) >= rows)
      throw IndexError("index-scatter-add: row " + std::to_string(r) + " out of range for " + std::to_string(rows) +
                       " rows");
    for (std::size_t j = 0; j < c; ++j) out.data[r * c + j] += x.data[i * c + j];
  }
  Node n;
  n.op = OpKind::ScatterAdd;
  n.inputs = {a.id};
  n.value = std::move(out);
  n.index = std::move(index);
  n.count = rows;
  return detail::emit(*a.tape, std::move(n));
}

// Softmax over the rows sharing a segment id, independently per column.
inline Var segment_softmax(Var a, Index segments, std::size_t num_segments) {
  const Tensor& x = a.value();
  detail::check_rank2("segment-softmax", x);
  if (segments->size() != x.rows())
    throw ShapeError("segment-softmax: " + std::to_string(segments->size()) + " segment ids for " +
                     shape_str(x.shape));
  const std::size_t r = x.rows(), c = x.cols();
  Tensor mx = Tensor::matrix(num_segments, c, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < r; ++i) {
    const auto s = (*segments)[i];
    if (s < 0 || static_cast<std::size_t>(s) >= num_segments)
      throw IndexError("segment-softmax: segment " + std::to_string(s) + " out of range");
    for (std::size_t j = 0; j < c; ++j) mx.data[s * c + j] = std::max(mx.data[s * c + j], x.data[i * c + j]);
  }
  Tensor out(x.shape);
  Tensor denom = Tensor::matrix(num_segments, c);
  for (std::size_t i = 0; i < r; ++i) {
    const auto s = (*segments)[i];
    for (std::size_t j = 0; j < c; ++j) {
      out.data[i * c + j] = std::exp(x.data[i * c + j] - mx.data[s * c + j]);
      denom.data[s * c + j] += out.data[i * c + j];
    }
  }
  for (std::size_t i = 0; i < r; ++i) {
    const auto s = (*segments)[i];
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] /= denom.data[s * c + j];
  }
  Node n;
  n.op = OpKind::SegmentSoftmax;
  n.inputs = {a.id};
  n.value = std::move(out);
  n.index = std::move(segments);
  n.count = num_segments;
  return detail::emit(*a.tape, std::move(n));
}

// Mean softmax cross-entropy of logits rows against integer labels.
inline Var cross_entropy(Var logits, Index labels) {
  const Tensor& z = logits.value();
  detail::check_rank2("cross-entropy-loss", z);
  if (labels->size() != z.rows())
    throw ShapeError("cross-entropy-loss: " + std::to_string(labels->size()) + " labels for logits " +
                     shape_str(z.shape));
  if (z.rows() == 0) throw ShapeError("cross-entropy-loss: no rows");
  Tensor p = z;
  detail::softmax_rows_inplace(p);
  const std::size_t c = z.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto y = (*labels)[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw IndexError("cross-entropy-loss: label " + std::to_string(y) + " out of range");
    const double* row = z.data.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    loss += (m + std::log(s)) - row[y];
  }
  Node n;
  n.op = OpKind::CrossEntropy;
  n.inputs = {logits.id};
  n.value = Tensor::scalar(loss / static_cast<double>(z.rows()));
  n.index = std::move(labels);
  n.saved = std::move(p);
  return detail::emit(*logits.tape, std::move(n));
}

// ---- reverse mode ----------------------------------------------------------

class GradStore {
 public:
  explicit GradStore(std::size_t n = 0) : grads_(n) {}

  bool contains(NodeId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() && grads_[static_cast<std::size_t>(id)].has_value();
  }
  const Tensor* find(NodeId id) const { return contains(id) ? &*grads_[static_cast<std::size_t>(id)] : nullptr; }
  const Tensor& at(NodeId id) const {
    if (!contains(id)) throw std::out_of_range("no gradient for node " + std::to_string(id));
    return *grads_[static_cast<std::size_t>(id)];
  }

  void accumulate(NodeId id, Tensor g) {
    auto& slot = grads_.at(static_cast<std::size_t>(id));
    if (!slot) {
      slot = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.numel(); ++i) slot->data[i] += g.data[i];
  }
  void release(NodeId id) { grads_.at(static_cast<std::size_t>(id)).reset(); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

namespace detail {

// Applies the local VJP of node `id` to its output gradient `g`, handing each
// input gradient to sink(input_node, grad) when wants(input_node) is true.
template <class Wants, class Sink>
void propagate(const Tape& tape, NodeId id, const Tensor& g, Wants wants, Sink sink) {
  const Node& n = tape.node(id);
  auto in = [&](std::size_t k) -> const Tensor& { return tape.value(n.inputs[k]); };
  switch (n.op) {
    case OpKind::Leaf:
      return;
    case OpKind::MatMul: {
      if (wants(n.inputs[0])) sink(n.inputs[0], matmul(g, in(1), false, true));
      if (wants(n.inputs[1])) sink(n.inputs[1], matmul(in(0), g, true, false));
      return;
    }
    case OpKind::Add:
    case OpKind::Sub: {
      if (wants(n.inputs[0])) sink(n.inputs[0], g);
      if (wants(n.inputs[1])) {
        Tensor gb = reduce_to(g, in(1), broadcast_kind(op_name(n.op), in(0), in(1)));
        if (n.op == OpKind::Sub)
          for (double& v : gb.data) v = -v;
        sink(n.inputs[1], std::move(gb));
      }
      return;
    }
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const Broadcast k = broadcast_kind("elementwise-mul", a, b);
      const std::size_t c = a.cols();
      if (wants(n.inputs[0])) {
        Tensor ga(g.shape);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] = g.data[i] * b.data[bidx(k, i, c)];
        sink(n.inputs[0], std::move(ga));
      }
      if (wants(n.inputs[1])) {
        Tensor full(g.shape);
        for (std::size_t i = 0; i < g.numel(); ++i) full.data[i] = g.data[i] * a.data[i];
        sink(n.inputs[1], reduce_to(full, b, k));
      }
      return;
    }
    case OpKind::ScalarMul: {
      if (!wants(n.inputs[0])) return;
      Tensor ga = g;
      for (double& v : ga.data) v *= n.scalar;
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::Relu: {
      if (!wants(n.inputs[0])) return;
      Tensor ga = g;
      const Tensor& x = in(0);
      for (std::size_t i = 0; i < ga.numel(); ++i)
        if (!(x.data[i] > 0.0)) ga.data[i] = 0.0;
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::RowSoftmax: {
      if (!wants(n.inputs[0])) return;
      const Tensor& y = n.value;
      const std::size_t r = y.rows(), c = y.cols();
      Tensor ga(y.shape);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g.data[i * c + j] * y.data[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga.data[i * c + j] = y.data[i * c + j] * (g.data[i * c + j] - s);
      }
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::Mean:
    case OpKind::Sum: {
      if (!wants(n.inputs[0])) return;
      const Tensor& x = in(0);
      const std::size_t r = x.rows(), c = x.cols();
      Tensor ga(x.shape);
      double div = 1.0;
      if (n.op == OpKind::Mean)
        div = n.axis == -1 ? static_cast<double>(x.numel()) : (n.axis == 0 ? static_cast<double>(r) : static_cast<double>(c));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double gv = n.axis == -1 ? g.data[0] : (n.axis == 0 ? g.data[j] : g.data[i]);
          ga.data[i * c + j] = gv / div;
        }
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::Concat: {
      const std::size_t total_cols = g.cols();
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& x = in(k);
        if (wants(n.inputs[k])) {
          Tensor gk(x.shape);
          if (n.axis == 0) {
            std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(off), x.numel(), gk.data.begin());
          } else {
            for (std::size_t i = 0; i < x.rows(); ++i)
              for (std::size_t j = 0; j < x.cols(); ++j) gk.data[i * x.cols() + j] = g.data[i * total_cols + off + j];
          }
          sink(n.inputs[k], std::move(gk));
        }
        off += n.axis == 0 ? x.numel() : x.cols();
      }
      return;
    }
    case OpKind::Gather: {
      if (!wants(n.inputs[0])) return;
      const Tensor& x = in(0);
      const std::size_t c = x.cols();
      Tensor ga(x.shape);
      const auto& idx = *n.index;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga.data[idx[i] * c + j] += g.data[i * c + j];
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::ScatterAdd: {
      if (!wants(n.inputs[0])) return;
      const Tensor& x = in(0);
      const std::size_t c = x.cols();
      Tensor ga(x.shape);
      const auto& idx = *n.index;
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(g.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                    ga.data.begin() + static_cast<std::ptrdiff_t>(i * c));
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::CrossEntropy: {
      if (!wants(n.inputs[0])) return;
      Tensor ga = n.saved;
      const std::size_t r = ga.rows(), c = ga.cols();
      const double s = g.data[0] / static_cast<double>(r);
      for (std::size_t i = 0; i < r; ++i) ga.data[i * c + static_cast<std::size_t>((*n.index)[i])] -= 1.0;
      for (double& v : ga.data) v *= s;
      sink(n.inputs[0], std::move(ga));
      return;
    }
    case OpKind::Transpose: {
      if (wants(n.inputs[0])) sink(n.inputs[0], transpose(g));
      return;
    }
    case OpKind::SegmentSoftmax: {
      if (!wants(n.inputs[0])) return;
      const Tensor& y = n.value;
      const std::size_t r = y.rows(), c = y.cols();
      Tensor dots = Tensor::matrix(n.count, c);
      const auto& seg = *n.index;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dots.data[seg[i] * c + j] += g.data[i * c + j] * y.data[i * c + j];
      Tensor ga(y.shape);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          ga.data[i * c + j] = y.data[i * c + j] * (g.data[i * c + j] - dots.data[seg[i] * c + j]);
      sink(n.inputs[0], std::move(ga));
      return;
    }
  }
}

}  // namespace detail

class BackwardError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Full reverse sweep from a scalar loss. Every node that requires a gradient
// and lies upstream of the loss receives one.
inline GradStore backward(const Tape& tape, NodeId loss) {
  const Tensor& lv = tape.value(loss);
  if (lv.numel() != 1) throw BackwardError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
  GradStore grads(tape.size());
  grads.accumulate(loss, Tensor(lv.shape, 1.0));
  for (NodeId v = loss; v >= 0; --v) {
    const Tensor* g = grads.find(v);
    if (!g || !tape.node(v).requires_grad) continue;
    detail::propagate(
        tape, v, *g, [&](NodeId u) { return tape.node(u).requires_grad; },
        [&](NodeId u, Tensor gu) { grads.accumulate(u, std::move(gu)); });
  }
  return grads;
}

struct VjpContribution {
  Tensor grad;
  bool has_path = false;
};

// (∂ source / ∂ boundary)ᵀ · upstream, propagated only along tape paths that
// start at `boundary` and end at `source`. Jacobians are never formed.
inline VjpContribution vjp_contribution(const Tape& tape, NodeId source, NodeId boundary, const Tensor& upstream) {
  const Tensor& bval = tape.value(boundary);
  const Tensor& sval = tape.value(source);
  if (upstream.shape != sval.shape)
    throw ShapeError("vjp_contribution: upstream " + shape_str(upstream.shape) + " does not match source " +
                     shape_str(sval.shape));
  VjpContribution out{Tensor(bval.shape), false};
  if (boundary > source) return out;
  if (boundary == source) return {upstream, true};

  const auto lo = static_cast<std::size_t>(boundary);
  std::vector<char> downstream(static_cast<std::size_t>(source) - lo + 1, 0);
  downstream[0] = 1;
  for (NodeId v = boundary + 1; v <= source; ++v) {
    for (NodeId u : tape.node(v).inputs)
      if (u >= boundary && downstream[static_cast<std::size_t>(u) - lo]) {
        downstream[static_cast<std::size_t>(v) - lo] = 1;
        break;
      }
  }
  if (!downstream.back()) return out;

  auto on_path = [&](NodeId u) { return u >= boundary && downstream[static_cast<std::size_t>(u) - lo] != 0; };
  GradStore grads(static_cast<std::size_t>(source) + 1);
  grads.accumulate(source, upstream);
  for (NodeId v = source; v > boundary; --v) {
    const Tensor* g = grads.find(v);
    if (!g || !on_path(v)) continue;
    detail::propagate(tape, v, *g, on_path, [&](NodeId u, Tensor gu) { grads.accumulate(u, std::move(gu)); });
    grads.release(v);
  }
  if (const Tensor* g = grads.find(boundary)) out.grad = *g;
  out.has_path = true;
  return out;
}

// Max elementwise relative error between backward() and central differences
// of a scalar function, using max(|g|, 1e-8) as denominator.
inline double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  Tape tape;
  Var xv{&tape, tape.leaf(x, true)};
  Var loss = f(tape, xv);
  const GradStore grads = backward(tape, loss.id);
  const Tensor g = grads.contains(xv.id) ? grads.at(xv.id) : Tensor(x.shape);

  auto eval = [&](const Tensor& point) {
    Tape t;
    Var v{&t, t.leaf(point, false)};
    return f(t, v).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval(probe);
    probe.data[i] = orig - h;
    const double fm = eval(probe);
    probe.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g.data[i]) / std::max(std::abs(g.data[i]), 1e-8));
  }
  return worst;
}

}  // namespace gcnas
