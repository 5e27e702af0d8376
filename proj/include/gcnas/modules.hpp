#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gcnas/autodiff.hpp"
#include "gcnas/graph_data.hpp"
#include "gcnas/rng.hpp"

namespace gcnas {

// Six candidate modules per layer: four message-passing, two global attention.
enum class ModuleKind { MeanConv, AttnConv, SumEdgeConv, SoftmaxAggConv, FullAttention, LowRankAttention };

inline constexpr std::size_t kModulesPerLayer = 6;
inline constexpr std::size_t kMpnnModules = 4;
inline constexpr std::size_t kLowRankDim = 4;

inline constexpr std::array<ModuleKind, kModulesPerLayer> kModuleKinds = {
    ModuleKind::MeanConv,      ModuleKind::AttnConv,      ModuleKind::SumEdgeConv,
    ModuleKind::SoftmaxAggConv, ModuleKind::FullAttention, ModuleKind::LowRankAttention};

constexpr bool is_mpnn(ModuleKind k) {
  return k == ModuleKind::MeanConv || k == ModuleKind::AttnConv || k == ModuleKind::SumEdgeConv ||
         k == ModuleKind::SoftmaxAggConv;
}

constexpr bool updates_edges(ModuleKind k) { return k == ModuleKind::SumEdgeConv; }

inline const char* module_name(ModuleKind k) {
  switch (k) {
    case ModuleKind::MeanConv: return "MeanConv";
    case ModuleKind::AttnConv: return "AttnConv";
    case ModuleKind::SumEdgeConv: return "SumEdgeConv";
    case ModuleKind::SoftmaxAggConv: return "SoftmaxAggConv";
    case ModuleKind::FullAttention: return "FullAttention";
    case ModuleKind::LowRankAttention: return "LowRankAttention";
  }
  return "?";
}

struct NamedTensor {
  std::string name;
  Tensor value;
  bool operator==(const NamedTensor&) const = default;
};

struct ParamGroup {
  std::vector<NamedTensor> tensors;

  Tensor& operator[](std::string_view name) {
    for (auto& t : tensors)
      if (t.name == name) return t.value;
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }
  const Tensor& operator[](std::string_view name) const { return const_cast<ParamGroup&>(*this)[name]; }
  void add(std::string name, Tensor value) { tensors.push_back({std::move(name), std::move(value)}); }
  bool operator==(const ParamGroup&) const = default;
};

// Registers parameter tensors as tape leaves, once per tensor per tape.
class Binder {
 public:
  Binder(Tape& tape, bool track) : tape_(&tape), track_(track) {}

  Var operator()(const Tensor& p) {
    auto it = ids_.find(&p);
    if (it != ids_.end()) return {tape_, it->second};
    const NodeId id = tape_->leaf(p, track_);
    ids_.emplace(&p, id);
    return {tape_, id};
  }
  Var constant(Tensor t) { return {tape_, tape_->constant(std::move(t))}; }

  std::optional<NodeId> find(const Tensor* p) const {
    auto it = ids_.find(p);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  Tape& tape() const { return *tape_; }
  bool tracking() const { return track_; }

 private:
  Tape* tape_;
  bool track_;
  std::map<const Tensor*, NodeId> ids_;
};

// Per-batch constants shared by every module in a forward pass.
struct BatchConstants {
  Var inv_loop_degree;

  BatchConstants(Binder& b, const GraphBatch& batch) : inv_loop_degree(b.constant(batch.inv_loop_degree)) {}
};

inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (double& v : t.data) v = u(rng);
  return t;
}

inline ParamGroup init_affine_pair(const char* prefix, std::size_t in, std::size_t out, Rng& rng) {
  ParamGroup g;
  g.add(std::string(prefix) + "W", glorot(in, out, rng));
  g.add(std::string(prefix) + "b", Tensor::matrix(1, out));
  return g;
}

inline ParamGroup init_module(ModuleKind kind, std::size_t d, Rng& rng) {
  ParamGroup g;
  switch (kind) {
    case ModuleKind::MeanConv:
      g.add("W", glorot(d, d, rng));
      g.add("b", Tensor::matrix(1, d));
      break;
    case ModuleKind::AttnConv:
      g.add("W", glorot(d, d, rng));
      g.add("a_src", glorot(d, 1, rng));
      g.add("a_dst", glorot(d, 1, rng));
      g.add("b", Tensor::matrix(1, d));
      break;
    case ModuleKind::SumEdgeConv:
      g.add("W", glorot(d, d, rng));
      g.add("b", Tensor::matrix(1, d));
      g.add("We", glorot(d, d, rng));
      g.add("be", Tensor::matrix(1, d));
      break;
    case ModuleKind::SoftmaxAggConv:
      g.add("W", glorot(d, d, rng));
      g.add("b", Tensor::matrix(1, d));
      g.add("t", Tensor::scalar(1.0));
      break;
    case ModuleKind::FullAttention:
      g.add("Wq", glorot(d, d, rng));
      g.add("Wk", glorot(d, d, rng));
      g.add("Wv", glorot(d, d, rng));
      break;
    case ModuleKind::LowRankAttention:
      g.add("Wq", glorot(d, kLowRankDim, rng));
      g.add("Wk", glorot(d, kLowRankDim, rng));
      g.add("Wv", glorot(d, d, rng));
      break;
  }
  return g;
}

inline ParamGroup init_fusion(std::size_t d, Rng& rng) {
  ParamGroup g;
  g.add("W1", glorot(d, d, rng));
  g.add("b1", Tensor::matrix(1, d));
  g.add("W2", glorot(d, d, rng));
  g.add("b2", Tensor::matrix(1, d));
  return g;
}

struct ModuleOutput {
  Var x;
  Var e;
};

inline Var affine(Binder& bind, Var x, const Tensor& w, const Tensor& b) { return add(matmul(x, bind(w)), bind(b)); }

namespace detail {

inline Var neighbour_messages(Var x, Var e, const GraphBatch& g) {
  return relu(add(gather_rows(x, g.msg_src), gather_rows(e, g.msg_edge)));
}

// Graph rows are contiguous and ordered, so concatenating per-graph results
// restores batch row order.
template <class PerGraph>
Var per_graph(const GraphBatch& g, PerGraph f) {
  std::vector<Var> parts;
  parts.reserve(g.graph_nodes.size());
  for (const auto& rows : g.graph_nodes) parts.push_back(f(rows));
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

}  // namespace detail

inline ModuleOutput module_forward(ModuleKind kind, const ParamGroup& p, Binder& bind, Var x, Var e,
                                   const GraphBatch& g, const BatchConstants& consts) {
  const std::size_t n = g.num_nodes;
  switch (kind) {
    case ModuleKind::MeanConv: {
      Var agg = scatter_add_rows(gather_rows(x, g.loop_src), g.loop_dst, n);
      agg = mul(agg, consts.inv_loop_degree);
      return {relu(affine(bind, agg, p["W"], p["b"])), e};
    }
    case ModuleKind::AttnConv: {
      Var h = matmul(x, bind(p["W"]));
      Var score = add(gather_rows(matmul(h, bind(p["a_src"])), g.loop_src),
                      gather_rows(matmul(h, bind(p["a_dst"])), g.loop_dst));
      Var alpha = segment_softmax(score, g.loop_dst, n);
      Var agg = scatter_add_rows(mul(gather_rows(h, g.loop_src), alpha), g.loop_dst, n);
      return {relu(add(agg, bind(p["b"]))), e};
    }
    case ModuleKind::SumEdgeConv: {
      Var agg = add(x, scatter_add_rows(detail::neighbour_messages(x, e, g), g.msg_dst, n));
      return {affine(bind, agg, p["W"], p["b"]), affine(bind, e, p["We"], p["be"])};
    }
    case ModuleKind::SoftmaxAggConv: {
      Var m = detail::neighbour_messages(x, e, g);
      Var w = segment_softmax(mul(m, bind(p["t"])), g.msg_dst, n);
      Var agg = add(x, scatter_add_rows(mul(w, m), g.msg_dst, n));
      return {affine(bind, agg, p["W"], p["b"]), e};
    }
    case ModuleKind::FullAttention: {
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(x.value().cols()));
      Var q = matmul(x, bind(p["Wq"]));
      Var k = matmul(x, bind(p["Wk"]));
      Var v = matmul(x, bind(p["Wv"]));
      return {detail::per_graph(g,
                                [&](const Index& rows) {
                                  Var att = row_softmax(
                                      scale(matmul(gather_rows(q, rows), transpose(gather_rows(k, rows))), inv_sqrt_d));
                                  return matmul(att, gather_rows(v, rows));
                                }),
              e};
    }
    case ModuleKind::LowRankAttention: {
      Var q = row_softmax(matmul(x, bind(p["Wq"])));  // rows sum to 1 over the r factors
      Var k = matmul(x, bind(p["Wk"]));
      Var v = matmul(x, bind(p["Wv"]));
      return {detail::per_graph(g,
                                [&](const Index& rows) {
                                  Var k_cols = row_softmax(transpose(gather_rows(k, rows)));  // r × n, normalized over nodes
                                  return matmul(gather_rows(q, rows), matmul(k_cols, gather_rows(v, rows)));
                                }),
              e};
    }
  }
  throw std::logic_error("unknown module kind");
}

inline Var fusion_mlp(Binder& bind, const ParamGroup& fusion, Var in) {
  return affine(bind, relu(affine(bind, in, fusion["W1"], fusion["b1"])), fusion["W2"], fusion["b2"]);
}

namespace detail {
inline Var mean_of(const std::vector<Var>& xs) {
  Var acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return xs.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(xs.size()));
}
}  // namespace detail

// Averages the selected message-passing outputs and the selected attention
// outputs separately, sums the two group means, and applies the layer MLP.
// With no modules selected the layer reduces to MLP(X_l).
inline ModuleOutput fuse_layer(const std::vector<ModuleOutput>& mpnn, const std::vector<Var>& gt,
                               const ParamGroup& fusion, Binder& bind, Var x, Var e) {
  for (const auto& o : mpnn) {
    if (o.x.shape() != x.shape() || o.e.shape() != e.shape())
      throw ShapeError("fuse_layer: module output " + shape_str(o.x.shape()) + "/" + shape_str(o.e.shape()) +
                       " does not match layer input " + shape_str(x.shape()) + "/" + shape_str(e.shape()));
  }
  for (const auto& o : gt)
    if (o.shape() != x.shape())
      throw ShapeError("fuse_layer: attention output " + shape_str(o.shape()) + " does not match " +
                       shape_str(x.shape()));

  Var e_next = e;
  std::optional<Var> x_m, x_t;
  if (!mpnn.empty()) {
    std::vector<Var> xs, es;
    for (const auto& o : mpnn) {
      xs.push_back(o.x);
      es.push_back(o.e);
    }
    x_m = detail::mean_of(xs);
    e_next = detail::mean_of(es);
  }
  if (!gt.empty()) x_t = detail::mean_of(gt);

  Var in = x;
  if (x_m && x_t)
    in = add(*x_m, *x_t);
  else if (x_m)
    in = *x_m;
  else if (x_t)
    in = *x_t;
  return {fusion_mlp(bind, fusion, in), e_next};
}

namespace detail {
inline Var weighted_sum(const std::vector<Var>& xs, const std::vector<Var>& w) {
  Var acc = mul(xs.front(), w.front());
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, mul(xs[i], w[i]));
  return acc;
}
}  // namespace detail

// Same as fuse_layer, but each group is combined with the given 1×1 weights
// instead of a plain mean. Edge outputs reuse the message-passing weights.
inline ModuleOutput fuse_layer_weighted(const std::vector<ModuleOutput>& mpnn, const std::vector<Var>& mpnn_w,
                                        const std::vector<Var>& gt, const std::vector<Var>& gt_w,
                                        const ParamGroup& fusion, Binder& bind, Var x, Var e) {
  if (mpnn.size() != mpnn_w.size() || gt.size() != gt_w.size())
    throw std::invalid_argument("fuse_layer_weighted: weight count does not match module count");
  Var e_next = e;
  std::optional<Var> x_m, x_t;
  if (!mpnn.empty()) {
    std::vector<Var> xs, es;
    for (const auto& o : mpnn) {
      xs.push_back(o.x);
      es.push_back(o.e);
    }
    x_m = detail::weighted_sum(xs, mpnn_w);
    e_next = detail::weighted_sum(es, mpnn_w);
  }
  if (!gt.empty()) x_t = detail::weighted_sum(gt, gt_w);
  Var in = x;
  if (x_m && x_t)
    in = add(*x_m, *x_t);
  else if (x_m)
    in = *x_m;
  else if (x_t)
    in = *x_t;
  return {fusion_mlp(bind, fusion, in), e_next};
}

}  // namespace gcnas
