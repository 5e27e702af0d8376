#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gcnas/few_shot.hpp"
#include "gcnas/parallel.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

struct DartsConfig {
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
};

inline std::vector<std::size_t> group_members(bool mpnn, const LayerMask& allowed) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < kModulesPerLayer; ++j)
    if (allowed[j] && is_mpnn(kModuleKinds[j]) == mpnn) out.push_back(j);
  return out;
}

// Softmax of alpha[layer] over `members`, as plain numbers.
inline std::vector<double> group_softmax(const Tensor& alpha, std::size_t layer,
                                         const std::vector<std::size_t>& members) {
  std::vector<double> w;
  if (members.empty()) return w;
  double mx = alpha.at(layer, members.front());
  for (auto j : members) mx = std::max(mx, alpha.at(layer, j));
  double z = 0.0;
  for (auto j : members) {
    w.push_back(std::exp(alpha.at(layer, j) - mx));
    z += w.back();
  }
  for (double& v : w) v /= z;
  return w;
}

namespace detail {
// Differentiable softmax of alpha[layer, members] as 1×1 weights.
inline std::vector<Var> group_weights(Var alpha, std::size_t layer, const std::vector<std::size_t>& members) {
  std::vector<Var> out;
  if (members.empty()) return out;
  std::vector<std::int32_t> idx(members.begin(), members.end());
  Var row = gather_rows(alpha, make_index({static_cast<std::int32_t>(layer)}));
  Var picked = transpose(gather_rows(transpose(row), make_index(std::move(idx))));
  Var col = transpose(row_softmax(picked));
  for (std::size_t i = 0; i < members.size(); ++i)
    out.push_back(gather_rows(col, make_index({static_cast<std::int32_t>(i)})));
  return out;
}
}  // namespace detail

// Fusion weights for forward(): each group is weighted by the softmax of
// alpha over its selected modules.
inline LayerWeighting darts_weighting(Var alpha) {
  return [alpha](std::size_t layer, const std::vector<std::size_t>& mpnn, const std::vector<std::size_t>& gt) {
    return std::make_pair(detail::group_weights(alpha, layer, mpnn), detail::group_weights(alpha, layer, gt));
  };
}

// One weighted layer: every allowed module of `layer` (0-based) on (x, e).
inline ModuleOutput darts_forward(const Network& net, Var alpha, std::size_t layer, Var x, Var e, const GraphBatch& g,
                                  Binder& bind) {
  const BatchConstants consts(bind, g);
  std::vector<ModuleOutput> mpnn;
  std::vector<Var> gt;
  const auto m_idx = group_members(true, net.allowed.select.at(layer));
  const auto t_idx = group_members(false, net.allowed.select.at(layer));
  for (auto j : m_idx) mpnn.push_back(module_forward(kModuleKinds[j], net.modules[layer][j], bind, x, e, g, consts));
  for (auto j : t_idx) gt.push_back(module_forward(kModuleKinds[j], net.modules[layer][j], bind, x, e, g, consts).x);
  return fuse_layer_weighted(mpnn, detail::group_weights(alpha, layer, m_idx), gt,
                             detail::group_weights(alpha, layer, t_idx), net.fusion[layer], bind, x, e);
}

inline Var darts_logits(const Network& net, Var alpha, const GraphBatch& g, Binder& bind) {
  const LayerWeighting w = darts_weighting(alpha);
  return forward(net, net.allowed, g, bind, &w);
}

// Per layer, the highest-weighted allowed module of each group; ties go to
// the lower index. A group with no allowed module contributes nothing.
inline SubnetMask extract_architecture(const Tensor& alpha, const SubnetMask* allowed = nullptr) {
  const std::size_t layers = alpha.rows();
  SubnetMask m = SubnetMask::all(layers, false);
  for (std::size_t l = 0; l < layers; ++l) {
    LayerMask ok;
    ok.fill(true);
    if (allowed) ok = allowed->select.at(l);
    for (bool mpnn : {true, false}) {
      const auto members = group_members(mpnn, ok);
      if (members.empty()) continue;
      std::size_t best = members.front();
      for (auto j : members)
        if (alpha.at(l, j) > alpha.at(l, best)) best = j;
      m.select[l][best] = true;
    }
  }
  return m;
}

struct DartsRun {
  Tensor alpha;
  std::vector<Tensor> alpha_trajectory;  // after each epoch
  std::vector<double> valid_loss;        // per epoch
  TrainLog log;
};

inline double darts_loss(const Network& net, const Tensor& alpha, const Dataset& ds, Split split,
                         std::size_t batch_size) {
  const auto& ids = ds.splits.get(split);
  double sum = 0.0;
  std::size_t nodes = 0;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    std::vector<std::uint32_t> chunk(ids.begin() + static_cast<std::ptrdiff_t>(i),
                                     ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + batch_size)));
    const GraphBatch b = make_batch(ds, chunk);
    Tape tape;
    Binder bind(tape, false);
    Var logits = darts_logits(net, bind(alpha), b, bind);
    sum += cross_entropy(logits, b.labels).value().item() * static_cast<double>(b.num_nodes);
    nodes += b.num_nodes;
  }
  return sum / static_cast<double>(nodes);
}

// Single-level optimisation of the network weights and alpha with one
// optimiser on training batches.
inline DartsRun joint_optimize(Network& net, Tensor& alpha, const Dataset& ds, const SupernetConfig& scfg,
                               const DartsConfig& dcfg) {
  if (alpha.rows() != net.layers || alpha.cols() != kModulesPerLayer)
    throw ShapeError("alpha must be " + std::to_string(net.layers) + " x " + std::to_string(kModulesPerLayer) +
                     ", got " + shape_str(alpha.shape));
  DartsRun run;
  std::vector<Tensor*> params = parameter_list(net);
  params.push_back(&alpha);
  const Network* cnet = &net;
  const Tensor* calpha = &alpha;
  run.log = train_loop(
      params, ds, make_schedule(scfg, dcfg.epochs, std::min(scfg.warmup_epochs, dcfg.epochs), dcfg.seed),
      [&](Binder& bind, const GraphBatch& b, Rng&) { return darts_logits(*cnet, bind(*calpha), b, bind); }, {},
      [&](std::size_t) {
        run.alpha_trajectory.push_back(alpha);
        run.valid_loss.push_back(darts_loss(net, alpha, ds, Split::Valid, scfg.eval_batch_size));
      });
  run.alpha = alpha;
  return run;
}

struct DartsMember {
  std::size_t sub_supernet = 0;
  SubnetMask mask;
  double valid_fitness = 0.0;  // inherited weights, after joint optimisation
  DartsRun run;
};

struct DartsResult {
  std::vector<DartsMember> members;
  SubnetMask best;
  double best_valid = 0.0;
  double best_test = 0.0;
};

// Runs DARTS once per sub-supernet over its allowed modules, keeps the
// extracted architecture with the best inherited-weight validation accuracy
// and retrains it from scratch.
inline DartsResult run_darts(const std::vector<SubSupernet>& subs, const Dataset& ds, const SupernetConfig& scfg,
                             const DartsConfig& dcfg, std::size_t threads = 1) {
  if (subs.empty()) throw std::invalid_argument("run_darts: no sub-supernets");
  DartsResult res;
  res.members.resize(subs.size());
  parallel_for(subs.size(), threads, [&](std::size_t i) {
    Network net = subs[i].net;
    Tensor alpha = Tensor::matrix(net.layers, kModulesPerLayer);
    DartsConfig c = dcfg;
    c.seed = mix_seed(dcfg.seed, i);
    DartsMember& m = res.members[i];
    m.sub_supernet = i;
    m.run = joint_optimize(net, alpha, ds, scfg, c);
    m.mask = extract_architecture(alpha, &net.allowed);
    m.valid_fitness = evaluate(net, m.mask, ds, Split::Valid, scfg.eval_batch_size).accuracy;
  });
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.members.size(); ++i)
    if (res.members[i].valid_fitness > res.members[best].valid_fitness) best = i;
  res.best = res.members[best].mask;
  const RetrainResult r = retrain_from_scratch(res.best, ds, scfg);
  res.best_valid = r.valid_accuracy;
  res.best_test = r.test_accuracy;
  return res;
}

}  // namespace gcnas
