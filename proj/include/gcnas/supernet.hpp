#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcnas/autodiff.hpp"
#include "gcnas/binary_io.hpp"
#include "gcnas/graph_data.hpp"
#include "gcnas/mask.hpp"
#include "gcnas/modules.hpp"
#include "gcnas/optimizer.hpp"
#include "gcnas/rng.hpp"

namespace gcnas {

struct SupernetConfig {
  std::size_t layers = 5;
  std::size_t hidden = 16;
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  std::size_t eval_batch_size = 16;
  std::size_t warmup_epochs = 2;
  double lr = 5e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;
  bool residual = false;
  bool path_sampling = false;
  std::size_t sub_finetune_epochs = 15;
  bool sub_from_scratch = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 2) throw std::invalid_argument("supernet needs at least 2 layers, got " + std::to_string(layers));
    if (hidden == 0) throw std::invalid_argument("hidden dimension must be positive");
    if (batch_size == 0 || eval_batch_size == 0) throw std::invalid_argument("batch sizes must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  }
};

// Parameter location. Encoder tensors use layer -1, head tensors layer -2;
// a layer's fusion MLP uses module -1.
struct ParamKey {
  int layer;
  int module;
  std::string name;

  std::string str() const {
    return "(" + std::to_string(layer) + "," + std::to_string(module) + "," + name + ")";
  }
  auto operator<=>(const ParamKey&) const = default;
};

inline constexpr int kEncoderLayer = -1;
inline constexpr int kHeadLayer = -2;
inline constexpr int kFusionModule = -1;

// Supernet, sub-supernet and subnet share this representation; `allowed`
// says which modules may be selected.
struct Network {
  std::size_t layers = 0;
  std::size_t hidden = 0;
  std::size_t d_in = 0;
  std::size_t num_classes = 0;
  bool residual = false;
  ParamGroup encoder;  // node_W, node_b, edge_W, edge_b
  std::vector<std::array<ParamGroup, kModulesPerLayer>> modules;
  std::vector<ParamGroup> fusion;
  ParamGroup head;  // W1, b1, W2, b2
  SubnetMask allowed;

  bool operator==(const Network&) const = default;
};

inline Network init_network(std::size_t layers, std::size_t hidden, std::size_t d_in, std::size_t num_classes,
                            std::uint64_t seed, bool residual = false) {
  Network net;
  net.layers = layers;
  net.hidden = hidden;
  net.d_in = d_in;
  net.num_classes = num_classes;
  net.residual = residual;
  Rng rng = make_rng(seed, 11);
  for (auto& t : init_affine_pair("node_", d_in, hidden, rng).tensors) net.encoder.tensors.push_back(t);
  for (auto& t : init_affine_pair("edge_", d_in, hidden, rng).tensors) net.encoder.tensors.push_back(t);
  net.modules.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) net.modules[l][j] = init_module(kModuleKinds[j], hidden, rng);
    net.fusion.push_back(init_fusion(hidden, rng));
  }
  net.head.add("W1", glorot(hidden, hidden, rng));
  net.head.add("b1", Tensor::matrix(1, hidden));
  net.head.add("W2", glorot(hidden, num_classes, rng));
  net.head.add("b2", Tensor::matrix(1, num_classes));
  net.allowed = SubnetMask::all(layers, true);
  return net;
}

inline Network init_network(const SupernetConfig& cfg, const Dataset& ds) {
  cfg.validate();
  return init_network(cfg.layers, cfg.hidden, ds.d_in, ds.num_classes, cfg.seed, cfg.residual);
}

// Visits every parameter tensor in a fixed order.
template <class Net, class F>
void for_each_param(Net& net, F&& f) {
  for (auto& t : net.encoder.tensors) f(ParamKey{kEncoderLayer, kFusionModule, t.name}, t.value);
  for (std::size_t l = 0; l < net.layers; ++l) {
    for (std::size_t j = 0; j < kModulesPerLayer; ++j)
      for (auto& t : net.modules[l][j].tensors) f(ParamKey{static_cast<int>(l), static_cast<int>(j), t.name}, t.value);
    for (auto& t : net.fusion[l].tensors) f(ParamKey{static_cast<int>(l), kFusionModule, t.name}, t.value);
  }
  for (auto& t : net.head.tensors) f(ParamKey{kHeadLayer, kFusionModule, t.name}, t.value);
}

inline std::vector<Tensor*> parameter_list(Network& net) {
  std::vector<Tensor*> out;
  for_each_param(net, [&](const ParamKey&, Tensor& t) { out.push_back(&t); });
  return out;
}

inline std::string x_tag(std::size_t layer) { return "X" + std::to_string(layer); }
inline std::string y_tag(std::size_t layer, std::size_t module) {
  return "Y" + std::to_string(layer) + "." + std::to_string(module);
}

// Optional per-layer group weighting: given the selected message-passing and
// attention module indices of a layer, returns one 1×1 weight per module.
using LayerWeighting = std::function<std::pair<std::vector<Var>, std::vector<Var>>(
    std::size_t layer, const std::vector<std::size_t>& mpnn, const std::vector<std::size_t>& gt)>;

inline void check_mask(const Network& net, const SubnetMask& mask) {
  if (mask.layers() != net.layers)
    throw ContainmentError(0, "mask has " + std::to_string(mask.layers()) + " layers, network has " +
                                  std::to_string(net.layers));
  const int bad = mask.first_violation(net.allowed);
  if (bad >= 0)
    throw ContainmentError(static_cast<std::size_t>(bad),
                           "mask " + mask.str() + " selects a module outside the allowed set at layer " +
                               std::to_string(bad + 1) + " (allowed " + net.allowed.str() + ")");
}

// Node logits for a batch. Layer inputs are tagged X1..XL and each module's
// node output Y{l}.{j} (layers 1-based, modules 0-based).
inline Var forward(const Network& net, const SubnetMask& mask, const GraphBatch& g, Binder& bind,
                   const LayerWeighting* weighting = nullptr) {
  check_mask(net, mask);
  Tape& tape = bind.tape();
  const BatchConstants consts(bind, g);
  Var x = affine(bind, bind.constant(g.node_features), net.encoder["node_W"], net.encoder["node_b"]);
  Var e = affine(bind, bind.constant(g.edge_features), net.encoder["edge_W"], net.encoder["edge_b"]);
  for (std::size_t l = 0; l < net.layers; ++l) {
    tape.tag(x_tag(l + 1), x.id);
    std::vector<ModuleOutput> mpnn;
    std::vector<Var> gt;
    std::vector<std::size_t> mpnn_idx, gt_idx;
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
      if (!mask.select[l][j]) continue;
      ModuleOutput o = module_forward(kModuleKinds[j], net.modules[l][j], bind, x, e, g, consts);
      tape.tag(y_tag(l + 1, j), o.x.id);
      if (is_mpnn(kModuleKinds[j])) {
        mpnn.push_back(o);
        mpnn_idx.push_back(j);
      } else {
        gt.push_back(o.x);
        gt_idx.push_back(j);
      }
    }
    ModuleOutput next;
    if (weighting) {
      auto [wm, wt] = (*weighting)(l, mpnn_idx, gt_idx);
      next = fuse_layer_weighted(mpnn, wm, gt, wt, net.fusion[l], bind, x, e);
    } else {
      next = fuse_layer(mpnn, gt, net.fusion[l], bind, x, e);
    }
    x = net.residual ? add(next.x, x) : next.x;
    e = next.e;
  }
  Var h = relu(affine(bind, x, net.head["W1"], net.head["b1"]));
  Var logits = affine(bind, h, net.head["W2"], net.head["b2"]);
  tape.tag("logits", logits.id);
  return logits;
}

// ---- training ----------------------------------------------------------------

struct TrainSchedule {
  std::size_t epochs = 0;
  std::size_t batch_size = 8;
  std::size_t warmup_epochs = 0;
  OptimizerConfig opt;
  std::uint64_t seed = 0;
};

inline TrainSchedule make_schedule(const SupernetConfig& cfg, std::size_t epochs, std::size_t warmup_epochs,
                                   std::uint64_t seed) {
  TrainSchedule s;
  s.epochs = epochs;
  s.batch_size = cfg.batch_size;
  s.warmup_epochs = warmup_epochs;
  s.opt.lr = cfg.lr;
  s.opt.beta1 = cfg.beta1;
  s.opt.beta2 = cfg.beta2;
  s.opt.eps = cfg.eps;
  s.opt.weight_decay = cfg.weight_decay;
  s.opt.grad_clip = cfg.grad_clip;
  s.seed = seed;
  return s;
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                           ")"),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct StepInfo {
  std::size_t step;
  std::size_t epoch;
  double loss;
  const Tape& tape;
  const GradStore& grads;
  const GraphBatch& batch;
};
using StepObserver = std::function<void(const StepInfo&)>;

// Builds the logits of one training batch on the given binder.
using LogitsFn = std::function<Var(Binder&, const GraphBatch&, Rng&)>;

struct TrainLog {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::size_t steps = 0;
};

// Mini-batch AdamW over `params`. Each step records a fresh tape; the
// observer sees it before the update, after which it is discarded.
inline TrainLog train_loop(const std::vector<Tensor*>& params, const Dataset& ds, const TrainSchedule& s,
                           const LogitsFn& logits_fn, const StepObserver& observer = {},
                           const std::function<void(std::size_t)>& on_epoch = {},
                           const std::function<bool()>& should_stop = {}) {
  TrainLog log;
  if (s.epochs == 0) return log;
  const std::size_t n_train = ds.splits.train.size();
  if (n_train == 0) throw std::invalid_argument("training split is empty");
  const std::size_t per_epoch = (n_train + s.batch_size - 1) / s.batch_size;
  OptimizerConfig opt = s.opt;
  opt.total_steps = per_epoch * s.epochs;
  opt.warmup_steps = std::min(opt.total_steps, per_epoch * s.warmup_epochs);
  AdamW adam(opt);
  Rng sample_rng = make_rng(s.seed, 3);

  std::vector<const Tensor*> grads(params.size());
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& ids : batches(ds, Split::Train, s.batch_size, mix_seed(s.seed, 1000 + epoch))) {
      const GraphBatch batch = make_batch(ds, ids);
      Tape tape;
      Binder bind(tape, true);
      Var logits = logits_fn(bind, batch, sample_rng);
      Var loss = cross_entropy(logits, batch.labels);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw TrainingDiverged(log.steps, lv);
      const GradStore gs = backward(tape, loss.id);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto id = bind.find(params[i]);
        grads[i] = id ? gs.find(*id) : nullptr;
      }
      if (observer) observer(StepInfo{log.steps, epoch, lv, tape, gs, batch});
      adam.step(params, grads);
      total += lv;
      ++count;
      ++log.steps;
      if (should_stop && should_stop()) {
        log.epoch_loss.push_back(total / static_cast<double>(count));
        return log;
      }
    }
    log.epoch_loss.push_back(total / static_cast<double>(count));
    if (on_epoch) on_epoch(epoch);
  }
  return log;
}

inline SubnetMask random_submask(const SubnetMask& allowed, Rng& rng) {
  SubnetMask m = allowed;
  for (auto& row : m.select)
    for (auto& b : row) b = b && bernoulli(rng, 0.5);
  return m;
}

// Trains a network over `mask` (or, with path sampling, over a fresh random
// sub-mask of it each step).
inline TrainLog train_network(Network& net, const SubnetMask& mask, const Dataset& ds, const TrainSchedule& s,
                              bool path_sampling = false, const StepObserver& observer = {}) {
  check_mask(net, mask);
  const Network* cnet = &net;
  return train_loop(
      parameter_list(net), ds, s,
      [&](Binder& bind, const GraphBatch& b, Rng& rng) {
        if (path_sampling) return forward(*cnet, random_submask(mask, rng), b, bind);
        return forward(*cnet, mask, b, bind);
      },
      observer);
}

// Dense training of every allowed module.
inline TrainLog train_supernet(Network& net, const Dataset& ds, const SupernetConfig& cfg,
                               const StepObserver& observer = {}) {
  return train_network(net, net.allowed, ds, make_schedule(cfg, cfg.epochs, cfg.warmup_epochs, cfg.seed),
                       cfg.path_sampling, observer);
}

// ---- evaluation ----------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

inline EvalResult evaluate(const Network& net, const SubnetMask& mask, const Dataset& ds, Split split,
                           std::size_t batch_size = 16) {
  const auto& ids = ds.splits.get(split);
  if (ids.empty()) throw std::invalid_argument(std::string("split '") + split_name(split) + "' is empty");
  std::size_t correct = 0, nodes = 0;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < ids.size(); i += batch_size) {
    std::vector<std::uint32_t> chunk(ids.begin() + static_cast<std::ptrdiff_t>(i),
                                     ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), i + batch_size)));
    const GraphBatch b = make_batch(ds, chunk);
    Tape tape;
    Binder bind(tape, false);
    Var logits = forward(net, mask, b, bind);
    loss_sum += cross_entropy(logits, b.labels).value().item() * static_cast<double>(b.num_nodes);
    const Tensor& z = logits.value();
    for (std::size_t r = 0; r < z.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < z.cols(); ++c)
        if (z.at(r, c) > z.at(r, best)) best = c;
      if (static_cast<std::int32_t>(best) == (*b.labels)[r]) ++correct;
    }
    nodes += b.num_nodes;
  }
  return {static_cast<double>(correct) / static_cast<double>(nodes), loss_sum / static_cast<double>(nodes)};
}

// ---- subnets -------------------------------------------------------------------

struct Subnet {
  Network net;  // independent copy of the source weights
  SubnetMask mask;
};

inline Subnet sample_subnet(const Network& source, const SubnetMask& mask) {
  check_mask(source, mask);
  return {source, mask};
}

// Optionally fine-tunes a private copy on the train split, then reports
// accuracy on `split`. The subnet passed in is never modified.
inline double evaluate_subnet(const Subnet& subnet, const Dataset& ds, Split split, std::size_t fine_tune_epochs,
                              const SupernetConfig& cfg) {
  if (fine_tune_epochs == 0) return evaluate(subnet.net, subnet.mask, ds, split, cfg.eval_batch_size).accuracy;
  Network copy = subnet.net;
  train_network(copy, subnet.mask, ds, make_schedule(cfg, fine_tune_epochs, 0, mix_seed(cfg.seed, 0xF17E)));
  return evaluate(copy, subnet.mask, ds, split, cfg.eval_batch_size).accuracy;
}

struct RetrainResult {
  Subnet subnet;
  double valid_accuracy = 0.0;
  double test_accuracy = 0.0;
  TrainLog log;
};

// Fresh seeded initialisation and the full training schedule.
inline RetrainResult retrain_from_scratch(const SubnetMask& mask, const Dataset& ds, const SupernetConfig& cfg,
                                          std::size_t epochs) {
  RetrainResult r;
  r.subnet.net = init_network(cfg, ds);
  r.subnet.mask = mask;
  r.log = train_network(r.subnet.net, mask, ds, make_schedule(cfg, epochs, cfg.warmup_epochs, cfg.seed));
  r.valid_accuracy = evaluate(r.subnet.net, mask, ds, Split::Valid, cfg.eval_batch_size).accuracy;
  r.test_accuracy = evaluate(r.subnet.net, mask, ds, Split::Test, cfg.eval_batch_size).accuracy;
  return r;
}

inline RetrainResult retrain_from_scratch(const SubnetMask& mask, const Dataset& ds, const SupernetConfig& cfg) {
  return retrain_from_scratch(mask, ds, cfg, cfg.epochs);
}

// ---- checkpoints -----------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[] = "GCNASCK1";

inline std::string network_manifest(const Network& net) {
  std::ostringstream os;
  os << "layers=" << net.layers << "\nhidden=" << net.hidden << "\nd_in=" << net.d_in
     << "\nnum_classes=" << net.num_classes << "\nresidual=" << (net.residual ? 1 : 0)
     << "\nallowed=" << net.allowed.str() << "\n";
  return os.str();
}

inline std::string serialize_network(const Network& net) {
  ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.str(network_manifest(net));
  std::size_t count = 0;
  for_each_param(net, [&](const ParamKey&, const Tensor&) { ++count; });
  w.u64(count);
  for_each_param(net, [&](const ParamKey& k, const Tensor& t) {
    w.i32(k.layer);
    w.i32(k.module);
    w.str(k.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto s : t.shape) w.u64(s);
    for (double v : t.data) w.f64(v);
  });
  return w.bytes();
}

inline Network deserialize_network(std::string bytes) {
  ByteReader r(std::move(bytes));
  if (r.raw(8) != std::string(kCheckpointMagic, 8)) throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  std::map<std::string, std::string> kv;
  {
    std::istringstream in(r.str());
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  auto get = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("checkpoint manifest lacks '") + key + "'");
    return it->second;
  };
  Network net = init_network(std::stoul(get("layers")), std::stoul(get("hidden")), std::stoul(get("d_in")),
                             std::stoul(get("num_classes")), 0, get("residual") == "1");
  net.allowed = SubnetMask::parse(get("allowed"));
  std::map<ParamKey, Tensor*> slots;
  for_each_param(net, [&](const ParamKey& k, Tensor& t) { slots[k] = &t; });
  const auto count = r.u64();
  if (count != slots.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(slots.size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    ParamKey k;
    k.layer = r.i32();
    k.module = r.i32();
    k.name = r.str();
    auto it = slots.find(k);
    if (it == slots.end()) throw FormatError("unexpected checkpoint tensor " + k.str());
    Shape shape(r.u32());
    for (auto& s : shape) s = r.u64();
    if (shape != it->second->shape)
      throw FormatError("tensor " + k.str() + " has shape " + shape_str(shape) + ", expected " +
                        shape_str(it->second->shape));
    for (double& v : it->second->data) v = r.f64();
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint data");
  return net;
}

inline void save_checkpoint(const Network& net, const std::string& path) {
  ByteWriter w;
  w.raw(serialize_network(net));
  w.save(path);
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_network(std::move(bytes));
}

}  // namespace gcnas
