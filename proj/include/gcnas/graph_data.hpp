#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcnas/autodiff.hpp"
#include "gcnas/binary_io.hpp"
#include "gcnas/rng.hpp"
#include "gcnas/tensor.hpp"

namespace gcnas {

struct GraphInstance {
  std::uint32_t num_nodes = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // undirected, u < v, stored once
  Tensor node_features;                                        // N × d_in
  Tensor edge_features;                                        // E × d_in
  std::vector<std::int32_t> node_labels;

  std::size_t num_edges() const { return edges.size(); }
  bool operator==(const GraphInstance&) const = default;
};

struct SbmParams {
  std::uint32_t num_graphs = 60;
  std::uint32_t nodes_per_graph = 48;
  std::uint32_t num_classes = 3;
  double p_intra = 0.3;
  double p_inter = 0.05;
  std::uint32_t d_in = 8;
  double label_noise = 0.3;
  double jitter = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const SbmParams&) const = default;
};

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

struct Splits {
  std::vector<std::uint32_t> train, valid, test;

  const std::vector<std::uint32_t>& get(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Valid: return valid;
      case Split::Test: return test;
    }
    return train;
  }
  bool operator==(const Splits&) const = default;
};

inline constexpr std::uint32_t kDatasetFormatVersion = 1;
inline constexpr char kDatasetMagic[] = "GCNASDS1";

struct Dataset {
  std::vector<GraphInstance> graphs;
  Splits splits;
  std::uint32_t d_in = 0;
  std::uint32_t num_classes = 0;
  std::string manifest;

  bool operator==(const Dataset&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sbm_manifest(const SbmParams& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "format_version=" << kDatasetFormatVersion << '\n'
     << "generator=sbm\n"
     << "num_graphs=" << p.num_graphs << '\n'
     << "nodes_per_graph=" << p.nodes_per_graph << '\n'
     << "num_classes=" << p.num_classes << '\n'
     << "p_intra=" << p.p_intra << '\n'
     << "p_inter=" << p.p_inter << '\n'
     << "d_in=" << p.d_in << '\n'
     << "label_noise=" << p.label_noise << '\n'
     << "jitter=" << p.jitter << '\n'
     << "seed=" << p.seed << '\n';
  return os.str();
}

inline SbmParams parse_sbm_manifest(const std::string& manifest) {
  std::map<std::string, std::string> kv;
  std::istringstream is(manifest);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DatasetError(std::string("manifest lacks key '") + k + "'");
    return it->second;
  };
  if (get("generator") != "sbm") throw DatasetError("manifest generator is not sbm");
  SbmParams p;
  p.num_graphs = static_cast<std::uint32_t>(std::stoul(get("num_graphs")));
  p.nodes_per_graph = static_cast<std::uint32_t>(std::stoul(get("nodes_per_graph")));
  p.num_classes = static_cast<std::uint32_t>(std::stoul(get("num_classes")));
  p.p_intra = std::stod(get("p_intra"));
  p.p_inter = std::stod(get("p_inter"));
  p.d_in = static_cast<std::uint32_t>(std::stoul(get("d_in")));
  p.label_noise = std::stod(get("label_noise"));
  p.jitter = std::stod(get("jitter"));
  p.seed = std::stoull(get("seed"));
  return p;
}

// Stochastic-block-model node classification task. Node labels are block
// memberships; node features are a one-hot of a possibly corrupted label plus
// gaussian jitter, so the graph is needed to undo the corruption.
inline Dataset generate_sbm(const SbmParams& p) {
  if (!(p.p_inter >= 0.0 && p.p_inter < p.p_intra && p.p_intra <= 1.0))
    throw DatasetError("generate_sbm: need 0 <= p_inter < p_intra <= 1");
  if (!(p.label_noise >= 0.0 && p.label_noise < 0.5)) throw DatasetError("generate_sbm: label_noise must be in [0, 0.5)");
  if (p.num_classes < 1) throw DatasetError("generate_sbm: num_classes must be positive");
  if (p.d_in < p.num_classes) throw DatasetError("generate_sbm: d_in must be at least num_classes");
  if (p.jitter < 0.0) throw DatasetError("generate_sbm: jitter must be nonnegative");

  Dataset ds;
  ds.d_in = p.d_in;
  ds.num_classes = p.num_classes;
  ds.manifest = sbm_manifest(p);
  Rng rng = make_rng(p.seed, 0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::uint32_t n = p.nodes_per_graph;

  for (std::uint32_t gi = 0; gi < p.num_graphs; ++gi) {
    GraphInstance g;
    g.num_nodes = n;
    g.node_labels.resize(n);
    for (std::uint32_t v = 0; v < n; ++v)
      g.node_labels[v] = static_cast<std::int32_t>((static_cast<std::uint64_t>(v) * p.num_classes) / std::max(n, 1u));
    for (std::uint32_t u = 0; u < n; ++u)
      for (std::uint32_t v = u + 1; v < n; ++v) {
        const double prob = g.node_labels[u] == g.node_labels[v] ? p.p_intra : p.p_inter;
        if (bernoulli(rng, prob)) g.edges.emplace_back(u, v);
      }
    g.node_features = Tensor::matrix(n, p.d_in);
    for (std::uint32_t v = 0; v < n; ++v) {
      std::int32_t shown = g.node_labels[v];
      if (p.num_classes > 1 && bernoulli(rng, p.label_noise)) {
        const auto shift = 1 + uniform_index(rng, p.num_classes - 1);
        shown = static_cast<std::int32_t>((static_cast<std::size_t>(shown) + shift) % p.num_classes);
      }
      for (std::uint32_t k = 0; k < p.d_in; ++k)
        g.node_features.at(v, k) = (static_cast<std::int32_t>(k) == shown ? 1.0 : 0.0) + p.jitter * noise(rng);
    }
    g.edge_features = Tensor::matrix(g.edges.size(), p.d_in, 1.0);
    ds.graphs.push_back(std::move(g));
  }

  std::vector<std::uint32_t> order(p.num_graphs);
  std::iota(order.begin(), order.end(), 0u);
  Rng split_rng = make_rng(p.seed, 1);
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_train = (static_cast<std::size_t>(p.num_graphs) * 2) / 3;
  const std::size_t n_valid = (static_cast<std::size_t>(p.num_graphs) - n_train) / 2;
  ds.splits.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.splits.valid.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                         order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  ds.splits.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), order.end());
  for (auto* s : {&ds.splits.train, &ds.splits.valid, &ds.splits.test}) std::sort(s->begin(), s->end());
  return ds;
}

inline void validate_graph(const GraphInstance& g, std::uint32_t d_in, std::uint32_t num_classes) {
  const std::size_t e = g.edges.size();
  if (g.node_features.shape != Shape{g.num_nodes, d_in}) throw DatasetError("node feature shape mismatch");
  if (g.edge_features.shape != Shape{e, d_in}) throw DatasetError("edge feature shape mismatch");
  if (g.node_labels.size() != g.num_nodes) throw DatasetError("label count mismatch");
  for (const auto& [u, v] : g.edges)
    if (u >= g.num_nodes || v >= g.num_nodes || u == v) throw DatasetError("invalid edge endpoint");
  for (auto y : g.node_labels)
    if (y < 0 || static_cast<std::uint32_t>(y) >= num_classes) throw DatasetError("label out of range");
}

inline void validate_splits(const Dataset& ds) {
  std::vector<char> seen(ds.graphs.size(), 0);
  for (const auto* s : {&ds.splits.train, &ds.splits.valid, &ds.splits.test})
    for (auto i : *s) {
      if (i >= ds.graphs.size()) throw DatasetError("split index out of range");
      if (seen[i]) throw DatasetError("splits are not disjoint at graph " + std::to_string(i));
      seen[i] = 1;
    }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw DatasetError("splits do not cover every graph");
}

// Layout: magic, u32 version, manifest string, u32 d_in, u32 classes,
// u32 graph count, graph records, then the three split index lists.
inline std::string serialize_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(std::string(kDatasetMagic, 8));
  w.u32(kDatasetFormatVersion);
  w.str(ds.manifest);
  w.u32(ds.d_in);
  w.u32(ds.num_classes);
  w.u32(static_cast<std::uint32_t>(ds.graphs.size()));
  for (const auto& g : ds.graphs) {
    w.u32(g.num_nodes);
    w.u32(static_cast<std::uint32_t>(g.edges.size()));
    for (const auto& [u, v] : g.edges) {
      w.u32(u);
      w.u32(v);
    }
    for (double x : g.node_features.data) w.f64(x);
    for (double x : g.edge_features.data) w.f64(x);
    for (auto y : g.node_labels) w.i32(y);
  }
  for (const auto* s : {&ds.splits.train, &ds.splits.valid, &ds.splits.test}) {
    w.u32(static_cast<std::uint32_t>(s->size()));
    for (auto i : *s) w.u32(i);
  }
  return w.bytes();
}

inline Dataset deserialize_dataset(std::string bytes) {
  ByteReader r(std::move(bytes));
  Dataset ds;
  try {
    if (r.raw(8) != std::string(kDatasetMagic, 8)) throw DatasetError("not a dataset file (bad magic)");
  } catch (const FormatError&) {
    throw DatasetError("not a dataset file (truncated header)");
  }
  std::uint32_t version = 0;
  std::uint32_t count = 0;
  try {
    version = r.u32();
    if (version != kDatasetFormatVersion)
      throw DatasetError("dataset format version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kDatasetFormatVersion) + ")");
    ds.manifest = r.str();
    ds.d_in = r.u32();
    ds.num_classes = r.u32();
    count = r.u32();
  } catch (const FormatError& e) {
    throw DatasetError(std::string("corrupt dataset header: ") + e.what());
  }
  ds.graphs.reserve(count);
  for (std::uint32_t gi = 0; gi < count; ++gi) {
    try {
      GraphInstance g;
      g.num_nodes = r.u32();
      const std::uint32_t e = r.u32();
      const std::uint64_t need = 8ull * e + 8ull * (g.num_nodes + static_cast<std::uint64_t>(e)) * ds.d_in + 4ull * g.num_nodes;
      if (need > r.remaining()) throw FormatError("record extends past end of file");
      g.edges.resize(e);
      for (auto& [u, v] : g.edges) {
        u = r.u32();
        v = r.u32();
      }
      g.node_features = Tensor::matrix(g.num_nodes, ds.d_in);
      for (double& x : g.node_features.data) x = r.f64();
      g.edge_features = Tensor::matrix(e, ds.d_in);
      for (double& x : g.edge_features.data) x = r.f64();
      g.node_labels.resize(g.num_nodes);
      for (auto& y : g.node_labels) y = r.i32();
      validate_graph(g, ds.d_in, ds.num_classes);
      ds.graphs.push_back(std::move(g));
    } catch (const std::exception& e) {
      throw DatasetError("corrupt graph record " + std::to_string(gi) + ": " + e.what());
    }
  }
  try {
    for (auto* s : {&ds.splits.train, &ds.splits.valid, &ds.splits.test}) {
      s->resize(r.u32());
      for (auto& i : *s) i = r.u32();
    }
  } catch (const FormatError& e) {
    throw DatasetError(std::string("corrupt split table: ") + e.what());
  }
  if (!r.at_end()) throw DatasetError("trailing bytes after split table");
  validate_splits(ds);
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w;
  w.raw(serialize_dataset(ds));
  w.save(path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_dataset(std::move(bytes));
}

// Seeded shuffle of a split into batches; every index appears exactly once.
inline std::vector<std::vector<std::uint32_t>> batches(const Dataset& ds, Split split, std::size_t batch_size,
                                                       std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::vector<std::uint32_t> order = ds.splits.get(split);
  Rng rng = make_rng(seed, 7);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return out;
}

// Disjoint union of graphs with the message lists the modules consume. Each
// undirected edge yields one message per direction. The loop_* lists add one
// self-loop per node, so a node without neighbours still aggregates itself.
struct GraphBatch {
  std::size_t num_nodes = 0;
  std::size_t num_edges = 0;
  Tensor node_features;
  Tensor edge_features;
  Index labels;
  Index msg_src, msg_dst, msg_edge;
  Index loop_src, loop_dst;
  Tensor inv_loop_degree;           // N × 1, 1 / (neighbour count + 1)
  std::vector<Index> graph_nodes;   // batch rows of each member graph
  std::vector<std::uint32_t> graph_ids;
  std::vector<std::size_t> node_offsets;
};

inline GraphBatch make_batch(const std::vector<const GraphInstance*>& graphs,
                             std::vector<std::uint32_t> ids = {}) {
  GraphBatch b;
  std::size_t d_in = 0;
  for (const auto* g : graphs) {
    b.node_offsets.push_back(b.num_nodes);
    b.num_nodes += g->num_nodes;
    b.num_edges += g->edges.size();
    d_in = g->node_features.cols();
  }
  b.node_features = Tensor::matrix(b.num_nodes, d_in);
  b.edge_features = Tensor::matrix(b.num_edges, d_in);
  std::vector<std::int32_t> labels, src, dst, eidx;
  std::vector<std::size_t> deg(b.num_nodes, 0);
  std::size_t eoff = 0;
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    const auto& g = *graphs[k];
    const auto noff = b.node_offsets[k];
    std::copy(g.node_features.data.begin(), g.node_features.data.end(),
              b.node_features.data.begin() + static_cast<std::ptrdiff_t>(noff * d_in));
    std::copy(g.edge_features.data.begin(), g.edge_features.data.end(),
              b.edge_features.data.begin() + static_cast<std::ptrdiff_t>(eoff * d_in));
    labels.insert(labels.end(), g.node_labels.begin(), g.node_labels.end());
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      const auto u = static_cast<std::int32_t>(noff + g.edges[e].first);
      const auto v = static_cast<std::int32_t>(noff + g.edges[e].second);
      const auto ei = static_cast<std::int32_t>(eoff + e);
      src.insert(src.end(), {u, v});
      dst.insert(dst.end(), {v, u});
      eidx.insert(eidx.end(), {ei, ei});
      ++deg[static_cast<std::size_t>(u)];
      ++deg[static_cast<std::size_t>(v)];
    }
    std::vector<std::int32_t> rows(g.num_nodes);
    std::iota(rows.begin(), rows.end(), static_cast<std::int32_t>(noff));
    b.graph_nodes.push_back(make_index(std::move(rows)));
    eoff += g.edges.size();
  }
  std::vector<std::int32_t> lsrc = src, ldst = dst;
  b.inv_loop_degree = Tensor::matrix(b.num_nodes, 1);
  for (std::size_t v = 0; v < b.num_nodes; ++v) {
    lsrc.push_back(static_cast<std::int32_t>(v));
    ldst.push_back(static_cast<std::int32_t>(v));
    b.inv_loop_degree.data[v] = 1.0 / static_cast<double>(deg[v] + 1);
  }
  b.labels = make_index(std::move(labels));
  b.msg_src = make_index(std::move(src));
  b.msg_dst = make_index(std::move(dst));
  b.msg_edge = make_index(std::move(eidx));
  b.loop_src = make_index(std::move(lsrc));
  b.loop_dst = make_index(std::move(ldst));
  b.graph_ids = std::move(ids);
  return b;
}

inline GraphBatch make_batch(const Dataset& ds, const std::vector<std::uint32_t>& ids) {
  std::vector<const GraphInstance*> gs;
  for (auto i : ids) gs.push_back(&ds.graphs.at(i));
  return make_batch(gs, ids);
}

}  // namespace gcnas
