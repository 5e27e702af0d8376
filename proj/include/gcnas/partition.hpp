#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gcnas/autodiff.hpp"
#include "gcnas/rng.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

// ---- gradient contributions ----------------------------------------------------

// Per-module gradient contributions at each layer input X_l, l = 2..L,
// flattened over (training node, feature) and averaged over collected steps.
struct ContributionSet {
  std::size_t num_layers = 0;  // L
  std::size_t width = 0;       // flattened vector length
  // vectors[l - 2][j]
  std::vector<std::array<std::vector<double>, kModulesPerLayer>> vectors;
  std::vector<LayerMask> dead;  // filled by finalize()
  std::size_t batch_count = 0;
  std::vector<double> completeness_error;  // worst relative error per step

  std::size_t first_layer() const { return 2; }
  const std::array<std::vector<double>, kModulesPerLayer>& at_layer(std::size_t l) const { return vectors.at(l - 2); }
};

class ContributionCollector {
 public:
  // Collects on training steps [start_step, start_step + steps).
  ContributionCollector(const Dataset& ds, std::size_t num_layers, std::size_t hidden, std::size_t start_step,
                        std::size_t steps)
      : start_(start_step), steps_(steps), hidden_(hidden) {
    if (num_layers < 2) throw std::invalid_argument("contribution collection needs at least 2 layers");
    std::size_t offset = 0;
    row_of_.assign(ds.graphs.size(), 0);
    for (auto id : ds.splits.train) {
      row_of_[id] = offset;
      offset += ds.graphs[id].num_nodes;
    }
    set_.num_layers = num_layers;
    set_.width = offset * hidden;
    set_.vectors.resize(num_layers - 1);
    for (auto& layer : set_.vectors)
      for (auto& v : layer) v.assign(set_.width, 0.0);
  }

  bool active(std::size_t step) const { return step >= start_ && step < start_ + steps_; }
  bool done() const { return set_.batch_count >= steps_; }

  void observe(const StepInfo& info) {
    if (!active(info.step)) return;
    double worst = 0.0;
    for (std::size_t l = 2; l <= set_.num_layers; ++l) {
      const auto boundary = info.tape.find_tag(x_tag(l));
      if (!boundary) throw std::logic_error("tape lacks boundary tag " + x_tag(l));
      Tensor total(info.tape.value(*boundary).shape);
      for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
        const auto source = info.tape.find_tag(y_tag(l, j));
        if (!source) continue;  // module not selected this step
        const Tensor* up = info.grads.find(*source);
        if (!up) continue;
        const VjpContribution c = vjp_contribution(info.tape, *source, *boundary, *up);
        for (std::size_t i = 0; i < total.numel(); ++i) total.data[i] += c.grad.data[i];
        scatter(info.batch, c.grad, set_.vectors[l - 2][j]);
      }
      const Tensor* g = info.grads.find(*boundary);
      const Tensor ref = g ? *g : Tensor(total.shape);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < total.numel(); ++i) {
        num = std::max(num, std::abs(total.data[i] - ref.data[i]));
        den = std::max(den, std::abs(ref.data[i]));
      }
      worst = std::max(worst, den > 0.0 ? num / den : num);
    }
    set_.completeness_error.push_back(worst);
    ++set_.batch_count;
  }

  // Running sums become means; modules without any gradient are marked dead.
  ContributionSet finalize() const {
    ContributionSet out = set_;
    out.dead.assign(out.vectors.size(), LayerMask{});
    for (std::size_t li = 0; li < out.vectors.size(); ++li)
      for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
        auto& v = out.vectors[li][j];
        if (out.batch_count > 0)
          for (double& x : v) x /= static_cast<double>(out.batch_count);
        out.dead[li][j] = l2_norm(v) == 0.0;
      }
    return out;
  }

 private:
  void scatter(const GraphBatch& b, const Tensor& grad, std::vector<double>& dst) const {
    for (std::size_t k = 0; k < b.graph_ids.size(); ++k) {
      const std::size_t n = b.graph_nodes[k]->size();
      const std::size_t src = b.node_offsets[k] * hidden_;
      const std::size_t to = row_of_[b.graph_ids[k]] * hidden_;
      for (std::size_t i = 0; i < n * hidden_; ++i) dst[to + i] += grad.data[src + i];
    }
  }

  std::size_t start_, steps_, hidden_;
  std::vector<std::size_t> row_of_;
  ContributionSet set_;
};

inline std::size_t steps_per_epoch(const Dataset& ds, std::size_t batch_size) {
  return (ds.splits.train.size() + batch_size - 1) / batch_size;
}

// Trains the supernet densely with the full schedule and collects
// contributions over `batches` steps starting after `warmup_epochs`.
inline ContributionSet train_and_collect(Network& net, const Dataset& ds, const SupernetConfig& cfg,
                                         std::size_t warmup_epochs, std::size_t batches, TrainLog* log = nullptr) {
  const std::size_t start = warmup_epochs * steps_per_epoch(ds, cfg.batch_size);
  ContributionCollector col(ds, net.layers, net.hidden, start, batches);
  TrainLog l = train_supernet(net, ds, cfg, [&](const StepInfo& s) { col.observe(s); });
  if (!col.done())
    throw std::invalid_argument("collection window (start step " + std::to_string(start) + ", " +
                                std::to_string(batches) + " steps) exceeds the " + std::to_string(l.steps) +
                                " training steps");
  if (log) *log = l;
  return col.finalize();
}

// Collects from a copy of `net`, training only as long as the window needs.
inline ContributionSet collect_contributions(const Network& net, const Dataset& ds, const SupernetConfig& cfg,
                                             std::size_t warmup_epochs, std::size_t batches) {
  const std::size_t per_epoch = steps_per_epoch(ds, cfg.batch_size);
  const std::size_t start = warmup_epochs * per_epoch;
  Network copy = net;
  ContributionCollector col(ds, net.layers, net.hidden, start, batches);
  SupernetConfig c = cfg;
  c.epochs = std::max<std::size_t>(cfg.epochs, (start + batches + per_epoch - 1) / per_epoch);
  TrainSchedule s = make_schedule(c, c.epochs, c.warmup_epochs, c.seed);
  check_mask(copy, copy.allowed);
  const Network* cnet = &copy;
  train_loop(
      parameter_list(copy), ds, s,
      [&](Binder& bind, const GraphBatch& b, Rng&) { return forward(*cnet, cnet->allowed, b, bind); },
      [&](const StepInfo& info) { col.observe(info); }, {}, [&] { return col.done(); });
  return col.finalize();
}

// ---- similarity ----------------------------------------------------------------

struct SimilarityMatrix {
  std::size_t layer = 0;  // 1-based layer index
  std::size_t n = 0;
  std::vector<double> s;  // n × n, row-major

  double operator()(std::size_t i, std::size_t j) const { return s[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return s[i * n + j]; }

  static SimilarityMatrix from_rows(const std::vector<std::vector<double>>& rows, std::size_t layer = 0) {
    SimilarityMatrix m;
    m.layer = layer;
    m.n = rows.size();
    for (const auto& r : rows) {
      if (r.size() != m.n) throw std::invalid_argument("similarity matrix must be square");
      m.s.insert(m.s.end(), r.begin(), r.end());
    }
    return m;
  }
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Cosine similarity of contribution vectors. A zero vector is similar to
// nothing but itself.
inline SimilarityMatrix similarity_matrix(const std::vector<std::vector<double>>& vecs, std::size_t layer = 0) {
  SimilarityMatrix m;
  m.layer = layer;
  m.n = vecs.size();
  m.s.assign(m.n * m.n, 0.0);
  for (std::size_t i = 0; i < m.n; ++i) {
    m(i, i) = 1.0;
    for (std::size_t j = i + 1; j < m.n; ++j) m(i, j) = m(j, i) = cosine(vecs[i], vecs[j]);
  }
  return m;
}

inline std::vector<SimilarityMatrix> similarity(const ContributionSet& cs) {
  std::vector<SimilarityMatrix> out;
  for (std::size_t li = 0; li < cs.vectors.size(); ++li)
    out.push_back(similarity_matrix({cs.vectors[li].begin(), cs.vectors[li].end()}, li + 2));
  return out;
}

// ---- minimum cut ---------------------------------------------------------------

enum class CutSolver { BruteForce, StoerWagnerShifted };

inline const char* solver_name(CutSolver s) {
  return s == CutSolver::BruteForce ? "brute_force" : "stoer_wagner_shifted";
}

inline CutSolver parse_solver(const std::string& s) {
  if (s == "brute_force") return CutSolver::BruteForce;
  if (s == "stoer_wagner_shifted") return CutSolver::StoerWagnerShifted;
  throw std::invalid_argument("unknown min-cut solver '" + s + "'");
}

struct Cut {
  std::vector<std::size_t> gamma;  // sorted, always contains module 0
  double weight = 0.0;             // Σ_{i∈Γ, j∉Γ} S_ij on the unshifted matrix
  bool approximate = false;
};

inline double cut_weight(const SimilarityMatrix& m, const std::vector<std::size_t>& gamma) {
  std::vector<char> in(m.n, 0);
  for (auto i : gamma) in.at(i) = 1;
  double w = 0.0;
  for (std::size_t i = 0; i < m.n; ++i)
    if (in[i])
      for (std::size_t j = 0; j < m.n; ++j)
        if (!in[j]) w += m(i, j);
  return w;
}

inline std::vector<std::size_t> complement(const std::vector<std::size_t>& gamma, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(gamma.begin(), gamma.end(), i) == gamma.end()) out.push_back(i);
  return out;
}

inline constexpr double kCutTieTolerance = 1e-12;

// All 2^(n-1) - 1 bipartitions with module 0 on the Γ side.
inline Cut min_cut_brute_force(const SimilarityMatrix& m) {
  if (m.n < 2) throw std::invalid_argument("min_cut needs at least 2 modules, got " + std::to_string(m.n));
  if (m.n > 16) throw std::invalid_argument("brute-force min_cut supports at most 16 modules");
  const std::size_t others = m.n - 1;
  const std::uint32_t full = (1u << others) - 1;
  std::vector<std::pair<double, std::vector<std::size_t>>> all;
  for (std::uint32_t bits = 0; bits < full; ++bits) {
    std::vector<std::size_t> gamma{0};
    for (std::size_t k = 0; k < others; ++k)
      if (bits & (1u << k)) gamma.push_back(k + 1);
    all.emplace_back(cut_weight(m, gamma), std::move(gamma));
  }
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : all) best = std::min(best, c.first);
  const std::vector<std::size_t>* pick = nullptr;
  for (const auto& c : all)
    if (c.first <= best + kCutTieTolerance && (!pick || c.second < *pick)) pick = &c.second;
  return {*pick, cut_weight(m, *pick), false};
}

struct RawCut {
  std::vector<std::size_t> side;
  double weight = 0.0;
};

// Stoer-Wagner global minimum cut on a symmetric nonnegative weight matrix.
inline RawCut stoer_wagner(const std::vector<std::vector<double>>& w_in) {
  const std::size_t n = w_in.size();
  if (n < 2) throw std::invalid_argument("stoer_wagner needs at least 2 vertices");
  std::vector<std::vector<double>> w = w_in;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (w[i][j] < 0.0) throw std::invalid_argument("stoer_wagner requires nonnegative weights");
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t i = 0; i < n; ++i) members[i] = {i};
  std::vector<std::size_t> alive(n);
  std::iota(alive.begin(), alive.end(), 0);
  RawCut best{{}, std::numeric_limits<double>::infinity()};
  while (alive.size() > 1) {
    std::vector<double> conn(n, 0.0);
    std::vector<char> added(n, 0);
    std::size_t prev = alive.front(), last = alive.front();
    for (std::size_t step = 0; step < alive.size(); ++step) {
      std::size_t pick = n;
      for (auto v : alive)
        if (!added[v] && (pick == n || conn[v] > conn[pick])) pick = v;
      added[pick] = 1;
      prev = last;
      last = pick;
      if (step + 1 == alive.size()) {
        if (conn[pick] < best.weight) best = {members[pick], conn[pick]};
      } else {
        for (auto v : alive)
          if (!added[v]) conn[v] += w[pick][v];
      }
    }
    members[prev].insert(members[prev].end(), members[last].begin(), members[last].end());
    for (auto v : alive) {
      w[prev][v] += w[last][v];
      w[v][prev] = w[prev][v];
    }
    alive.erase(std::find(alive.begin(), alive.end(), last));
  }
  std::sort(best.side.begin(), best.side.end());
  return best;
}

// Stoer-Wagner on S + 1, reported with the unshifted cut weight.
inline Cut min_cut_stoer_wagner_shifted(const SimilarityMatrix& m) {
  if (m.n < 2) throw std::invalid_argument("min_cut needs at least 2 modules, got " + std::to_string(m.n));
  std::vector<std::vector<double>> w(m.n, std::vector<double>(m.n, 0.0));
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j)
      if (i != j) w[i][j] = m(i, j) + 1.0;
  RawCut raw = stoer_wagner(w);
  std::vector<std::size_t> gamma = raw.side;
  if (std::find(gamma.begin(), gamma.end(), 0) == gamma.end()) gamma = complement(gamma, m.n);
  return {gamma, cut_weight(m, gamma), true};
}

inline Cut min_cut(const SimilarityMatrix& m, CutSolver solver = CutSolver::BruteForce) {
  return solver == CutSolver::BruteForce ? min_cut_brute_force(m) : min_cut_stoer_wagner_shifted(m);
}

// ---- scheme --------------------------------------------------------------------

struct LayerCut {
  std::size_t layer = 0;  // 1-based
  Cut cut;
};

struct PartitionScheme {
  std::vector<LayerCut> cuts;           // candidate layers 2..L
  std::vector<std::size_t> chosen_layers;  // ascending, 1-based
  std::size_t k = 0;
  std::size_t num_layers = 0;
  std::string method = "GC";
  CutSolver solver = CutSolver::BruteForce;

  const LayerCut& cut_for(std::size_t layer) const {
    for (const auto& c : cuts)
      if (c.layer == layer) return c;
    throw std::out_of_range("no cut for layer " + std::to_string(layer));
  }
};

// The k layers with the smallest cut weight, ties to the lower layer.
inline std::vector<std::size_t> choose_layers(const std::vector<std::pair<std::size_t, double>>& gammas,
                                              std::size_t k) {
  if (k > gammas.size())
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the " + std::to_string(gammas.size()) +
                                " partitionable layers");
  auto order = gammas;
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(order[i].first);
  std::sort(out.begin(), out.end());
  return out;
}

// `sims` holds one matrix per layer 2..L (layer 1 is never partitioned).
inline PartitionScheme build_scheme(const std::vector<SimilarityMatrix>& sims, std::size_t k,
                                    CutSolver solver = CutSolver::BruteForce) {
  PartitionScheme p;
  p.k = k;
  p.solver = solver;
  p.num_layers = sims.size() + 1;
  if (k > sims.size())
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds L - 1 = " + std::to_string(sims.size()));
  std::vector<std::pair<std::size_t, double>> gammas;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    const std::size_t layer = sims[i].layer ? sims[i].layer : i + 2;
    if (layer < 2) throw std::invalid_argument("layer 1 cannot be partitioned");
    p.cuts.push_back({layer, min_cut(sims[i], solver)});
    gammas.emplace_back(layer, p.cuts.back().cut.weight);
  }
  p.chosen_layers = choose_layers(gammas, k);
  return p;
}

// A scheme with caller-supplied Γ per chosen layer (FS and RANDOM baselines).
inline PartitionScheme fixed_scheme(std::size_t num_layers, const std::vector<std::size_t>& chosen,
                                    const std::vector<std::vector<std::size_t>>& gammas, const std::string& method,
                                    const std::vector<SimilarityMatrix>* sims = nullptr) {
  PartitionScheme p;
  p.method = method;
  p.num_layers = num_layers;
  p.k = chosen.size();
  p.chosen_layers = chosen;
  std::sort(p.chosen_layers.begin(), p.chosen_layers.end());
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    Cut c;
    c.gamma = gammas.at(i);
    std::sort(c.gamma.begin(), c.gamma.end());
    if (c.gamma.empty() || c.gamma.front() != 0) c.gamma = complement(c.gamma, kModulesPerLayer);
    if (sims)
      for (const auto& m : *sims)
        if (m.layer == chosen[i]) c.weight = cut_weight(m, c.gamma);
    p.cuts.push_back({chosen[i], c});
  }
  std::sort(p.cuts.begin(), p.cuts.end(), [](const LayerCut& a, const LayerCut& b) { return a.layer < b.layer; });
  return p;
}

// Fixed index split {first ⌈n/2⌉ | rest} on the given layers.
inline PartitionScheme fs_scheme(std::size_t num_layers, const std::vector<std::size_t>& chosen) {
  std::vector<std::size_t> half((kModulesPerLayer + 1) / 2);
  std::iota(half.begin(), half.end(), 0);
  return fixed_scheme(num_layers, chosen, std::vector<std::vector<std::size_t>>(chosen.size(), half), "FS");
}

// Uniformly random balanced bipartition on each given layer.
inline PartitionScheme random_scheme(std::size_t num_layers, const std::vector<std::size_t>& chosen,
                                     std::uint64_t seed) {
  Rng rng = make_rng(seed, 21);
  std::vector<std::vector<std::size_t>> gammas;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    std::vector<std::size_t> perm(kModulesPerLayer);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    gammas.emplace_back(perm.begin(), perm.begin() + kModulesPerLayer / 2);
  }
  return fixed_scheme(num_layers, chosen, gammas, "RANDOM");
}

inline PartitionScheme empty_scheme(std::size_t num_layers) {
  PartitionScheme p;
  p.method = "NONE";
  p.num_layers = num_layers;
  return p;
}

// ---- proposition check ---------------------------------------------------------

struct PropositionReport {
  double s_total = 0.0;
  double s_gamma = 0.0;
  double s_complement = 0.0;
  double s_cross = 0.0;
  double avg_total = 0.0;
  double avg_gamma = 0.0;
  double avg_complement = 0.0;
  bool holds = false;
};

// Block sums over ordered pairs, diagonal included, so that
// S_total = S_Γ + S_complement + 2·S_cross.
inline PropositionReport verify_proposition(const SimilarityMatrix& m, const std::vector<std::size_t>& gamma) {
  std::vector<char> in(m.n, 0);
  for (auto i : gamma) in.at(i) = 1;
  PropositionReport r;
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.n; ++j) {
      const double v = m(i, j);
      r.s_total += v;
      if (in[i] && in[j])
        r.s_gamma += v;
      else if (!in[i] && !in[j])
        r.s_complement += v;
      else if (in[i])
        r.s_cross += v;
    }
  const double a = static_cast<double>(gamma.size());
  const double b = static_cast<double>(m.n) - a;
  const double n = static_cast<double>(m.n);
  r.avg_total = r.s_total / (n * n);
  r.avg_gamma = a > 0 ? r.s_gamma / (a * a) : 0.0;
  r.avg_complement = b > 0 ? r.s_complement / (b * b) : 0.0;
  const double slack = 1e-12 * std::max(1.0, std::abs(r.avg_total));
  r.holds = (a > 0 && r.avg_gamma >= r.avg_total - slack) || (b > 0 && r.avg_complement >= r.avg_total - slack);
  return r;
}

// ---- report ---------------------------------------------------------------------

inline std::string format_subset(const std::vector<std::size_t>& s) {
  std::string out = "{";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "}";
}

inline std::string partition_report(const PartitionScheme& p, const std::vector<SimilarityMatrix>& sims) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "method = " << p.method << "\nsolver = " << solver_name(p.solver) << "\nk = " << p.k
     << "\nchosen_layers = " << format_subset(p.chosen_layers) << "\n";
  for (const auto& m : sims) {
    os << "\n[layer " << m.layer << "]\nS =\n";
    for (std::size_t i = 0; i < m.n; ++i) {
      os << " ";
      for (std::size_t j = 0; j < m.n; ++j) os << " " << m(i, j);
      os << "\n";
    }
    for (const auto& c : p.cuts)
      if (c.layer == m.layer) {
        const auto pr = verify_proposition(m, c.cut.gamma);
        os << "gamma_set = " << format_subset(c.cut.gamma) << "\ncut_weight = " << c.cut.weight
           << "\napproximate = " << (c.cut.approximate ? "true" : "false") << "\nproposition_holds = "
           << (pr.holds ? "true" : "false") << "\nproposition_avg_total = " << pr.avg_total
           << "\nproposition_avg_gamma = " << pr.avg_gamma << "\nproposition_avg_complement = " << pr.avg_complement
           << "\n";
      }
  }
  return os.str();
}

}  // namespace gcnas
