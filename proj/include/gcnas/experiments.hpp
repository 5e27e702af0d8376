#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "gcnas/experiment_config.hpp"
#include "gcnas/few_shot.hpp"
#include "gcnas/partition.hpp"
#include "gcnas/rank_stats.hpp"
#include "gcnas/search_darts.hpp"
#include "gcnas/search_ga.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

using json = nlohmann::json;

// Wall-clock seconds per named stage. Kept apart from metrics, which must
// be reproducible.
class Timings {
 public:
  template <class F>
  auto time(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Record {
      Timings* self;
      std::string stage;
      std::chrono::steady_clock::time_point t0;
      ~Record() {
        self->add(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    } rec{this, stage, t0};
    return f();
  }
  void add(const std::string& stage, double seconds) { seconds_[stage] += seconds; }
  double total() const {
    double t = 0.0;
    for (const auto& [k, v] : seconds_) t += v;
    return t;
  }
  json to_json() const { return json(seconds_); }

 private:
  std::map<std::string, double> seconds_;
};

inline json mask_json(const SubnetMask& m) { return m.str(); }

inline json similarity_json(const SimilarityMatrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.n; ++i) {
    json r = json::array();
    for (std::size_t j = 0; j < m.n; ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return {{"layer", m.layer}, {"S", rows}};
}

inline json scheme_json(const PartitionScheme& p) {
  json cuts = json::array();
  for (const auto& c : p.cuts)
    cuts.push_back({{"layer", c.layer},
                    {"gamma_set", c.cut.gamma},
                    {"cut_weight", c.cut.weight},
                    {"approximate", c.cut.approximate}});
  return {{"method", p.method},       {"solver", solver_name(p.solver)}, {"k", p.k},
          {"chosen_layers", p.chosen_layers}, {"cuts", cuts}};
}

// ---- supernet with contribution collection -------------------------------------

struct SupernetRun {
  Network net;
  TrainLog log;
  std::vector<SimilarityMatrix> sims;  // layers 2..L
  std::vector<LayerMask> dead;
  double max_completeness_error = 0.0;
  std::size_t collected_steps = 0;
};

inline SupernetRun train_supernet_gc(const ExperimentConfig& c, const Dataset& ds) {
  SupernetRun r;
  r.net = init_network(c.supernet, ds);
  const ContributionSet cs = train_and_collect(r.net, ds, c.supernet, c.partition.warmup_epochs, c.partition.batches,
                                               &r.log);
  r.sims = similarity(cs);
  r.dead = cs.dead;
  r.collected_steps = cs.batch_count;
  for (double e : cs.completeness_error) r.max_completeness_error = std::max(r.max_completeness_error, e);
  return r;
}

// FS and RANDOM reuse the layers GC would choose.
inline PartitionScheme scheme_for(PartitionMethod method, const std::vector<SimilarityMatrix>& sims,
                                  const ExperimentConfig& c, std::optional<CutSolver> solver = std::nullopt) {
  const std::size_t L = sims.size() + 1;
  const CutSolver s = solver.value_or(c.partition.solver);
  switch (method) {
    case PartitionMethod::GC: return build_scheme(sims, c.partition.k, s);
    case PartitionMethod::FS: {
      PartitionScheme p = fs_scheme(L, build_scheme(sims, c.partition.k, s).chosen_layers);
      for (auto& lc : p.cuts) lc.cut.weight = cut_weight(sims.at(lc.layer - 2), lc.cut.gamma);
      return p;
    }
    case PartitionMethod::Random: {
      PartitionScheme p = random_scheme(L, build_scheme(sims, c.partition.k, s).chosen_layers, mix_seed(c.seed, 0x7A));
      for (auto& lc : p.cuts) lc.cut.weight = cut_weight(sims.at(lc.layer - 2), lc.cut.gamma);
      return p;
    }
    case PartitionMethod::None: return empty_scheme(L);
  }
  throw std::logic_error("unhandled partition method");
}

inline std::vector<SubSupernet> derive_for(const Network& net, const PartitionScheme& scheme, const Dataset& ds,
                                           const ExperimentConfig& c, std::size_t threads) {
  return derive_sub_supernets(net, scheme, ds, c.supernet, c.supernet.sub_finetune_epochs,
                              c.supernet.sub_from_scratch, threads);
}

struct PartitionPipeline {
  SupernetRun supernet;
  PartitionScheme scheme;
  std::vector<PropositionReport> propositions;  // per cut layer
  std::vector<SubSupernet> subs;
};

inline PartitionPipeline run_partition_pipeline(const ExperimentConfig& c, const Dataset& ds, std::size_t threads,
                                                Timings* t = nullptr) {
  Timings local;
  Timings& tm = t ? *t : local;
  PartitionPipeline p;
  p.supernet = tm.time("supernet", [&] { return train_supernet_gc(c, ds); });
  p.scheme = tm.time("partition", [&] { return scheme_for(c.partition.method, p.supernet.sims, c); });
  for (const auto& lc : p.scheme.cuts)
    p.propositions.push_back(verify_proposition(p.supernet.sims.at(lc.layer - 2), lc.cut.gamma));
  p.subs = tm.time("sub_supernets", [&] { return derive_for(p.supernet.net, p.scheme, ds, c, threads); });
  return p;
}

inline json partition_metrics(const PartitionPipeline& p) {
  json props = json::array();
  bool all_hold = true;
  for (std::size_t i = 0; i < p.propositions.size(); ++i) {
    props.push_back({{"layer", p.scheme.cuts[i].layer}, {"holds", p.propositions[i].holds}});
    all_hold = all_hold && p.propositions[i].holds;
  }
  json sims = json::array();
  for (const auto& m : p.supernet.sims) sims.push_back(similarity_json(m));
  json subs = json::array();
  for (const auto& s : p.subs) subs.push_back({{"label", s.label()}, {"allowed", s.net.allowed.str()}});
  return {{"scheme", scheme_json(p.scheme)},
          {"similarity", sims},
          {"proposition", props},
          {"proposition_all_hold", all_hold},
          {"max_completeness_error", p.supernet.max_completeness_error},
          {"collected_steps", p.supernet.collected_steps},
          {"supernet_final_loss", p.supernet.log.epoch_loss.empty() ? 0.0 : p.supernet.log.epoch_loss.back()},
          {"sub_supernets", subs}};
}

// ---- search ------------------------------------------------------------------------

struct SearchOutcome {
  std::string algorithm;
  SubnetMask best;
  double best_valid = 0.0;
  double best_test = 0.0;
  json history;
};

inline SearchOutcome run_search(const ExperimentConfig& c, const std::vector<SubSupernet>& subs, const Dataset& ds,
                                std::size_t threads, const GAObserver& observer = {}) {
  SearchOutcome o;
  o.algorithm = c.search.algorithm;
  if (c.search.algorithm == "ga") {
    const GAResult r = run_ga(subs, ds, c.search.ga, c.supernet, threads, observer);
    o.best = r.best.mask;
    o.best_valid = r.best_valid;
    o.best_test = r.best_test;
    json hist = json::array();
    for (const auto& h : r.history)
      hist.push_back({{"iteration", h.iteration},
                      {"best_fitness", h.best_fitness},
                      {"mean_fitness", h.mean_fitness},
                      {"best_mask", h.best_mask.str()},
                      {"pool_size", h.pool_size},
                      {"population_size", h.population_size}});
    json elites = json::array();
    for (const auto& e : r.elites) elites.push_back({{"mask", e.mask.str()}, {"fitness", *e.fitness}, {"home", e.home}});
    o.history = {{"iterations", hist}, {"elites", elites}, {"evaluations", r.evaluations}};
  } else {
    const DartsResult r = run_darts(subs, ds, c.supernet, c.search.darts, threads);
    o.best = r.best;
    o.best_valid = r.best_valid;
    o.best_test = r.best_test;
    json members = json::array();
    for (const auto& m : r.members) {
      json traj = json::array();
      for (const auto& a : m.run.alpha_trajectory) traj.push_back(a.data);
      members.push_back({{"sub_supernet", m.sub_supernet},
                         {"mask", m.mask.str()},
                         {"valid_fitness", m.valid_fitness},
                         {"valid_loss", m.run.valid_loss},
                         {"alpha", m.run.alpha.data},
                         {"alpha_trajectory", traj}});
    }
    o.history = {{"members", members}};
  }
  return o;
}

inline json search_metrics(const SearchOutcome& o) {
  return {{"algorithm", o.algorithm},
          {"best_mask", o.best.str()},
          {"best_valid_accuracy", o.best_valid},
          {"best_test_accuracy", o.best_test},
          {"history", o.history}};
}

// ---- rank correlation ---------------------------------------------------------------

// Uniform masks, each shrunk until it fits one sub-supernet of every scheme;
// duplicates are redrawn.
inline std::vector<SubnetMask> sample_rank_masks(std::size_t count, std::size_t layers,
                                                 const std::vector<std::vector<SubnetMask>>& allowed_per_scheme,
                                                 Rng& rng) {
  std::vector<SubnetMask> out;
  std::set<SubnetMask> seen;
  const std::size_t max_draws = 1000 * count;
  for (std::size_t draw = 0; out.size() < count; ++draw) {
    if (draw == max_draws)
      throw std::runtime_error("could not draw " + std::to_string(count) + " distinct subnets");
    SubnetMask m = random_mask(layers, rng);
    for (bool changed = true; changed;) {
      changed = false;
      for (const auto& allowed : allowed_per_scheme) {
        SubnetMask r = repair(m, allowed).first;
        changed = changed || r != m;
        m = std::move(r);
      }
    }
    if (seen.insert(m).second) out.push_back(m);
  }
  return out;
}

struct RankSeedRecord {
  std::uint64_t seed = 0;
  std::vector<SubnetMask> masks;
  std::vector<double> ground_truth;                    // scratch-trained validation accuracy
  std::map<PartitionMethod, std::vector<double>> proxy;  // inherited + fine-tuned validation accuracy
  std::map<PartitionMethod, double> tau, rho;
  std::map<PartitionMethod, PartitionScheme> schemes;
};

struct RankCorrelationResult {
  std::vector<RankSeedRecord> seeds;
  std::map<PartitionMethod, MeanStd> tau, rho;
};

// NaN when either list has no spread.
inline double safe_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  try {
    return spearman_rho(x, y);
  } catch (const std::invalid_argument&) {
    return std::nan("");
  }
}

inline RankSeedRecord rank_correlation_seed(const ExperimentConfig& base, const Dataset& ds, std::uint64_t seed,
                                            std::size_t threads, Timings& tm) {
  const ExperimentConfig c = base.with_seed(seed);
  RankSeedRecord rec;
  rec.seed = seed;
  const SupernetRun sup = tm.time("supernet", [&] { return train_supernet_gc(c, ds); });
  std::vector<std::vector<SubnetMask>> allowed;
  for (auto m : c.protocol.methods) {
    rec.schemes[m] = scheme_for(m, sup.sims, c);
    std::vector<SubnetMask> sets;
    for (std::size_t comb = 0; comb < combination_count(rec.schemes[m]); ++comb)
      sets.push_back(rec.schemes[m].chosen_layers.empty() ? sup.net.allowed : allowed_for(rec.schemes[m], comb));
    allowed.push_back(sets);
  }
  Rng rng = make_rng(seed, 51);
  rec.masks = sample_rank_masks(c.protocol.num_rank_subnets, c.supernet.layers, allowed, rng);

  rec.ground_truth.assign(rec.masks.size(), 0.0);
  tm.time("ground_truth", [&] {
    parallel_for(rec.masks.size(), threads, [&](std::size_t i) {
      rec.ground_truth[i] = retrain_from_scratch(rec.masks[i], ds, c.supernet, c.protocol.scratch_epochs).valid_accuracy;
    });
    return 0;
  });

  for (auto m : c.protocol.methods) {
    const auto subs = tm.time(std::string("sub_supernets_") + method_name(m),
                              [&] { return derive_for(sup.net, rec.schemes[m], ds, c, threads); });
    const auto sets = allowed_sets(subs);
    std::vector<double> proxy(rec.masks.size());
    tm.time(std::string("proxy_") + method_name(m), [&] {
      parallel_for(rec.masks.size(), threads, [&](std::size_t i) {
        const auto [fixed, home] = repair(rec.masks[i], sets);
        if (fixed != rec.masks[i]) throw std::logic_error("rank subnet not contained in any sub-supernet");
        proxy[i] = evaluate_subnet(sample_subnet(subs[home].net, rec.masks[i]), ds, Split::Valid,
                                   c.protocol.fine_tune_epochs, c.supernet);
      });
      return 0;
    });
    rec.tau[m] = kendall_tau(rec.ground_truth, proxy);
    rec.rho[m] = safe_spearman(rec.ground_truth, proxy);
    rec.proxy[m] = std::move(proxy);
  }
  return rec;
}

inline RankCorrelationResult rank_correlation_experiment(const ExperimentConfig& c, const Dataset& ds,
                                                         std::size_t threads = 1, Timings* t = nullptr) {
  Timings local;
  Timings& tm = t ? *t : local;
  RankCorrelationResult res;
  for (auto seed : c.protocol.seeds) res.seeds.push_back(rank_correlation_seed(c, ds, seed, threads, tm));
  for (auto m : c.protocol.methods) {
    std::vector<double> taus, rhos;
    for (const auto& s : res.seeds) {
      taus.push_back(s.tau.at(m));
      rhos.push_back(s.rho.at(m));
    }
    res.tau[m] = mean_std(taus);
    res.rho[m] = mean_std(rhos);
  }
  return res;
}

inline json rank_correlation_json(const RankCorrelationResult& r) {
  json methods = json::object();
  for (const auto& [m, ms] : r.tau)
    methods[method_name(m)] = {{"tau_mean", ms.mean},
                               {"tau_std", ms.std},
                               {"rho_mean", r.rho.at(m).mean},
                               {"rho_std", r.rho.at(m).std}};
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json per = json::object();
    for (const auto& [m, v] : s.proxy)
      per[method_name(m)] = {{"tau", s.tau.at(m)}, {"rho", s.rho.at(m)}, {"proxy", v},
                             {"scheme", scheme_json(s.schemes.at(m))}};
    std::vector<std::string> masks;
    for (const auto& m : s.masks) masks.push_back(m.str());
    seeds.push_back({{"seed", s.seed}, {"masks", masks}, {"ground_truth", s.ground_truth}, {"methods", per}});
  }
  return {{"methods", methods}, {"seeds", seeds}};
}

// ---- stage consistency ----------------------------------------------------------------

struct StageWindow {
  std::string name;
  std::size_t start = 0;
  std::size_t steps = 0;
};

// Early is the partition collection window; mid is centred on the middle of
// training; late ends on the last step.
inline std::array<StageWindow, 3> stage_windows(const ExperimentConfig& c, const Dataset& ds) {
  const std::size_t per_epoch = steps_per_epoch(ds, c.supernet.batch_size);
  const std::size_t total = per_epoch * c.supernet.epochs;
  const std::size_t b = c.protocol.stage_batches;
  const std::size_t early = c.partition.warmup_epochs * per_epoch;
  const std::size_t mid = total / 2 - std::min(total / 2, b / 2);
  if (b == 0 || b > total || early + b > mid || mid + b > total - b)
    throw std::invalid_argument("three disjoint stage windows of " + std::to_string(b) + " steps do not fit " +
                                std::to_string(total) + " training steps after warm-up");
  return {StageWindow{"early", early, b}, StageWindow{"mid", mid, b}, StageWindow{"late", total - b, b}};
}

// Cut weight of every layer 2..L.
inline std::vector<double> layer_gammas(const ContributionSet& cs, CutSolver solver) {
  std::vector<double> g;
  for (const auto& m : similarity(cs)) g.push_back(min_cut(m, solver).weight);
  return g;
}

struct StageTaus {
  double early_mid = 0.0, early_late = 0.0, mid_late = 0.0;
};

inline StageTaus stage_taus(const std::array<std::vector<double>, 3>& gammas) {
  if (gammas[0].size() < 2) throw std::invalid_argument("stage consistency needs at least 3 layers");
  return {kendall_tau(gammas[0], gammas[1]), kendall_tau(gammas[0], gammas[2]), kendall_tau(gammas[1], gammas[2])};
}

struct StageSeedRecord {
  std::uint64_t seed = 0;
  std::array<std::vector<double>, 3> gammas;
  StageTaus taus;
};

struct StageConsistencyResult {
  std::array<StageWindow, 3> windows;
  std::vector<StageSeedRecord> seeds;
  StageTaus mean;
};

inline StageConsistencyResult stage_consistency_experiment(const ExperimentConfig& base, const Dataset& ds,
                                                           std::size_t threads = 1) {
  if (base.supernet.layers < 3) throw std::invalid_argument("stage consistency needs L >= 3");
  StageConsistencyResult res;
  res.windows = stage_windows(base, ds);
  res.seeds.resize(base.protocol.seeds.size());
  parallel_for(res.seeds.size(), threads, [&](std::size_t i) {
    const ExperimentConfig c = base.with_seed(base.protocol.seeds[i]);
    Network net = init_network(c.supernet, ds);
    std::vector<ContributionCollector> cols;
    for (const auto& w : res.windows) cols.emplace_back(ds, net.layers, net.hidden, w.start, w.steps);
    train_supernet(net, ds, c.supernet, [&](const StepInfo& s) {
      for (auto& col : cols) col.observe(s);
    });
    StageSeedRecord& rec = res.seeds[i];
    rec.seed = c.seed;
    for (std::size_t w = 0; w < 3; ++w) rec.gammas[w] = layer_gammas(cols[w].finalize(), c.partition.solver);
    rec.taus = stage_taus(rec.gammas);
  });
  const double n = static_cast<double>(res.seeds.size());
  for (const auto& s : res.seeds) {
    res.mean.early_mid += s.taus.early_mid / n;
    res.mean.early_late += s.taus.early_late / n;
    res.mean.mid_late += s.taus.mid_late / n;
  }
  return res;
}

inline json stage_consistency_json(const StageConsistencyResult& r) {
  json windows = json::array();
  for (const auto& w : r.windows) windows.push_back({{"name", w.name}, {"start_step", w.start}, {"steps", w.steps}});
  json seeds = json::array();
  for (const auto& s : r.seeds)
    seeds.push_back({{"seed", s.seed},
                     {"gamma_early", s.gammas[0]},
                     {"gamma_mid", s.gammas[1]},
                     {"gamma_late", s.gammas[2]},
                     {"tau_early_mid", s.taus.early_mid},
                     {"tau_early_late", s.taus.early_late},
                     {"tau_mid_late", s.taus.mid_late}});
  return {{"windows", windows},
          {"seeds", seeds},
          {"tau_early_mid", r.mean.early_mid},
          {"tau_early_late", r.mean.early_late},
          {"tau_mid_late", r.mean.mid_late}};
}

// ---- solver comparison -----------------------------------------------------------------

struct SolverRow {
  CutSolver solver = CutSolver::BruteForce;
  std::vector<double> best_test;  // per seed
  std::vector<PartitionScheme> schemes;
  std::vector<bool> reused;  // same partition as brute force, search result shared
  double mean = 0.0;
};

struct SolverComparisonResult {
  std::vector<SolverRow> rows;
  double gap = 0.0;
};

// Equal chosen layers with equal Γ give identical sub-supernets; cuts of
// layers that were not chosen do not matter.
inline bool same_partition(const PartitionScheme& a, const PartitionScheme& b) {
  if (a.chosen_layers != b.chosen_layers) return false;
  for (std::size_t l : a.chosen_layers)
    if (a.cut_for(l).cut.gamma != b.cut_for(l).cut.gamma) return false;
  return true;
}

// The GC pipeline once per solver on a shared supernet per seed. When a
// solver yields the brute-force partition, every later stage is identical by
// determinism and the brute-force result is reused.
inline SolverComparisonResult solver_comparison_experiment(const ExperimentConfig& base, const Dataset& ds,
                                                           std::size_t threads = 1, Timings* t = nullptr) {
  Timings local;
  Timings& tm = t ? *t : local;
  SolverComparisonResult res;
  res.rows = {SolverRow{CutSolver::BruteForce, {}, {}, {}, 0.0},
              SolverRow{CutSolver::StoerWagnerShifted, {}, {}, {}, 0.0}};
  for (auto seed : base.protocol.seeds) {
    const ExperimentConfig c = base.with_seed(seed);
    const SupernetRun sup = tm.time("supernet", [&] { return train_supernet_gc(c, ds); });
    for (std::size_t r = 0; r < res.rows.size(); ++r) {
      SolverRow& row = res.rows[r];
      PartitionScheme scheme = scheme_for(PartitionMethod::GC, sup.sims, c, row.solver);
      if (r > 0 && same_partition(scheme, res.rows[0].schemes.back())) {
        row.best_test.push_back(res.rows[0].best_test.back());
        row.reused.push_back(true);
      } else {
        const auto subs = tm.time("sub_supernets", [&] { return derive_for(sup.net, scheme, ds, c, threads); });
        const SearchOutcome o = tm.time("search", [&] { return run_search(c, subs, ds, threads); });
        row.best_test.push_back(o.best_test);
        row.reused.push_back(false);
      }
      row.schemes.push_back(std::move(scheme));
    }
  }
  for (auto& row : res.rows) row.mean = mean_std(row.best_test).mean;
  res.gap = std::abs(res.rows[0].mean - res.rows[1].mean);
  return res;
}

inline json solver_comparison_json(const SolverComparisonResult& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json schemes = json::array();
    for (const auto& s : row.schemes) schemes.push_back(scheme_json(s));
    rows.push_back({{"solver", solver_name(row.solver)},
                    {"best_test_accuracy", row.best_test},
                    {"mean_best_test_accuracy", row.mean},
                    {"reused_brute_force_result", row.reused},
                    {"schemes", schemes}});
  }
  return {{"rows", rows}, {"gap", r.gap}};
}

// ---- results records ----------------------------------------------------------------

struct ResultsRecord {
  std::string run_id;
  std::string config_hash;
  json metrics = json::object();
  json timings = json::object();

  json to_json() const {
    return {{"run_id", run_id}, {"config_hash", config_hash}, {"metrics", metrics}, {"timings", timings}};
  }
};

inline std::filesystem::path write_record(const std::filesystem::path& dir, const ResultsRecord& r) {
  std::filesystem::create_directories(dir);
  const auto path = dir / (r.run_id + ".json");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << r.to_json().dump(2) << "\n";
  return path;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline constexpr char kSummaryFile[] = "summary.json";

// Collects every results record in `dir` (sorted by file name) into
// summary.json.
inline json aggregate_records(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("no such run directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".json" && e.path().filename() != kSummaryFile) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json runs = json::array();
  for (const auto& f : files) {
    std::ifstream in(f);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw std::runtime_error("cannot parse " + f.string() + ": " + e.what());
    }
    if (!j.contains("run_id") || !j.contains("metrics")) continue;
    runs.push_back(j);
  }
  json summary = {{"runs", runs}, {"count", runs.size()}};
  std::ofstream out(dir / kSummaryFile);
  if (!out) throw std::runtime_error("cannot write " + (dir / kSummaryFile).string());
  out << summary.dump(2) << "\n";
  return summary;
}

}  // namespace gcnas
