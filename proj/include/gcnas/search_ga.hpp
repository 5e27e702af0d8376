#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gcnas/few_shot.hpp"
#include "gcnas/parallel.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

struct GAConfig {
  std::size_t population = 12;
  std::size_t iterations = 6;
  double p_c = 0.6;
  double p_m = 0.1;
  std::size_t elite_count = 5;
  std::size_t fine_tune_epochs = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (population == 0) throw std::invalid_argument("population size must be positive");
    if (p_c < 0.0 || p_c > 1.0) throw std::invalid_argument("p_c must lie in [0, 1]");
    if (p_m < 0.0 || p_m > 1.0) throw std::invalid_argument("p_m must lie in [0, 1]");
    if (elite_count > population) throw std::invalid_argument("elite_count exceeds the population size");
  }
};

struct Individual {
  SubnetMask mask;
  std::optional<double> fitness;
  std::size_t home = 0;
};

// ---- operators -------------------------------------------------------------------

// Uniform sample from the power set of each layer.
inline SubnetMask random_mask(std::size_t layers, Rng& rng) {
  SubnetMask m = SubnetMask::all(layers, false);
  for (auto& row : m.select)
    for (auto& b : row) b = bernoulli(rng, 0.5);
  return m;
}

// One-point exchange at layer `layer`: child_a keeps a[0..c) and takes b[c..n).
inline void crossover_layer(SubnetMask& a, SubnetMask& b, std::size_t layer, std::size_t c) {
  if (c < 1 || c > kModulesPerLayer) throw std::invalid_argument("crossover point must lie in 1..n");
  for (std::size_t j = c; j < kModulesPerLayer; ++j) std::swap(a.select[layer][j], b.select[layer][j]);
}

inline std::pair<SubnetMask, SubnetMask> crossover(const SubnetMask& a, const SubnetMask& b, double p_c, Rng& rng) {
  if (a.layers() != b.layers()) throw std::invalid_argument("crossover: parents differ in layer count");
  SubnetMask ca = a, cb = b;
  for (std::size_t l = 0; l < a.layers(); ++l) {
    if (!bernoulli(rng, p_c)) continue;
    crossover_layer(ca, cb, l, 1 + uniform_index(rng, kModulesPerLayer));
  }
  return {ca, cb};
}

inline std::pair<SubnetMask, SubnetMask> crossover(const SubnetMask& a, const SubnetMask& b, double p_c,
                                                   std::uint64_t seed) {
  Rng rng = make_rng(seed, 31);
  return crossover(a, b, p_c, rng);
}

// Per layer with probability p_m, flips one uniformly chosen module.
inline SubnetMask mutate(const SubnetMask& parent, double p_m, Rng& rng) {
  SubnetMask child = parent;
  for (auto& row : child.select) {
    if (!bernoulli(rng, p_m)) continue;
    const std::size_t j = uniform_index(rng, row.size());
    row[j] = !row[j];
  }
  return child;
}

inline SubnetMask mutate(const SubnetMask& parent, double p_m, std::uint64_t seed) {
  Rng rng = make_rng(seed, 32);
  return mutate(parent, p_m, rng);
}

// At each layer where the allowed sets disagree, keeps the side holding
// the majority of the selected modules (ties and empty selections go to the
// side holding the lowest-indexed module) and drops the rest. The home is the
// member whose allowed set contains the result.
inline std::pair<SubnetMask, std::size_t> repair(const SubnetMask& mask, const std::vector<SubnetMask>& allowed) {
  if (allowed.empty()) throw std::invalid_argument("repair: no sub-supernets");
  SubnetMask out = mask;
  std::vector<LayerMask> chosen(mask.layers());
  for (std::size_t l = 0; l < mask.layers(); ++l) {
    std::vector<LayerMask> sides;
    for (const auto& a : allowed)
      if (std::find(sides.begin(), sides.end(), a.select.at(l)) == sides.end()) sides.push_back(a.select[l]);
    if (sides.size() == 1) {
      chosen[l] = sides.front();
      continue;
    }
    std::size_t lowest = 0;
    for (std::size_t s = 0; s < sides.size(); ++s)
      if (sides[s][0]) lowest = s;
    std::size_t best = lowest, best_count = 0;
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) best_count += (mask.select[l][j] && sides[lowest][j]) ? 1 : 0;
    for (std::size_t s = 0; s < sides.size(); ++s) {
      std::size_t c = 0;
      for (std::size_t j = 0; j < kModulesPerLayer; ++j) c += (mask.select[l][j] && sides[s][j]) ? 1 : 0;
      if (c > best_count) {
        best = s;
        best_count = c;
      }
    }
    chosen[l] = sides[best];
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) out.select[l][j] = mask.select[l][j] && sides[best][j];
  }
  for (std::size_t h = 0; h < allowed.size(); ++h)
    if (allowed[h].select == chosen) return {out, h};
  for (std::size_t h = 0; h < allowed.size(); ++h)
    if (out.contained_in(allowed[h])) return {out, h};
  throw std::logic_error("repair: no sub-supernet contains " + out.str());
}

inline std::vector<Individual> init_population(const GAConfig& cfg, std::size_t layers,
                                               const std::vector<SubnetMask>& allowed, Rng& rng) {
  std::vector<Individual> pop;
  for (std::size_t i = 0; i < cfg.population; ++i) {
    auto [m, home] = repair(random_mask(layers, rng), allowed);
    pop.push_back({m, std::nullopt, home});
  }
  return pop;
}

// ---- search ----------------------------------------------------------------------

struct GAIteration {
  std::size_t iteration = 0;
  double best_fitness = 0.0;
  double mean_fitness = 0.0;
  SubnetMask best_mask;
  std::size_t pool_size = 0;        // candidates before survival (3P after iteration 0)
  std::size_t population_size = 0;  // after survival
};

struct GAResult {
  std::vector<Individual> population;  // final
  std::vector<Individual> elites;
  Individual best;
  double best_valid = 0.0;
  double best_test = 0.0;
  std::vector<GAIteration> history;
  std::size_t evaluations = 0;  // distinct (mask, home) fitness evaluations
};

class FitnessCache {
 public:
  std::optional<double> find(const Individual& ind) const {
    auto it = cache_.find({ind.mask.str(), ind.home});
    if (it == cache_.end()) return std::nullopt;
    return it->second;
  }
  void store(const Individual& ind, double v) { cache_[{ind.mask.str(), ind.home}] = v; }
  std::size_t size() const { return cache_.size(); }

 private:
  std::map<std::pair<std::string, std::size_t>, double> cache_;
};

// Fills in the fitness of every individual, evaluating distinct unseen
// (mask, home) pairs concurrently.
inline void evaluate_population(std::vector<Individual>& inds, const std::vector<SubSupernet>& subs,
                                const Dataset& ds, const SupernetConfig& scfg, std::size_t fine_tune_epochs,
                                FitnessCache& cache, std::size_t threads) {
  std::vector<std::size_t> todo;
  std::set<std::pair<std::string, std::size_t>> queued;
  for (std::size_t i = 0; i < inds.size(); ++i)
    if (!cache.find(inds[i]) && queued.insert({inds[i].mask.str(), inds[i].home}).second) todo.push_back(i);
  std::vector<double> values(todo.size());
  parallel_for(todo.size(), threads, [&](std::size_t t) {
    const Individual& ind = inds[todo[t]];
    if (!ind.mask.contained_in(subs.at(ind.home).net.allowed))
      throw ContainmentError(0, "individual " + ind.mask.str() + " escapes its home sub-supernet");
    values[t] = evaluate_subnet(sample_subnet(subs[ind.home].net, ind.mask), ds, Split::Valid, fine_tune_epochs, scfg);
  });
  for (std::size_t t = 0; t < todo.size(); ++t) cache.store(inds[todo[t]], values[t]);
  for (auto& ind : inds) ind.fitness = *cache.find(ind);
}

inline GAIteration summarize(std::size_t it, const std::vector<Individual>& pop, std::size_t pool) {
  GAIteration h;
  h.iteration = it;
  h.pool_size = pool;
  h.population_size = pop.size();
  h.best_fitness = -1.0;
  double sum = 0.0;
  for (const auto& ind : pop) {
    sum += *ind.fitness;
    if (*ind.fitness > h.best_fitness) {
      h.best_fitness = *ind.fitness;
      h.best_mask = ind.mask;
    }
  }
  h.mean_fitness = sum / static_cast<double>(pop.size());
  return h;
}

inline void survive(std::vector<Individual>& pool, std::size_t keep) {
  std::stable_sort(pool.begin(), pool.end(),
                   [](const Individual& a, const Individual& b) { return *a.fitness > *b.fitness; });
  pool.resize(std::min(keep, pool.size()));
}

// Observer called after each survival step with the pool size and the
// surviving population.
using GAObserver = std::function<void(const GAIteration&, const std::vector<Individual>&)>;

inline GAResult run_ga(const std::vector<SubSupernet>& subs, const Dataset& ds, const GAConfig& cfg,
                       const SupernetConfig& scfg, std::size_t threads = 1, const GAObserver& observer = {}) {
  cfg.validate();
  if (subs.empty()) throw std::invalid_argument("run_ga: no sub-supernets");
  const auto allowed = allowed_sets(subs);
  const std::size_t layers = subs.front().net.layers;
  const std::size_t P = cfg.population;
  Rng rng = make_rng(cfg.seed, 41);
  FitnessCache cache;
  GAResult res;

  std::vector<Individual> pop = init_population(cfg, layers, allowed, rng);
  evaluate_population(pop, subs, ds, scfg, cfg.fine_tune_epochs, cache, threads);
  res.history.push_back(summarize(0, pop, pop.size()));
  if (observer) observer(res.history.back(), pop);

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<Individual> offspring;
    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; offspring.size() < P; k += 2) {
      const auto& a = pop[order[k % P]];
      const auto& b = pop[order[(k + 1) % P]];
      auto [ca, cb] = crossover(a.mask, b.mask, cfg.p_c, rng);
      for (auto* c : {&ca, &cb}) {
        if (offspring.size() == P) break;
        auto [m, home] = repair(*c, allowed);
        offspring.push_back({m, std::nullopt, home});
      }
    }
    for (std::size_t i = 0; i < P; ++i) {
      auto [m, home] = repair(mutate(pop[i].mask, cfg.p_m, rng), allowed);
      offspring.push_back({m, std::nullopt, home});
    }
    evaluate_population(offspring, subs, ds, scfg, cfg.fine_tune_epochs, cache, threads);
    std::vector<Individual> pool = pop;
    pool.insert(pool.end(), offspring.begin(), offspring.end());
    const std::size_t pool_size = pool.size();
    survive(pool, P);
    pop = std::move(pool);
    res.history.push_back(summarize(it, pop, pool_size));
    if (observer) observer(res.history.back(), pop);
  }

  // Elites: the best distinct masks, retrained from scratch.
  std::vector<Individual> ranked = pop;
  survive(ranked, ranked.size());
  std::set<std::string> seen;
  for (const auto& ind : ranked) {
    if (res.elites.size() == cfg.elite_count) break;
    if (seen.insert(ind.mask.str()).second) res.elites.push_back(ind);
  }
  std::vector<RetrainResult> retrained(res.elites.size());
  parallel_for(res.elites.size(), threads,
               [&](std::size_t i) { retrained[i] = retrain_from_scratch(res.elites[i].mask, ds, scfg); });
  std::size_t best = 0;
  for (std::size_t i = 1; i < retrained.size(); ++i)
    if (retrained[i].valid_accuracy > retrained[best].valid_accuracy) best = i;
  if (!res.elites.empty()) {
    res.best = res.elites[best];
    res.best_valid = retrained[best].valid_accuracy;
    res.best_test = retrained[best].test_accuracy;
  }
  res.population = pop;
  res.evaluations = cache.size();
  return res;
}

}  // namespace gcnas
