#pragma once

#include <string>
#include <vector>

#include "gcnas/parallel.hpp"
#include "gcnas/partition.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

struct SubSupernet {
  Network net;             // net.allowed is this member's allowed set
  std::vector<int> sides;  // per chosen layer: 0 = Γ side, 1 = complement
  std::size_t combination = 0;

  std::string label() const {
    std::string s = "c" + std::to_string(combination) + "[";
    for (int v : sides) s += v ? '1' : '0';
    return s + "]";
  }
};

// Bit i of `combination` picks the side at scheme.chosen_layers[i].
inline SubnetMask allowed_for(const PartitionScheme& scheme, std::size_t combination) {
  SubnetMask m = SubnetMask::all(scheme.num_layers, true);
  for (std::size_t i = 0; i < scheme.chosen_layers.size(); ++i) {
    const std::size_t layer = scheme.chosen_layers[i];
    const auto& gamma = scheme.cut_for(layer).cut.gamma;
    const bool use_gamma = ((combination >> i) & 1u) == 0;
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
      const bool in_gamma = std::find(gamma.begin(), gamma.end(), j) != gamma.end();
      m.select.at(layer - 1)[j] = in_gamma == use_gamma;
    }
  }
  return m;
}

inline std::size_t combination_count(const PartitionScheme& scheme) {
  return std::size_t{1} << scheme.chosen_layers.size();
}

// All 2^k members. Each inherits the parent weights and is then trained
// densely over its allowed modules for `fine_tune_epochs` (or, with
// `from_scratch`, re-initialised and trained for the full schedule). With
// k = 0 the single member is the parent unchanged.
inline std::vector<SubSupernet> derive_sub_supernets(const Network& supernet, const PartitionScheme& scheme,
                                                     const Dataset& ds, const SupernetConfig& cfg,
                                                     std::size_t fine_tune_epochs, bool from_scratch = false,
                                                     std::size_t threads = 1) {
  if (scheme.num_layers != supernet.layers)
    throw std::invalid_argument("scheme covers " + std::to_string(scheme.num_layers) + " layers, supernet has " +
                                std::to_string(supernet.layers));
  const std::size_t count = combination_count(scheme);
  std::vector<SubSupernet> out(count);
  parallel_for(count, threads, [&](std::size_t c) {
    SubSupernet& s = out[c];
    s.combination = c;
    for (std::size_t i = 0; i < scheme.chosen_layers.size(); ++i) s.sides.push_back(static_cast<int>((c >> i) & 1u));
    if (scheme.chosen_layers.empty()) {
      s.net = supernet;
      return;
    }
    const SubnetMask allowed = allowed_for(scheme, c);
    if (from_scratch) {
      s.net = init_network(supernet.layers, supernet.hidden, supernet.d_in, supernet.num_classes, cfg.seed,
                           supernet.residual);
      s.net.allowed = allowed;
      train_network(s.net, allowed, ds, make_schedule(cfg, cfg.epochs, cfg.warmup_epochs, mix_seed(cfg.seed, c)));
    } else {
      s.net = supernet;
      s.net.allowed = allowed;
      train_network(s.net, allowed, ds, make_schedule(cfg, fine_tune_epochs, 0, mix_seed(cfg.seed, 0x5B + c)));
    }
  });
  return out;
}

inline std::vector<SubnetMask> allowed_sets(const std::vector<SubSupernet>& subs) {
  std::vector<SubnetMask> out;
  for (const auto& s : subs) out.push_back(s.net.allowed);
  return out;
}

}  // namespace gcnas
