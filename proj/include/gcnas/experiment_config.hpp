#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcnas/graph_data.hpp"
#include "gcnas/partition.hpp"
#include "gcnas/search_darts.hpp"
#include "gcnas/search_ga.hpp"
#include "gcnas/supernet.hpp"

namespace gcnas {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PartitionMethod { GC, FS, Random, None };

inline const char* method_name(PartitionMethod m) {
  switch (m) {
    case PartitionMethod::GC: return "GC";
    case PartitionMethod::FS: return "FS";
    case PartitionMethod::Random: return "RANDOM";
    case PartitionMethod::None: return "NONE";
  }
  return "?";
}

inline PartitionMethod parse_method(const std::string& s) {
  if (s == "GC") return PartitionMethod::GC;
  if (s == "FS") return PartitionMethod::FS;
  if (s == "RANDOM") return PartitionMethod::Random;
  if (s == "NONE") return PartitionMethod::None;
  throw ConfigError("unknown partition method '" + s + "' (expected GC, FS, RANDOM or NONE)");
}

struct PartitionParams {
  PartitionMethod method = PartitionMethod::GC;
  std::size_t k = 2;
  CutSolver solver = CutSolver::BruteForce;
  std::size_t warmup_epochs = 3;  // collection starts after this many epochs
  std::size_t batches = 20;       // steps averaged
};

struct SearchParams {
  std::string algorithm = "ga";
  GAConfig ga;
  DartsConfig darts;
};

struct ProtocolParams {
  std::size_t num_rank_subnets = 24;
  std::size_t scratch_epochs = 25;
  std::size_t fine_tune_epochs = 3;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<PartitionMethod> methods{PartitionMethod::GC, PartitionMethod::None};
  std::size_t stage_batches = 20;
};

struct ExperimentConfig {
  SbmParams data;
  SupernetConfig supernet;
  PartitionParams partition;
  SearchParams search;
  ProtocolParams protocol;
  std::uint64_t seed = 0;  // model seed of single runs

  void validate() const {
    try {
      supernet.validate();
      search.ga.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (partition.k > supernet.layers - 1)
      throw ConfigError("partition.k = " + std::to_string(partition.k) + " exceeds layers - 1 = " +
                        std::to_string(supernet.layers - 1));
    if (partition.batches == 0) throw ConfigError("partition.batches must be positive");
    if (search.algorithm != "ga" && search.algorithm != "darts")
      throw ConfigError("search.algorithm must be ga or darts, got '" + search.algorithm + "'");
    if (protocol.seeds.empty()) throw ConfigError("protocol.seeds is empty");
    if (protocol.num_rank_subnets < 2) throw ConfigError("protocol.num_rank_subnets must be at least 2");
  }

  // Copy with every seeded component driven by `s`.
  ExperimentConfig with_seed(std::uint64_t s) const {
    ExperimentConfig c = *this;
    c.seed = s;
    c.supernet.seed = s;
    c.search.ga.seed = mix_seed(s, 0x6A);
    c.search.darts.seed = mix_seed(s, 0xDA);
    return c;
  }
};

namespace detail {

inline std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing "# comment" that is outside double quotes.
inline std::string drop_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return strip(s.substr(0, i));
  }
  return strip(s);
}

inline std::string unquote(const std::string& key, const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  if (!s.empty() && s.front() == '"') throw ConfigError(key + ": unterminated string");
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  T v{};
  const auto* end = raw.data() + raw.size();
  auto [p, ec] = std::from_chars(raw.data(), end, v);
  if (ec != std::errc() || p != end || raw.empty())
    throw ConfigError(key + ": cannot parse '" + raw + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

inline std::vector<std::string> parse_list(const std::string& key, const std::string& raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']')
    throw ConfigError(key + ": expected a list like [a, b], got '" + raw + "'");
  std::vector<std::string> out;
  std::stringstream ss(raw.substr(1, raw.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = strip(item);
    if (item.empty()) continue;
    out.push_back(unquote(key, item));
  }
  return out;
}

template <class T>
std::string list_str(const std::vector<T>& v, bool quote) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    std::ostringstream os;
    os << v[i];
    s += quote ? "\"" + os.str() + "\"" : os.str();
  }
  return s + "]";
}

inline std::string num_str(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// Applies one "section.key = value" assignment.
inline void set_config_value(ExperimentConfig& c, const std::string& section, const std::string& name,
                             const std::string& raw_in) {
  using namespace detail;
  const std::string key = section + "." + name;
  const std::string raw = drop_comment(raw_in);
  auto u64 = [&] { return parse_number<std::uint64_t>(key, raw); };
  auto u32 = [&] { return parse_number<std::uint32_t>(key, raw); };
  auto sz = [&] { return static_cast<std::size_t>(parse_number<std::uint64_t>(key, raw)); };
  auto f64 = [&] { return parse_number<double>(key, raw); };
  auto flag = [&] { return parse_bool(key, raw); };
  auto str = [&] { return unquote(key, raw); };

  if (section == "data") {
    auto& d = c.data;
    if (name == "num_graphs") return void(d.num_graphs = u32());
    if (name == "nodes_per_graph") return void(d.nodes_per_graph = u32());
    if (name == "num_classes") return void(d.num_classes = u32());
    if (name == "p_intra") return void(d.p_intra = f64());
    if (name == "p_inter") return void(d.p_inter = f64());
    if (name == "d_in") return void(d.d_in = u32());
    if (name == "label_noise") return void(d.label_noise = f64());
    if (name == "jitter") return void(d.jitter = f64());
    if (name == "seed") return void(d.seed = u64());
  } else if (section == "supernet") {
    auto& s = c.supernet;
    if (name == "layers") return void(s.layers = sz());
    if (name == "hidden") return void(s.hidden = sz());
    if (name == "epochs") return void(s.epochs = sz());
    if (name == "batch_size") return void(s.batch_size = sz());
    if (name == "eval_batch_size") return void(s.eval_batch_size = sz());
    if (name == "warmup_epochs") return void(s.warmup_epochs = sz());
    if (name == "lr") return void(s.lr = f64());
    if (name == "weight_decay") return void(s.weight_decay = f64());
    if (name == "beta1") return void(s.beta1 = f64());
    if (name == "beta2") return void(s.beta2 = f64());
    if (name == "eps") return void(s.eps = f64());
    if (name == "grad_clip") return void(s.grad_clip = f64());
    if (name == "residual") return void(s.residual = flag());
    if (name == "path_sampling") return void(s.path_sampling = flag());
    if (name == "sub_finetune_epochs") return void(s.sub_finetune_epochs = sz());
    if (name == "sub_from_scratch") return void(s.sub_from_scratch = flag());
  } else if (section == "partition") {
    auto& p = c.partition;
    if (name == "method") return void(p.method = parse_method(str()));
    if (name == "k") return void(p.k = sz());
    if (name == "solver") {
      try {
        return void(p.solver = parse_solver(str()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(key + ": " + e.what());
      }
    }
    if (name == "warmup_epochs") return void(p.warmup_epochs = sz());
    if (name == "batches") return void(p.batches = sz());
  } else if (section == "search") {
    auto& s = c.search;
    if (name == "algorithm") return void(s.algorithm = str());
    if (name == "population") return void(s.ga.population = sz());
    if (name == "iterations") return void(s.ga.iterations = sz());
    if (name == "p_c") return void(s.ga.p_c = f64());
    if (name == "p_m") return void(s.ga.p_m = f64());
    if (name == "elite_count") return void(s.ga.elite_count = sz());
    if (name == "fine_tune_epochs") return void(s.ga.fine_tune_epochs = sz());
    if (name == "darts_epochs") return void(s.darts.epochs = sz());
  } else if (section == "protocol") {
    auto& p = c.protocol;
    if (name == "num_rank_subnets") return void(p.num_rank_subnets = sz());
    if (name == "scratch_epochs") return void(p.scratch_epochs = sz());
    if (name == "fine_tune_epochs") return void(p.fine_tune_epochs = sz());
    if (name == "stage_batches") return void(p.stage_batches = sz());
    if (name == "seed") return void(c.seed = u64());
    if (name == "seeds") {
      p.seeds.clear();
      for (const auto& s : parse_list(key, raw)) p.seeds.push_back(parse_number<std::uint64_t>(key, s));
      return;
    }
    if (name == "methods") {
      p.methods.clear();
      for (const auto& s : parse_list(key, raw)) p.methods.push_back(parse_method(s));
      return;
    }
  } else {
    throw ConfigError("unknown config section [" + section + "]");
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Sections [data] [supernet] [partition] [search] [protocol] of
// `key = value` lines; strings may be quoted, lists use [a, b].
inline ExperimentConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty())
      throw ConfigError("config key '" + section + "' must sit inside a section");
    for (const auto& [name, value] : body) set_config_value(c, section, name, value.data());
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return parse_config(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// Canonical text form; parse_config_text(config_text(c)) reproduces c.
inline std::string config_text(const ExperimentConfig& c) {
  using detail::num_str;
  std::ostringstream os;
  const auto& d = c.data;
  os << "[data]\nnum_graphs = " << d.num_graphs << "\nnodes_per_graph = " << d.nodes_per_graph
     << "\nnum_classes = " << d.num_classes << "\np_intra = " << num_str(d.p_intra) << "\np_inter = "
     << num_str(d.p_inter) << "\nd_in = " << d.d_in << "\nlabel_noise = " << num_str(d.label_noise)
     << "\njitter = " << num_str(d.jitter) << "\nseed = " << d.seed << "\n";
  const auto& s = c.supernet;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "\n[supernet]\nlayers = " << s.layers << "\nhidden = " << s.hidden << "\nepochs = " << s.epochs
     << "\nbatch_size = " << s.batch_size << "\neval_batch_size = " << s.eval_batch_size
     << "\nwarmup_epochs = " << s.warmup_epochs << "\nlr = " << num_str(s.lr) << "\nweight_decay = "
     << num_str(s.weight_decay) << "\nbeta1 = " << num_str(s.beta1) << "\nbeta2 = " << num_str(s.beta2)
     << "\neps = " << num_str(s.eps) << "\ngrad_clip = " << num_str(s.grad_clip) << "\nresidual = " << b(s.residual)
     << "\npath_sampling = " << b(s.path_sampling) << "\nsub_finetune_epochs = " << s.sub_finetune_epochs
     << "\nsub_from_scratch = " << b(s.sub_from_scratch) << "\n";
  const auto& p = c.partition;
  os << "\n[partition]\nmethod = \"" << method_name(p.method) << "\"\nk = " << p.k << "\nsolver = \""
     << solver_name(p.solver) << "\"\nwarmup_epochs = " << p.warmup_epochs << "\nbatches = " << p.batches << "\n";
  const auto& g = c.search;
  os << "\n[search]\nalgorithm = \"" << g.algorithm << "\"\npopulation = " << g.ga.population
     << "\niterations = " << g.ga.iterations << "\np_c = " << num_str(g.ga.p_c) << "\np_m = " << num_str(g.ga.p_m)
     << "\nelite_count = " << g.ga.elite_count << "\nfine_tune_epochs = " << g.ga.fine_tune_epochs
     << "\ndarts_epochs = " << g.darts.epochs << "\n";
  const auto& r = c.protocol;
  std::vector<std::string> methods;
  for (auto m : r.methods) methods.push_back(method_name(m));
  os << "\n[protocol]\nseed = " << c.seed << "\nseeds = " << detail::list_str(r.seeds, false)
     << "\nmethods = " << detail::list_str(methods, true) << "\nnum_rank_subnets = " << r.num_rank_subnets
     << "\nscratch_epochs = " << r.scratch_epochs << "\nfine_tune_epochs = " << r.fine_tune_epochs
     << "\nstage_batches = " << r.stage_batches << "\n";
  return os.str();
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(config_text(c));
  return os.str();
}

}  // namespace gcnas
