#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gcnas/experiments.hpp"

namespace gcnas {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

namespace cli {

namespace fs = std::filesystem;

struct Context {
  ExperimentConfig config;
  fs::path out;
  std::size_t threads = 1;
  std::ostream* log = &std::cout;
};

inline Dataset obtain_dataset(const Context& ctx) {
  const fs::path path = ctx.out / "dataset.bin";
  if (fs::exists(path)) {
    Dataset ds = load_dataset(path.string());
    if (ds.manifest != sbm_manifest(ctx.config.data))
      throw std::runtime_error(path.string() + " was generated with different [data] settings");
    return ds;
  }
  Dataset ds = generate_sbm(ctx.config.data);
  fs::create_directories(ctx.out);
  save_dataset(ds, path.string());
  return ds;
}

inline ResultsRecord make_record(const Context& ctx, const std::string& name, bool per_seed) {
  ResultsRecord r;
  r.run_id = per_seed ? name + "-s" + std::to_string(ctx.config.seed) : name;
  r.config_hash = config_hash(ctx.config);
  return r;
}

inline void finish(const Context& ctx, ResultsRecord& r, const Timings& t) {
  r.timings = t.to_json();
  const auto path = write_record(ctx.out, r);
  *ctx.log << "wrote " << path.string() << "\n";
}

inline fs::path sub_path(const fs::path& out, std::size_t c) { return out / ("sub_" + std::to_string(c) + ".ckpt"); }

inline void save_partition(const Context& ctx, const PartitionPipeline& p) {
  save_checkpoint(p.supernet.net, (ctx.out / "supernet.ckpt").string());
  for (std::size_t c = 0; c < p.subs.size(); ++c) save_checkpoint(p.subs[c].net, sub_path(ctx.out, c).string());
  write_text(ctx.out / "partition_report.txt", partition_report(p.scheme, p.supernet.sims));
}

inline std::vector<SubSupernet> load_subs(const fs::path& out) {
  std::vector<SubSupernet> subs;
  for (std::size_t c = 0; fs::exists(sub_path(out, c)); ++c) {
    SubSupernet s;
    s.net = load_checkpoint(sub_path(out, c).string());
    s.combination = c;
    subs.push_back(std::move(s));
  }
  std::size_t k = 0;
  while ((std::size_t{1} << k) < subs.size()) ++k;
  for (auto& s : subs)
    for (std::size_t i = 0; i < k; ++i) s.sides.push_back(static_cast<int>((s.combination >> i) & 1u));
  return subs;
}

inline int cmd_gen_data(const Context& ctx) {
  Timings t;
  const Dataset ds = t.time("generate", [&] { return obtain_dataset(ctx); });
  ResultsRecord r = make_record(ctx, "gen-data", false);
  std::size_t nodes = 0;
  for (const auto& g : ds.graphs) nodes += g.num_nodes;
  r.metrics = {{"num_graphs", ds.graphs.size()},
               {"num_nodes", nodes},
               {"train", ds.splits.train.size()},
               {"valid", ds.splits.valid.size()},
               {"test", ds.splits.test.size()}};
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_train_supernet(const Context& ctx) {
  Timings t;
  const Dataset ds = obtain_dataset(ctx);
  Network net = init_network(ctx.config.supernet, ds);
  const TrainLog log = t.time("train", [&] { return train_supernet(net, ds, ctx.config.supernet); });
  save_checkpoint(net, (ctx.out / "supernet.ckpt").string());
  const EvalResult valid = evaluate(net, net.allowed, ds, Split::Valid, ctx.config.supernet.eval_batch_size);
  const EvalResult test = evaluate(net, net.allowed, ds, Split::Test, ctx.config.supernet.eval_batch_size);
  ResultsRecord r = make_record(ctx, "train-supernet", true);
  r.metrics = {{"epoch_loss", log.epoch_loss},
               {"steps", log.steps},
               {"valid_accuracy", valid.accuracy},
               {"test_accuracy", test.accuracy}};
  *ctx.log << "supernet valid accuracy " << valid.accuracy << "\n";
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_partition(const Context& ctx) {
  Timings t;
  const Dataset ds = obtain_dataset(ctx);
  const PartitionPipeline p = run_partition_pipeline(ctx.config, ds, ctx.threads, &t);
  save_partition(ctx, p);
  ResultsRecord r = make_record(ctx, "partition", true);
  r.metrics = partition_metrics(p);
  *ctx.log << "chosen layers " << format_subset(p.scheme.chosen_layers) << ", " << p.subs.size()
           << " sub-supernets\n";
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_search(const Context& ctx, const std::string& algorithm) {
  Context c = ctx;
  c.config.search.algorithm = algorithm;
  c.config.validate();
  Timings t;
  const Dataset ds = obtain_dataset(c);
  std::vector<SubSupernet> subs = load_subs(c.out);
  if (subs.empty()) {
    const PartitionPipeline p = run_partition_pipeline(c.config, ds, c.threads, &t);
    save_partition(c, p);
    subs = p.subs;
  }
  for (const auto& s : subs)
    if (s.net.layers != c.config.supernet.layers || s.net.hidden != c.config.supernet.hidden)
      throw std::runtime_error("checkpoints in " + c.out.string() + " do not match the [supernet] settings");
  const SearchOutcome o = t.time("search", [&] { return run_search(c.config, subs, ds, c.threads); });
  ResultsRecord r = make_record(c, "search-" + algorithm, true);
  r.metrics = search_metrics(o);
  *c.log << "best " << o.best.str() << " valid " << o.best_valid << " test " << o.best_test << "\n";
  finish(c, r, t);
  return kExitOk;
}

inline int cmd_rank_corr(const Context& ctx) {
  Timings t;
  const Dataset ds = obtain_dataset(ctx);
  const RankCorrelationResult res = rank_correlation_experiment(ctx.config, ds, ctx.threads, &t);
  ResultsRecord r = make_record(ctx, "rank-corr", false);
  r.metrics = rank_correlation_json(res);
  for (const auto& [m, ms] : res.tau)
    *ctx.log << method_name(m) << " tau " << ms.mean << " +- " << ms.std << " rho " << res.rho.at(m).mean << " +- "
             << res.rho.at(m).std << "\n";
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_stage_consistency(const Context& ctx) {
  Timings t;
  const Dataset ds = obtain_dataset(ctx);
  const StageConsistencyResult res =
      t.time("stage_consistency", [&] { return stage_consistency_experiment(ctx.config, ds, ctx.threads); });
  ResultsRecord r = make_record(ctx, "stage-consistency", false);
  r.metrics = stage_consistency_json(res);
  *ctx.log << "tau early-mid " << res.mean.early_mid << " early-late " << res.mean.early_late << " mid-late "
           << res.mean.mid_late << "\n";
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_solver_compare(const Context& ctx) {
  Timings t;
  const Dataset ds = obtain_dataset(ctx);
  const SolverComparisonResult res = solver_comparison_experiment(ctx.config, ds, ctx.threads, &t);
  ResultsRecord r = make_record(ctx, "solver-compare", false);
  r.metrics = solver_comparison_json(res);
  for (const auto& row : res.rows) *ctx.log << solver_name(row.solver) << " " << row.mean << "\n";
  *ctx.log << "gap " << res.gap << "\n";
  finish(ctx, r, t);
  return kExitOk;
}

inline int cmd_report(const Context& ctx) {
  const json s = aggregate_records(ctx.out);
  *ctx.log << "aggregated " << s["count"].get<std::size_t>() << " records into "
           << (ctx.out / kSummaryFile).string() << "\n";
  return kExitOk;
}

}  // namespace cli

// Parses argv and runs one subcommand. Returns 0 on success, 1 on usage or
// config errors and 2 on runtime failures.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"few-shot GNN architecture search with gradient-contribution partitioning", "gcnas"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
  std::size_t threads = 1;
  app.add_option("--config", config_path, "config file")->option_text("PATH");
  app.add_option("--seed", seed, "model seed of single runs");
  app.add_option("--out", out_dir, "output directory")->capture_default_str();
  app.add_option("--threads", threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  std::string algorithm;
  auto* gen = app.add_subcommand("gen-data", "generate and store the synthetic dataset");
  auto* train = app.add_subcommand("train-supernet", "train the dense supernet and save a checkpoint");
  auto* part = app.add_subcommand("partition", "train with contribution collection, cut and derive sub-supernets");
  auto* search = app.add_subcommand("search", "search over the sub-supernets");
  search->add_option("algorithm", algorithm, "ga or darts")->required()->check(CLI::IsMember({"ga", "darts"}));
  auto* rank = app.add_subcommand("rank-corr", "rank-correlation protocol over the configured seeds");
  auto* stage = app.add_subcommand("stage-consistency", "cut-weight ranking agreement across training stages");
  auto* solver = app.add_subcommand("solver-compare", "full pipeline per min-cut solver");
  auto* report = app.add_subcommand("report", "aggregate results records into summary.json");
  for (auto* sub : {gen, train, part, search, rank, stage, solver, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  cli::Context ctx;
  ctx.out = out_dir;
  ctx.threads = threads;
  ctx.log = &out;
  try {
    if (!config_path.empty()) ctx.config = load_config(config_path);
    if (seed) ctx.config.seed = *seed;
    ctx.config = ctx.config.with_seed(ctx.config.seed);
    ctx.config.validate();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*gen) return cli::cmd_gen_data(ctx);
    if (*train) return cli::cmd_train_supernet(ctx);
    if (*part) return cli::cmd_partition(ctx);
    if (*search) return cli::cmd_search(ctx, algorithm);
    if (*rank) return cli::cmd_rank_corr(ctx);
    if (*stage) return cli::cmd_stage_consistency(ctx);
    if (*solver) return cli::cmd_solver_compare(ctx);
    if (*report) return cli::cmd_report(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace gcnas
