#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gcnas/cli.hpp"
#include "test_util.hpp"

using namespace gcnas;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.data = tu::tiny_sbm(3);
  c.supernet = tu::tiny_supernet(3);
  c.partition.k = 2;
  c.partition.warmup_epochs = 1;
  c.partition.batches = 2;
  c.search.ga.population = 3;
  c.search.ga.iterations = 1;
  c.search.ga.elite_count = 1;
  c.protocol.stage_batches = 2;
  return c.with_seed(0);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "gcnas");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(StageConsistency, TauOfIdenticalRankingsIsOne) {
  const StageTaus t = stage_taus({std::vector<double>{3, 1, 2}, {30, 10, 20}, {0.3, 0.1, 0.2}});
  EXPECT_DOUBLE_EQ(t.early_mid, 1.0);
  EXPECT_DOUBLE_EQ(t.early_late, 1.0);
  EXPECT_DOUBLE_EQ(t.mid_late, 1.0);
  const StageTaus r = stage_taus({std::vector<double>{1, 2, 3}, {3, 2, 1}, {1, 2, 3}});
  EXPECT_DOUBLE_EQ(r.early_mid, -1.0);
  EXPECT_DOUBLE_EQ(r.early_late, 1.0);
  EXPECT_THROW(stage_taus({std::vector<double>{1}, {1}, {1}}), std::invalid_argument);
}

TEST(StageConsistency, WindowsLieInsideTraining) {
  ExperimentConfig c = tiny_experiment();
  c.supernet.epochs = 6;
  const Dataset ds = generate_sbm(c.data);
  const auto w = stage_windows(c, ds);
  const std::size_t total = steps_per_epoch(ds, c.supernet.batch_size) * c.supernet.epochs;
  EXPECT_EQ(w[0].start, steps_per_epoch(ds, c.supernet.batch_size));
  EXPECT_LE(w[0].start + w[0].steps, w[1].start);
  EXPECT_LE(w[1].start + w[1].steps, w[2].start);
  EXPECT_EQ(w[2].start + w[2].steps, total);
  ExperimentConfig bad = c;
  bad.protocol.stage_batches = total;
  EXPECT_THROW(stage_windows(bad, ds), std::invalid_argument);
}

TEST(RankProtocol, SampledMasksFitEverySchemeAndAreDistinct) {
  SubnetMask a = SubnetMask::all(3, true), b = a;
  for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
    a.select[1][j] = j < 3;
    b.select[1][j] = j >= 3;
  }
  SubnetMask c = SubnetMask::all(3, true), d = c;
  for (std::size_t j = 0; j < kModulesPerLayer; ++j) {
    c.select[1][j] = j % 2 == 0;
    d.select[1][j] = j % 2 == 1;
  }
  const std::vector<std::vector<SubnetMask>> schemes{{a, b}, {c, d}, {SubnetMask::all(3, true)}};
  Rng rng = make_rng(71);
  const auto masks = sample_rank_masks(20, 3, schemes, rng);
  ASSERT_EQ(masks.size(), 20u);
  std::set<SubnetMask> distinct(masks.begin(), masks.end());
  EXPECT_EQ(distinct.size(), 20u);
  for (const auto& m : masks)
    for (const auto& s : schemes) {
      bool fits = false;
      for (const auto& allowed : s) fits = fits || m.contained_in(allowed);
      EXPECT_TRUE(fits) << m.str();
    }
}

TEST(RankProtocol, SafeSpearmanHandlesConstantLists) {
  EXPECT_TRUE(std::isnan(safe_spearman({1, 1, 1}, {1, 2, 3})));
  EXPECT_DOUBLE_EQ(safe_spearman({1, 2, 3}, {2, 4, 6}), 1.0);
}

TEST(Pipeline, BaselineSchemesReuseTheGcLayers) {
  ExperimentConfig c = tiny_experiment();
  const Dataset ds = generate_sbm(c.data);
  const SupernetRun run = train_supernet_gc(c, ds);
  EXPECT_EQ(run.collected_steps, 2u);
  EXPECT_LT(run.max_completeness_error, 1e-10);
  const PartitionScheme gc = scheme_for(PartitionMethod::GC, run.sims, c);
  const PartitionScheme fs_ = scheme_for(PartitionMethod::FS, run.sims, c);
  const PartitionScheme rnd = scheme_for(PartitionMethod::Random, run.sims, c);
  const PartitionScheme none = scheme_for(PartitionMethod::None, run.sims, c);
  EXPECT_EQ(gc.chosen_layers.size(), 2u);
  EXPECT_EQ(fs_.chosen_layers, gc.chosen_layers);
  EXPECT_EQ(rnd.chosen_layers, gc.chosen_layers);
  EXPECT_TRUE(none.chosen_layers.empty());
  for (std::size_t l : gc.chosen_layers) EXPECT_GE(fs_.cut_for(l).cut.weight, gc.cut_for(l).cut.weight - 1e-12);
}

TEST(SolverCompare, OnlyChosenLayersDecideReuse) {
  Rng rng = make_rng(5);
  std::vector<SimilarityMatrix> sims;
  for (std::size_t l = 2; l <= 4; ++l) sims.push_back(tu::random_similarity(kModulesPerLayer, rng, -1.0, 1.0));
  const PartitionScheme a = build_scheme(sims, 1, CutSolver::BruteForce);
  ASSERT_EQ(a.chosen_layers.size(), 1u);
  PartitionScheme b = a;
  for (auto& c : b.cuts)
    if (c.layer != a.chosen_layers[0]) c.cut.gamma = {0};
  EXPECT_TRUE(same_partition(a, b));
  PartitionScheme d = a;
  for (auto& c : d.cuts)
    if (c.layer == a.chosen_layers[0]) c.cut.gamma = c.cut.gamma == std::vector<std::size_t>{0} ? std::vector<std::size_t>{0, 1} : std::vector<std::size_t>{0};
  EXPECT_FALSE(same_partition(a, d));
}

TEST(Records, AggregateCollectsSortedRecords) {
  const fs::path dir = fresh_dir("gcnas_records_test");
  EXPECT_THROW(aggregate_records(dir), std::runtime_error);
  for (const char* id : {"b-run", "a-run"}) {
    ResultsRecord r;
    r.run_id = id;
    r.config_hash = config_hash(ExperimentConfig{});
    r.metrics = {{"x", 1}};
    write_record(dir, r);
  }
  write_text(dir / "notes.txt", "ignored");
  const json s = aggregate_records(dir);
  ASSERT_EQ(s["count"].get<std::size_t>(), 2u);
  EXPECT_EQ(s["runs"][0]["run_id"], "a-run");
  EXPECT_TRUE(fs::exists(dir / kSummaryFile));
  // Re-aggregating does not count the summary itself.
  EXPECT_EQ(aggregate_records(dir)["count"].get<std::size_t>(), 2u);
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  std::string out, err;
  EXPECT_EQ(run_cli({"--help"}, &out), kExitOk);
  EXPECT_NE(out.find("rank-corr"), std::string::npos);
  EXPECT_EQ(run_cli({}), kExitConfig);
  EXPECT_EQ(run_cli({"frobnicate"}), kExitConfig);
  EXPECT_EQ(run_cli({"search", "random"}), kExitConfig);

  const std::string missing = (fs::temp_directory_path() / "gcnas_missing.toml").string();
  EXPECT_EQ(run_cli({"--config", missing, "gen-data"}, &out, &err), kExitConfig);
  EXPECT_NE(err.find(missing), std::string::npos) << err;

  const fs::path dir = fresh_dir("gcnas_cli_test");
  EXPECT_EQ(run_cli({"--out", dir.string(), "report"}, &out, &err), kExitRuntime);
  const fs::path cfg = dir / "c.toml";
  write_text(cfg, "[data]\nnum_graphs = 12\nnodes_per_graph = 12\n");
  EXPECT_EQ(run_cli({"--config", cfg.string(), "--out", dir.string(), "gen-data"}, &out, &err), kExitOk) << err;
  EXPECT_TRUE(fs::exists(dir / "gen-data.json"));
  EXPECT_EQ(run_cli({"--out", dir.string(), "report"}), kExitOk);
  // The stored dataset must match the [data] settings of later calls.
  EXPECT_EQ(run_cli({"--out", dir.string(), "gen-data"}, &out, &err), kExitRuntime);
  EXPECT_NE(err.find("different [data]"), std::string::npos) << err;
  fs::remove_all(dir);
}
