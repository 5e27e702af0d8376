#include <cmath>
#include <filesystem>

#include "test_util.hpp"

using namespace gcnas;

namespace {

Tensor logits_of(const Network& net, const SubnetMask& mask, const GraphBatch& b) {
  Tape t;
  Binder bind(t, false);
  return forward(net, mask, b, bind).value();
}

SubnetMask sparse_mask(std::size_t layers) {
  SubnetMask m = SubnetMask::all(layers, false);
  for (std::size_t l = 0; l < layers; ++l) {
    m.select[l][l % 4] = true;
    m.select[l][4 + l % 2] = true;
  }
  return m;
}

}  // namespace

TEST(Supernet, ShapesAndTags) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(1));
  const Network net = init_network(tu::tiny_supernet(3), ds);
  const GraphBatch b = make_batch(ds, {0, 1});
  Tape t;
  Binder bind(t, false);
  Var z = forward(net, net.allowed, b, bind);
  EXPECT_EQ(z.shape(), (Shape{b.num_nodes, ds.num_classes}));
  for (std::size_t l = 1; l <= 3; ++l) {
    EXPECT_TRUE(t.find_tag(x_tag(l)).has_value());
    for (std::size_t j = 0; j < kModulesPerLayer; ++j) EXPECT_TRUE(t.find_tag(y_tag(l, j)).has_value());
  }
}

TEST(Supernet, ContainmentErrorNamesTheLayer) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(1));
  Network net = init_network(tu::tiny_supernet(3), ds);
  net.allowed.select[1][2] = false;
  SubnetMask m = SubnetMask::all(3, false);
  m.select[1][2] = true;
  try {
    sample_subnet(net, m);
    FAIL() << "expected ContainmentError";
  } catch (const ContainmentError& e) {
    EXPECT_EQ(e.layer(), 1u);
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(check_mask(net, SubnetMask::all(2, false)), ContainmentError);
}

TEST(Supernet, AllTrueSubnetMatchesDenseForward) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(2));
  const Network net = init_network(tu::tiny_supernet(3), ds);
  const GraphBatch b = make_batch(ds, {0, 1, 2});
  const Subnet s = sample_subnet(net, SubnetMask::all(3, true));
  const Tensor a = logits_of(net, net.allowed, b);
  const Tensor c = logits_of(s.net, s.mask, b);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data[i], c.data[i], 1e-12);
}

TEST(Supernet, EmptyMaskRunsThroughFusionMlps) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(2));
  const Network net = init_network(tu::tiny_supernet(3), ds);
  const Tensor z = logits_of(net, SubnetMask::all(3, false), make_batch(ds, {0}));
  EXPECT_TRUE(all_finite(z));
}

TEST(Supernet, SampledSubnetInheritsWeightsBitForBit) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(3));
  Network net = init_network(tu::tiny_supernet(3), ds);
  train_supernet(net, ds, tu::tiny_supernet(3));
  const SubnetMask m = sparse_mask(3);
  const Subnet s = sample_subnet(net, m);
  std::size_t checked = 0;
  for_each_param(s.net, [&](const ParamKey& k, const Tensor& t) {
    const bool selected = k.layer < 0 || k.module < 0 || m.select[k.layer][k.module];
    if (!selected) return;
    Tensor* src = nullptr;
    for_each_param(net, [&](const ParamKey& k2, Tensor& t2) {
      if (k2 == k) src = &t2;
    });
    ASSERT_NE(src, nullptr);
    EXPECT_EQ(t.data, src->data) << k.str();
    ++checked;
  });
  EXPECT_GT(checked, 0u);
  // The subnet is a copy: training it leaves the source untouched.
  const Network before = net;
  Subnet s2 = s;
  train_network(s2.net, m, ds, make_schedule(tu::tiny_supernet(3), 1, 0, 5));
  EXPECT_EQ(net, before);
}

TEST(Supernet, CheckpointRoundTripAndErrors) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(4));
  Network net = init_network(tu::tiny_supernet(3), ds);
  net.allowed.select[2][0] = false;
  EXPECT_EQ(deserialize_network(serialize_network(net)), net);

  const auto path = (std::filesystem::temp_directory_path() / "gcnas_test.ckpt").string();
  save_checkpoint(net, path);
  EXPECT_EQ(load_checkpoint(path), net);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);

  const std::string bytes = serialize_network(net);
  EXPECT_THROW(deserialize_network("XXXXXXXX" + bytes.substr(8)), FormatError);
  EXPECT_THROW(deserialize_network(bytes.substr(0, bytes.size() - 5)), FormatError);
  EXPECT_THROW(deserialize_network(bytes + "x"), FormatError);
}

TEST(Training, ZeroEpochsLeavesParametersUnchanged) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(5));
  SupernetConfig cfg = tu::tiny_supernet(2);
  cfg.epochs = 0;
  Network net = init_network(cfg, ds);
  const Network before = net;
  const TrainLog log = train_supernet(net, ds, cfg);
  EXPECT_EQ(log.steps, 0u);
  EXPECT_EQ(net, before);
}

TEST(Training, SameSeedGivesIdenticalParameters) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(6));
  const SupernetConfig cfg = tu::tiny_supernet(2);
  Network a = init_network(cfg, ds), b = init_network(cfg, ds);
  train_supernet(a, ds, cfg);
  train_supernet(b, ds, cfg);
  EXPECT_EQ(a, b);
  SupernetConfig other = cfg;
  other.seed = 1;
  Network c = init_network(other, ds);
  train_supernet(c, ds, other);
  EXPECT_NE(a, c);
}

TEST(Training, LossDecreases) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(7));
  SupernetConfig cfg = tu::tiny_supernet(2);
  cfg.epochs = 10;
  Network net = init_network(cfg, ds);
  const TrainLog log = train_supernet(net, ds, cfg);
  ASSERT_EQ(log.epoch_loss.size(), 10u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(Training, PathSamplingTrainsOnlySelectedModulesPerStep) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(7));
  SupernetConfig cfg = tu::tiny_supernet(2);
  cfg.path_sampling = true;
  cfg.epochs = 2;
  Network net = init_network(cfg, ds);
  EXPECT_NO_THROW(train_supernet(net, ds, cfg));
}

TEST(Evaluation, DoesNotModifyTheNetwork) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(8));
  const Network net = init_network(tu::tiny_supernet(2), ds);
  const Network before = net;
  const EvalResult a = evaluate(net, net.allowed, ds, Split::Valid);
  const EvalResult b = evaluate(net, net.allowed, ds, Split::Valid, 1);
  EXPECT_EQ(net, before);
  EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  EXPECT_GE(a.accuracy, 0.0);
  EXPECT_LE(a.accuracy, 1.0);
}

TEST(Evaluation, RandomWeightsScoreNearChance) {
  const Dataset ds = generate_sbm(SbmParams{});
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Network net = init_network(5, 16, ds.d_in, ds.num_classes, seed);
    total += evaluate(net, net.allowed, ds, Split::Valid).accuracy;
  }
  EXPECT_NEAR(total / 10.0, 1.0 / 3.0, 0.1);
}

TEST(Evaluation, SubnetEvaluationNeverMutatesInput) {
  const Dataset ds = generate_sbm(tu::tiny_sbm(9));
  const SupernetConfig cfg = tu::tiny_supernet(2);
  const Network net = init_network(cfg, ds);
  const Subnet s = sample_subnet(net, sparse_mask(2));
  const Subnet copy = s;
  evaluate_subnet(s, ds, Split::Valid, 2, cfg);
  EXPECT_EQ(s.net, copy.net);
}

TEST(Optimizer, WarmupThenCosineDecay) {
  OptimizerConfig c;
  c.lr = 1.0;
  c.warmup_steps = 4;
  c.total_steps = 14;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.25);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 3), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 4), 1.0);
  EXPECT_NEAR(scheduled_lr(c, 9), 0.5, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 14), 0.0, 1e-15);
  for (std::size_t s = 4; s < 14; ++s) EXPECT_GE(scheduled_lr(c, s), scheduled_lr(c, s + 1));
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  OptimizerConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.0;
  c.total_steps = 100;
  c.warmup_steps = 0;
  AdamW opt(c);
  Tensor p = Tensor::matrix(1, 2, {1.0, -1.0});
  const Tensor g = Tensor::matrix(1, 2, {3.0, -0.5});
  opt.step({&p}, {&g});
  // Bias-corrected first step is lr · sign(g) up to eps.
  EXPECT_NEAR(p.data[0], 0.9, 1e-6);
  EXPECT_NEAR(p.data[1], -0.9, 1e-6);
}
