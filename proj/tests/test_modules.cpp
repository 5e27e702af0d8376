#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace gcnas;
using gcnas::tu::random_tensor;

namespace {

GraphInstance small_graph(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed, 7);
  GraphInstance g;
  g.num_nodes = static_cast<std::uint32_t>(n);
  std::bernoulli_distribution coin(0.4);
  for (std::uint32_t u = 0; u < n; ++u)
    for (std::uint32_t v = u + 1; v < n; ++v)
      if (coin(rng)) g.edges.push_back({u, v});
  g.node_features = random_tensor(n, d, rng);
  g.edge_features = random_tensor(g.edges.size(), d, rng);
  g.node_labels.assign(n, 0);
  return g;
}

Tensor module_x(ModuleKind kind, const ParamGroup& p, const GraphBatch& b, const Tensor& x, const Tensor& e,
                Tensor* e_out = nullptr) {
  Tape t;
  Binder bind(t, false);
  BatchConstants consts(bind, b);
  const ModuleOutput o = module_forward(kind, p, bind, bind.constant(x), bind.constant(e), b, consts);
  if (e_out) *e_out = o.e.value();
  return o.x.value();
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data[i], b.data[i], tol) << "element " << i;
}

Tensor identity(std::size_t d) {
  Tensor t = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

class ModuleKinds : public ::testing::TestWithParam<ModuleKind> {};

TEST_P(ModuleKinds, PreservesShapes) {
  const ModuleKind kind = GetParam();
  const GraphInstance g = small_graph(7, 5, 1);
  const GraphBatch b = make_batch({&g});
  Rng rng = make_rng(2);
  const ParamGroup p = init_module(kind, 5, rng);
  Tensor e_out;
  const Tensor x_out = module_x(kind, p, b, g.node_features, g.edge_features, &e_out);
  EXPECT_EQ(x_out.shape, g.node_features.shape);
  EXPECT_EQ(e_out.shape, g.edge_features.shape);
  EXPECT_TRUE(all_finite(x_out));
  if (!updates_edges(kind)) {
    EXPECT_EQ(e_out, g.edge_features);
  }
}

TEST_P(ModuleKinds, InputGradientMatchesFiniteDifferences) {
  const ModuleKind kind = GetParam();
  const GraphInstance g = small_graph(6, 4, 3);
  const GraphInstance h = small_graph(5, 4, 4);
  const GraphBatch b = make_batch({&g, &h});
  Rng rng = make_rng(5);
  const ParamGroup p = init_module(kind, 4, rng);
  const Tensor probe = random_tensor(b.num_nodes, 4, rng);
  const Tensor e = b.edge_features;
  auto f = [&](Tape& t, Var x) {
    Binder bind(t, false);
    BatchConstants consts(bind, b);
    const ModuleOutput o = module_forward(kind, p, bind, x, bind.constant(e), b, consts);
    Var loss = sum(mul(o.x, bind.constant(probe)));
    if (updates_edges(kind)) loss = add(loss, sum(o.e));
    return loss;
  };
  const Tensor x0 = b.node_features;
  EXPECT_LT(finite_diff_check(f, x0, 1e-5), 1e-5) << module_name(kind);
}

TEST_P(ModuleKinds, PermutationEquivariant) {
  const ModuleKind kind = GetParam();
  const std::size_t n = 8;
  const GraphInstance g = small_graph(n, 4, 11);
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng = make_rng(12);
  std::shuffle(perm.begin(), perm.end(), rng);

  GraphInstance pg = g;
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto [u, v] = g.edges[i];
    pg.edges[i] = {std::min(perm[u], perm[v]), std::max(perm[u], perm[v])};
  }
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t c = 0; c < 4; ++c) pg.node_features.at(perm[v], c) = g.node_features.at(v, c);

  const ParamGroup p = init_module(kind, 4, rng);
  Tensor e_a, e_b;
  const Tensor a = module_x(kind, p, make_batch({&g}), g.node_features, g.edge_features, &e_a);
  const Tensor b = module_x(kind, p, make_batch({&pg}), pg.node_features, pg.edge_features, &e_b);
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b.at(perm[v], c), a.at(v, c), 1e-12) << module_name(kind);
  expect_close(e_a, e_b, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, ModuleKinds, ::testing::ValuesIn(kModuleKinds),
                         [](const auto& info) { return std::string(module_name(info.param)); });

TEST(Modules, MeanConvWithoutEdgesAndIdentityWeightsIsRelu) {
  GraphInstance g;
  g.num_nodes = 4;
  Rng rng = make_rng(21);
  g.node_features = random_tensor(4, 3, rng);
  g.edge_features = Tensor::matrix(0, 3);
  g.node_labels.assign(4, 0);
  ParamGroup p;
  p.add("W", identity(3));
  p.add("b", Tensor::matrix(1, 3));
  const Tensor out = module_x(ModuleKind::MeanConv, p, make_batch({&g}), g.node_features, g.edge_features);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.data[i], std::max(0.0, g.node_features.data[i]));
}

TEST(Modules, FullAttentionWithZeroQueryKeyAveragesValues) {
  const GraphInstance g = small_graph(5, 3, 22);
  ParamGroup p;
  p.add("Wq", Tensor::matrix(3, 3));
  p.add("Wk", Tensor::matrix(3, 3));
  p.add("Wv", identity(3));
  const Tensor out = module_x(ModuleKind::FullAttention, p, make_batch({&g}), g.node_features, g.edge_features);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t v = 0; v < 5; ++v) m += g.node_features.at(v, c) / 5.0;
    for (std::size_t v = 0; v < 5; ++v) EXPECT_NEAR(out.at(v, c), m, 1e-14);
  }
}

TEST(Modules, AttentionStaysWithinEachGraph) {
  const GraphInstance g = small_graph(5, 3, 23);
  const GraphInstance h = small_graph(4, 3, 24);
  Rng rng = make_rng(25);
  for (ModuleKind kind : {ModuleKind::FullAttention, ModuleKind::LowRankAttention}) {
    const ParamGroup p = init_module(kind, 3, rng);
    const Tensor alone = module_x(kind, p, make_batch({&g}), g.node_features, g.edge_features);
    const GraphBatch both = make_batch({&g, &h});
    const Tensor joint = module_x(kind, p, both, both.node_features, both.edge_features);
    for (std::size_t i = 0; i < alone.numel(); ++i) EXPECT_NEAR(joint.data[i], alone.data[i], 1e-14);
  }
}

TEST(Fusion, SingleModuleFeedsMlpDirectly) {
  Tape t;
  Binder bind(t, false);
  Rng rng = make_rng(31);
  const ParamGroup fusion = init_fusion(4, rng);
  Var x = bind.constant(random_tensor(5, 4, rng));
  Var e = bind.constant(random_tensor(3, 4, rng));
  Var y = bind.constant(random_tensor(5, 4, rng));
  Var ye = bind.constant(random_tensor(3, 4, rng));
  const ModuleOutput out = fuse_layer({{y, ye}}, {}, fusion, bind, x, e);
  expect_close(out.x.value(), fusion_mlp(bind, fusion, y).value(), 0.0);
  EXPECT_EQ(out.e.value(), ye.value());
}

TEST(Fusion, NothingSelectedReducesToMlpOfInput) {
  Tape t;
  Binder bind(t, false);
  Rng rng = make_rng(32);
  const ParamGroup fusion = init_fusion(4, rng);
  Var x = bind.constant(random_tensor(5, 4, rng));
  Var e = bind.constant(random_tensor(3, 4, rng));
  const ModuleOutput out = fuse_layer({}, {}, fusion, bind, x, e);
  expect_close(out.x.value(), fusion_mlp(bind, fusion, x).value(), 0.0);
  EXPECT_EQ(out.e.value(), e.value());
}

TEST(Fusion, DuplicatedOutputsAreIdempotentAndGroupsAdd) {
  Tape t;
  Binder bind(t, false);
  Rng rng = make_rng(33);
  const ParamGroup fusion = init_fusion(4, rng);
  Var x = bind.constant(random_tensor(5, 4, rng));
  Var e = bind.constant(random_tensor(3, 4, rng));
  Var y = bind.constant(random_tensor(5, 4, rng));
  Var z = bind.constant(random_tensor(5, 4, rng));
  const ModuleOutput one = fuse_layer({{y, e}}, {}, fusion, bind, x, e);
  const ModuleOutput two = fuse_layer({{y, e}, {y, e}}, {}, fusion, bind, x, e);
  expect_close(one.x.value(), two.x.value(), 1e-15);
  const ModuleOutput mixed = fuse_layer({{y, e}}, {z}, fusion, bind, x, e);
  expect_close(mixed.x.value(), fusion_mlp(bind, fusion, add(y, z)).value(), 1e-15);
}

TEST(Fusion, RejectsMismatchedModuleOutput) {
  Tape t;
  Binder bind(t, false);
  Rng rng = make_rng(34);
  const ParamGroup fusion = init_fusion(4, rng);
  Var x = bind.constant(random_tensor(5, 4, rng));
  Var e = bind.constant(random_tensor(3, 4, rng));
  Var bad = bind.constant(random_tensor(4, 4, rng));
  EXPECT_THROW(fuse_layer({}, {bad}, fusion, bind, x, e), ShapeError);
}
