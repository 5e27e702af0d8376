#include <cmath>
#include <functional>

#include "test_util.hpp"

using namespace gcnas;
using gcnas::tu::random_tensor;

namespace {

Var leaf(Tape& t, Tensor v, bool grad = true) { return {&t, t.leaf(std::move(v), grad)}; }

// Weighted sum against a fixed random tensor, so every output element
// carries a distinct upstream gradient.
Var probe_loss(Var y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 99);
  Tensor r = random_tensor(y.value().rows(), y.value().cols(), rng);
  Var rv{y.tape, y.tape->constant(r)};
  return sum(mul(y, rv));
}

}  // namespace

TEST(Tensor, IdentityMatmul) {
  const Tensor out = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(out.shape, (Shape{2, 1}));
  EXPECT_EQ(out.data, (std::vector<double>{3, 4}));
}

TEST(Tensor, MatmulTransposeFlagsMatchExplicitTranspose) {
  Rng rng = make_rng(5);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 5, rng), c = random_tensor(5, 4, rng);
  const Tensor at_b = matmul(a, b, true, false);
  const Tensor ref = matmul(transpose(a), b);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(at_b.data[i], ref.data[i], 1e-14);
  const Tensor a_ct = matmul(a, c, false, true);
  const Tensor ref2 = matmul(a, transpose(c));
  for (std::size_t i = 0; i < ref2.numel(); ++i) EXPECT_NEAR(a_ct.data[i], ref2.data[i], 1e-14);
  const Tensor both = matmul(c, b, true, true);
  const Tensor ref3 = matmul(transpose(c), transpose(b));
  for (std::size_t i = 0; i < ref3.numel(); ++i) EXPECT_NEAR(both.data[i], ref3.data[i], 1e-14);
}

TEST(Tensor, MatmulShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3)), ShapeError);
}

TEST(Autodiff, ReluAndSoftmaxValues) {
  Tape t;
  Var x = leaf(t, Tensor::matrix(1, 3, {-1, 2, 0}));
  EXPECT_EQ(relu(x).value().data, (std::vector<double>{0, 2, 0}));
  Var z = leaf(t, Tensor::matrix(1, 2, {0, 0}));
  EXPECT_EQ(row_softmax(z).value().data, (std::vector<double>{0.5, 0.5}));
}

TEST(Autodiff, SquareSumGradient) {
  Tape t;
  Var x = leaf(t, Tensor::matrix(1, 3, {1, 2, 3}));
  Var loss = sum(mul(x, x));
  const GradStore g = backward(t, loss.id);
  EXPECT_EQ(g.at(x.id).data, (std::vector<double>{2, 4, 6}));
}

TEST(Autodiff, CrossEntropyGradientAtZeroLogits) {
  Tape t;
  Var z = leaf(t, Tensor::matrix(1, 2, {0, 0}));
  Var loss = cross_entropy(z, make_index({0}));
  EXPECT_NEAR(loss.value().item(), std::log(2.0), 1e-15);
  const GradStore g = backward(t, loss.id);
  // softmax(z) - onehot = [0.5 - 1, 0.5]
  EXPECT_NEAR(g.at(z.id).data[0], -0.5, 1e-15);
  EXPECT_NEAR(g.at(z.id).data[1], 0.5, 1e-15);
  const double fd = finite_diff_check([](Tape&, Var v) { return cross_entropy(v, make_index({0})); },
                                      Tensor::matrix(1, 2, {0, 0}), 1e-5);
  EXPECT_LT(fd, 1e-8);
}

TEST(Autodiff, CrossEntropyMatchesAnalyticGradientOnRandomLogits) {
  Rng rng = make_rng(17);
  const Tensor z = random_tensor(5, 4, rng, -3, 3);
  auto labels = make_index({0, 3, 1, 1, 2});
  Tape t;
  Var zv = leaf(t, z);
  const GradStore g = backward(t, cross_entropy(zv, labels).id);
  for (std::size_t r = 0; r < 5; ++r) {
    double mx = -1e300, zs = 0.0;
    for (std::size_t c = 0; c < 4; ++c) mx = std::max(mx, z.at(r, c));
    for (std::size_t c = 0; c < 4; ++c) zs += std::exp(z.at(r, c) - mx);
    for (std::size_t c = 0; c < 4; ++c) {
      const double p = std::exp(z.at(r, c) - mx) / zs;
      const double expect = (p - (static_cast<std::int32_t>(c) == (*labels)[r] ? 1.0 : 0.0)) / 5.0;
      EXPECT_NEAR(g.at(zv.id).at(r, c), expect, 1e-15);
    }
  }
}

TEST(Autodiff, FiniteDiffCheckExamples) {
  Rng rng = make_rng(3);
  EXPECT_LT(finite_diff_check([](Tape&, Var v) { return sum(v); }, random_tensor(3, 4, rng), 1e-5), 1e-10);

  Tensor away = random_tensor(4, 4, rng);
  for (double& v : away.data) v = v >= 0 ? v + 0.1 : v - 0.1;
  EXPECT_LT(finite_diff_check([](Tape&, Var v) { return sum(relu(v)); }, away, 1e-5), 1e-6);
}

TEST(Autodiff, FiniteDiffRandomMlp) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, 1);
    const Tensor w1 = random_tensor(4, 5, rng), w2 = random_tensor(5, 3, rng), b1 = random_tensor(1, 5, rng);
    auto f = [&](Tape& t, Var x) {
      Var h = relu(add(matmul(x, Var{&t, t.constant(w1)}), Var{&t, t.constant(b1)}));
      return cross_entropy(matmul(h, Var{&t, t.constant(w2)}), make_index({0, 2, 1}));
    };
    EXPECT_LT(finite_diff_check(f, random_tensor(3, 4, rng), 1e-5), 1e-4) << "seed " << seed;
  }
}

// Every op's backward against central differences.
class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const std::string op = GetParam();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = make_rng(seed, 2);
    const Tensor other = random_tensor(4, 3, rng);
    const Tensor row = random_tensor(1, 3, rng), col = random_tensor(4, 1, rng), scal = random_tensor(1, 1, rng);
    const Tensor sq = random_tensor(3, 5, rng);
    std::function<Var(Tape&, Var)> body;
    auto c = [](Tape& t, const Tensor& v) { return Var{&t, t.constant(v)}; };
    if (op == "matmul") body = [&](Tape& t, Var x) { return matmul(x, c(t, sq)); };
    if (op == "matmul_rhs") body = [&](Tape& t, Var x) { return matmul(c(t, transpose(sq)), transpose(x)); };
    if (op == "add") body = [&](Tape& t, Var x) { return add(x, c(t, other)); };
    if (op == "add_row") body = [&](Tape& t, Var x) { return add(c(t, other), gather_rows(x, make_index({1}))); };
    if (op == "add_col") body = [&](Tape& t, Var x) { return add(c(t, other), sum(x, 1)); };
    if (op == "add_scalar") body = [&](Tape& t, Var x) { return add(x, c(t, scal)); };
    if (op == "sub") body = [&](Tape& t, Var x) { return sub(c(t, other), x); };
    if (op == "mul") body = [&](Tape&, Var x) { return mul(x, x); };
    if (op == "mul_row") body = [&](Tape& t, Var x) { return mul(x, c(t, row)); };
    if (op == "mul_by_scalar_var") body = [&](Tape& t, Var x) { return mul(c(t, other), sum(x)); };
    if (op == "scale") body = [&](Tape&, Var x) { return scale(x, -2.5); };
    if (op == "relu") body = [&](Tape&, Var x) { return relu(x); };
    if (op == "row_softmax") body = [&](Tape&, Var x) { return row_softmax(x); };
    if (op == "transpose") body = [&](Tape&, Var x) { return transpose(x); };
    if (op == "sum0") body = [&](Tape&, Var x) { return sum(x, 0); };
    if (op == "mean1") body = [&](Tape&, Var x) { return mean(x, 1); };
    if (op == "mean_all") body = [&](Tape&, Var x) { return mean(x); };
    if (op == "concat0") body = [&](Tape& t, Var x) { return concat({x, c(t, other), x}, 0); };
    if (op == "concat1") body = [&](Tape& t, Var x) { return concat({c(t, other), x}, 1); };
    if (op == "gather") body = [&](Tape&, Var x) { return gather_rows(x, make_index({3, 0, 3, 1})); };
    if (op == "scatter") body = [&](Tape&, Var x) { return scatter_add_rows(x, make_index({2, 0, 2, 1}), 3); };
    if (op == "segment_softmax")
      body = [&](Tape&, Var x) { return segment_softmax(x, make_index({0, 1, 0, 1}), 2); };
    if (op == "cross_entropy")
      body = [&](Tape&, Var x) { return cross_entropy(x, make_index({0, 2, 1, 2})); };
    ASSERT_TRUE(body) << op;
    Tensor x = random_tensor(4, 3, rng);
    if (op == "relu")
      for (double& v : x.data) v = v >= 0 ? v + 0.1 : v - 0.1;
    auto f = [&](Tape& t, Var v) { return probe_loss(body(t, v), seed); };
    EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-6) << op << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Values("matmul", "matmul_rhs", "add", "add_row", "add_col", "add_scalar", "sub",
                                           "mul", "mul_row", "mul_by_scalar_var", "scale", "relu", "row_softmax",
                                           "transpose", "sum0", "mean1", "mean_all", "concat0", "concat1", "gather",
                                           "scatter", "segment_softmax", "cross_entropy"));

TEST(Autodiff, ShapeErrorsNameTheOp) {
  Tape t;
  Var a = leaf(t, Tensor::matrix(2, 3)), b = leaf(t, Tensor::matrix(3, 2));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos) << e.what();
  }
  EXPECT_THROW(gather_rows(a, make_index({5})), IndexError);
  EXPECT_THROW(scatter_add_rows(a, make_index({0, 9}), 3), IndexError);
}

TEST(Autodiff, BackwardRejectsNonScalarLoss) {
  Tape t;
  Var a = leaf(t, Tensor::matrix(2, 2, 1.0));
  EXPECT_THROW(backward(t, relu(a).id), BackwardError);
}

TEST(Autodiff, GradientsMatchNodeShapesAndTapeIsTopological) {
  Rng rng = make_rng(8);
  Tape t;
  Var x = leaf(t, random_tensor(5, 4, rng));
  Var w = leaf(t, random_tensor(4, 4, rng));
  Var h = row_softmax(relu(matmul(x, w)));
  Var s = scatter_add_rows(gather_rows(h, make_index({0, 1, 2, 3, 4, 0})), make_index({1, 2, 3, 4, 0, 2}), 5);
  Var loss = cross_entropy(add(s, h), make_index({0, 1, 2, 3, 0}));
  const GradStore g = backward(t, loss.id);
  for (std::size_t v = 0; v < t.size(); ++v) {
    for (NodeId u : t.node(static_cast<NodeId>(v)).inputs) EXPECT_LT(u, static_cast<NodeId>(v));
    if (const Tensor* gv = g.find(static_cast<NodeId>(v))) {
      EXPECT_EQ(gv->shape, t.value(static_cast<NodeId>(v)).shape);
    }
  }
}

TEST(Vjp, LinearScalarMap) {
  Tape t;
  Var b = leaf(t, Tensor::scalar(1.7));
  Var s = scale(b, 3.0);
  const VjpContribution c = vjp_contribution(t, s.id, b.id, Tensor::scalar(1.0));
  EXPECT_TRUE(c.has_path);
  EXPECT_DOUBLE_EQ(c.grad.item(), 3.0);
}

TEST(Vjp, ContributionsSumToBackwardGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, 4);
    Tape t;
    Var w0 = leaf(t, random_tensor(3, 3, rng));
    Var b = relu(matmul(leaf(t, random_tensor(4, 3, rng)), w0));
    Var s1 = matmul(b, leaf(t, random_tensor(3, 3, rng)));
    Var s2 = row_softmax(matmul(b, leaf(t, random_tensor(3, 3, rng))));
    Var loss = cross_entropy(add(relu(s1), s2), make_index({0, 1, 2, 0}));
    const GradStore g = backward(t, loss.id);
    const VjpContribution c1 = vjp_contribution(t, s1.id, b.id, g.at(s1.id));
    const VjpContribution c2 = vjp_contribution(t, s2.id, b.id, g.at(s2.id));
    const Tensor& total = g.at(b.id);
    for (std::size_t i = 0; i < total.numel(); ++i)
      EXPECT_NEAR(c1.grad.data[i] + c2.grad.data[i], total.data[i], 1e-12 * std::max(1.0, std::abs(total.data[i])));
  }
}

TEST(Vjp, ExcludesPathsThatBypassTheSource) {
  // s = 2b, loss = sum(s) + sum(5b): the contribution through s is 2 only.
  Tape t;
  Var b = leaf(t, Tensor::matrix(1, 2, {1.0, -1.0}));
  Var s = scale(b, 2.0);
  Var loss = add(sum(s), sum(scale(b, 5.0)));
  const GradStore g = backward(t, loss.id);
  const VjpContribution c = vjp_contribution(t, s.id, b.id, g.at(s.id));
  EXPECT_EQ(c.grad.data, (std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(g.at(b.id).data, (std::vector<double>{7.0, 7.0}));
}

TEST(Vjp, DisconnectedBoundaryGivesZero) {
  Tape t;
  Var b = leaf(t, Tensor::matrix(2, 2, 1.0));
  Var other = leaf(t, Tensor::matrix(2, 2, 2.0));
  Var s = relu(other);
  const VjpContribution c = vjp_contribution(t, s.id, b.id, Tensor::matrix(2, 2, 1.0));
  EXPECT_FALSE(c.has_path);
  EXPECT_EQ(c.grad.data, std::vector<double>(4, 0.0));
  EXPECT_THROW(vjp_contribution(t, s.id, b.id, Tensor::matrix(1, 2)), ShapeError);
}
