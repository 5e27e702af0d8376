#include <algorithm>
#include <cmath>

#include "test_util.hpp"

using namespace gcnas;

namespace {

// Textbook tau-b from explicit pair counts.
double tau_b_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long conc = 0, disc = 0, tie_x = 0, tie_y = 0, pairs = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      ++pairs;
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0) ++tie_x;
      if (dy == 0) ++tie_y;
      if (dx * dy > 0) ++conc;
      if (dx * dy < 0) ++disc;
    }
  const double den = std::sqrt(static_cast<double>(pairs - tie_x) * static_cast<double>(pairs - tie_y));
  return den > 0 ? static_cast<double>(conc - disc) / den : 0.0;
}

// Rank by counting: rank(v_i) = #{v_j < v_i} + (#{v_j == v_i} + 1) / 2.
std::vector<double> count_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      less += w < v[i];
      equal += w == v[i];
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

double rho_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = count_ranks(x), ry = count_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i] / n, my += ry[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST(RankStats, KnownValues) {
  EXPECT_NEAR(kendall_tau({1, 2, 3, 4}, {2, 1, 3, 4}), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(spearman_rho({1, 2, 3}, {1, 3, 2}), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(kendall_tau({1, 2, 3}, {1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman_rho({4, 5, 6, 7}, {0.1, 0.2, 0.3, 0.4}), 1.0, 1e-15);
  EXPECT_NEAR(spearman_rho({1, 2, 3, 4}, {8, 6, 4, 2}), -1.0, 1e-15);
}

TEST(RankStats, TiesUseAverageRanks) {
  EXPECT_EQ(average_ranks({10, 20, 10, 30}), (std::vector<double>{1.5, 3, 1.5, 4}));
  // tau-b with one tie in x: S = 5, n0 = 6, tx = 1 → 5 / sqrt(5 · 6).
  EXPECT_NEAR(kendall_tau({1, 1, 2, 3}, {1, 2, 3, 4}), 5.0 / std::sqrt(30.0), 1e-15);
}

TEST(RankStats, InvalidInputs) {
  EXPECT_THROW(kendall_tau({1, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(spearman_rho({1}, {1}), std::invalid_argument);
  EXPECT_THROW(spearman_rho({1, 1, 1}, {1, 2, 3}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(kendall_tau({1, 1, 1}, {1, 2, 3}), 0.0);
}

TEST(RankStats, MatchBruteForceOraclesOnRandomLists) {
  Rng rng = make_rng(61);
  std::uniform_int_distribution<int> len(3, 30), level(0, 6);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = len(rng);
    std::vector<double> x(n), y(n);
    const bool ties = trial % 2 == 0;
    for (int i = 0; i < n; ++i) {
      x[i] = ties ? level(rng) : tu::random_tensor(1, 1, rng).item();
      y[i] = ties ? level(rng) : tu::random_tensor(1, 1, rng).item();
    }
    ASSERT_NEAR(kendall_tau(x, y), tau_b_oracle(x, y), 1e-12) << "trial " << trial;
    const auto rx = count_ranks(x), ry = count_ranks(y);
    const bool constant = std::all_of(rx.begin(), rx.end(), [&](double r) { return r == rx[0]; }) ||
                          std::all_of(ry.begin(), ry.end(), [&](double r) { return r == ry[0]; });
    if (!constant) {
      ASSERT_NEAR(spearman_rho(x, y), rho_oracle(x, y), 1e-12) << "trial " << trial;
    }
    ASSERT_EQ(average_ranks(x), rx);
  }
}

TEST(RankStats, MeanStd) {
  const MeanStd m = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(m.mean, 5.0);
  EXPECT_NEAR(m.std, std::sqrt(32.0 / 7.0), 1e-15);
  EXPECT_DOUBLE_EQ(mean_std({3}).std, 0.0);
}
