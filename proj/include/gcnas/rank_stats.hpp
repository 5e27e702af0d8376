#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcnas {

namespace detail {
inline void check_pair(const char* what, const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  if (x.size() < 2) throw std::invalid_argument(std::string(what) + ": need at least 2 observations");
}
inline int sign(double v) { return (v > 0.0) - (v < 0.0); }
}  // namespace detail

// Kendall's tau-b: (concordant - discordant) / sqrt((n0 - tx)(n0 - ty)).
// Returns 0 when either list is constant.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_pair("kendall_tau", x, y);
  const std::size_t n = x.size();
  double s = 0.0, tx = 0.0, ty = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int a = detail::sign(x[i] - x[j]);
      const int b = detail::sign(y[i] - y[j]);
      if (a == 0) tx += 1.0;
      if (b == 0) ty += 1.0;
      s += a * b;
    }
  const double n0 = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const double den = std::sqrt((n0 - tx) * (n0 - ty));
  return den > 0.0 ? s / den : 0.0;
}

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_pair("pearson", x, y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("correlation undefined: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

// Pearson correlation of average ranks.
inline double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  detail::check_pair("spearman_rho", x, y);
  return pearson(average_ranks(x), average_ranks(y));
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

}  // namespace gcnas
