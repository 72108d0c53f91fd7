#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "comma/errors.hpp"

namespace comma {

inline double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw StatisticsError("mean of an empty sample");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline double stddev_of(std::span<const double> xs) {
  const double m = mean_of(xs);
  if (xs.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

/// Ranks starting at 1; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw StatisticsError("correlation: samples differ in length");
  if (xs.size() < 3) throw StatisticsError("correlation needs at least 3 points");
  const double mx = mean_of(xs), my = mean_of(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw StatisticsError("correlation: a sample has zero variance");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

struct Correlation {
  double pearson = 0.0;
  double spearman = 0.0;
};

/// Pearson and Spearman coefficients. Exact affine relations are snapped to
/// +-1 so that the identity holds without rounding noise.
inline Correlation correlation(std::span<const double> xs, std::span<const double> ys) {
  Correlation c;
  c.pearson = pearson(xs, ys);
  auto rx = average_ranks(xs);
  auto ry = average_ranks(ys);
  c.spearman = pearson(rx, ry);
  if (std::abs(std::abs(c.pearson) - 1.0) < 1e-12) c.pearson = c.pearson > 0 ? 1.0 : -1.0;
  if (std::abs(std::abs(c.spearman) - 1.0) < 1e-12) c.spearman = c.spearman > 0 ? 1.0 : -1.0;
  return c;
}

}  // namespace comma
