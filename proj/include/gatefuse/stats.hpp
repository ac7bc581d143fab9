#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "gatefuse/errors.hpp"

namespace gatefuse {

/// 1-based ranks with ties given the average of the positions they span.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

struct TestResult {
  double statistic = 0;
  double p = 1;
};

/// H statistic with tie correction; p from the chi-square(k-1) upper tail.
inline TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw std::invalid_argument("kruskal_wallis: needs at least 2 groups");
  std::vector<double> all;
  for (const auto& g : groups) {
    if (g.empty()) throw std::invalid_argument("kruskal_wallis: empty group");
    for (double v : g) {
      if (!std::isfinite(v)) throw std::invalid_argument("kruskal_wallis: non-finite value");
      all.push_back(v);
    }
  }
  const double n = static_cast<double>(all.size());
  if (all.size() < 3) throw std::invalid_argument("kruskal_wallis: needs N >= 3");
  const auto ranks = average_ranks(all);

  double h = 0;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    const double sum = std::accumulate(ranks.begin() + static_cast<std::ptrdiff_t>(offset),
                                       ranks.begin() + static_cast<std::ptrdiff_t>(offset + g.size()), 0.0);
    h += sum * sum / static_cast<double>(g.size());
    offset += g.size();
  }
  h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);

  auto sorted = all;
  std::sort(sorted.begin(), sorted.end());
  double ties = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  const double correction = 1.0 - ties / (n * n * n - n);
  if (correction <= 0) throw DegenerateError("kruskal_wallis: all values are identical");
  h /= correction;
  h = std::max(h, 0.0);  // rounding can leave -1e-16 for identical groups

  const boost::math::chi_squared chi(static_cast<double>(groups.size() - 1));
  return {h, boost::math::cdf(boost::math::complement(chi, h))};
}

/// Pearson correlation of average ranks; two-sided p from the t
/// approximation with n-2 degrees of freedom.
inline TestResult spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("spearman: needs n >= 3");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) throw DegenerateError("spearman: zero rank variance, correlation undefined");
  const double rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  if (std::abs(rho) == 1.0) return {rho, 0.0};
  const double df = n - 2.0;
  const double t = rho * std::sqrt(df / (1.0 - rho * rho));
  const boost::math::students_t dist(df);
  return {rho, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)))};
}

}  // namespace gatefuse
