#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "traceflow/rng.hpp"

namespace traceflow {

/// Linear-interpolation quantile (R-7) over an unsorted copy.
inline double quantile(std::vector<double> values, double p) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double position = p * static_cast<double>(values.size() - 1);
  const auto lower = static_cast<std::size_t>(position);
  if (lower + 1 >= values.size()) return values.back();
  const double fraction = position - static_cast<double>(lower);
  return values[lower] + fraction * (values[lower + 1] - values[lower]);
}

inline double mean_of(const std::vector<double>& values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
}

inline double stddev_of(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const double mean = mean_of(values);
  double variance = 0.0;
  for (double v : values) variance += (v - mean) * (v - mean);
  return std::sqrt(variance / static_cast<double>(values.size()));
}

inline double logsumexp(const std::vector<double>& values) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : values) peak = std::max(peak, v);
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - peak);
  return peak + std::log(sum);
}

/// Systematic resampling: n indices drawn proportionally to the weights
/// with a single uniform offset. Deterministic given the rng state.
inline std::vector<std::size_t> systematic_resample(
    const std::vector<double>& weights, std::size_t n, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<std::size_t> picks;
  if (weights.empty() || total <= 0.0 || n == 0) return picks;
  picks.reserve(n);
  const double step = total / static_cast<double>(n);
  double position = rng.uniform() * step;
  double cumulative = 0.0;
  std::size_t index = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = position + static_cast<double>(i) * step;
    while (index + 1 < weights.size() && cumulative + weights[index] < target) {
      cumulative += weights[index];
      ++index;
    }
    picks.push_back(index);
  }
  return picks;
}

}  // namespace traceflow
