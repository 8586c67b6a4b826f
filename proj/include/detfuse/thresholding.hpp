/* Copyright 2026 The detfuse Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/geometry.hpp"

namespace detfuse {

inline constexpr std::size_t kDefaultHistogramBins = 256;

/// Score histogram over [0, 1]. Bin b covers [b/n, (b+1)/n); the last bin is
/// closed at 1.
struct ScoreHistogram {
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  std::size_t bin_count() const { return counts.size(); }
  double bin_width() const { return 1.0 / static_cast<double>(counts.size()); }
  double bin_center(std::size_t b) const {
    return (static_cast<double>(b) + 0.5) * bin_width();
  }

  static ScoreHistogram FromCounts(std::vector<std::uint64_t> counts) {
    if (counts.size() < 2) throw ConfigError("histogram needs >= 2 bins");
    ScoreHistogram h;
    h.counts = std::move(counts);
    for (auto c : h.counts) h.total += c;
    return h;
  }

  void Add(double score) {
    if (!(score >= 0.0 && score <= 1.0)) {
      throw ValidationError("score " + std::to_string(score) +
                            " outside [0, 1]");
    }
    auto b = static_cast<std::size_t>(
        std::floor(score * static_cast<double>(counts.size())));
    if (b >= counts.size()) b = counts.size() - 1;
    ++counts[b];
    ++total;
  }

  /// Counts are additive, so shards built separately can be merged.
  void Merge(const ScoreHistogram& other) {
    if (other.bin_count() != bin_count()) {
      throw ConfigError("cannot merge histograms with different bin counts");
    }
    for (std::size_t b = 0; b < counts.size(); ++b) counts[b] += other.counts[b];
    total += other.total;
  }
};

inline ScoreHistogram build_histogram(std::span<const double> scores,
                                      std::size_t bin_count = kDefaultHistogramBins) {
  if (bin_count < 2) throw ConfigError("bin_count must be >= 2");
  ScoreHistogram h;
  h.counts.assign(bin_count, 0);
  for (double s : scores) h.Add(s);
  return h;
}

inline ScoreHistogram build_histogram(std::span<const Detection> dets,
                                      std::size_t bin_count = kDefaultHistogramBins) {
  std::vector<double> scores;
  scores.reserve(dets.size());
  for (const auto& d : dets) scores.push_back(d.score);
  return build_histogram(scores, bin_count);
}

struct OtsuResult {
  double threshold = 0.0;
  double between_class_variance = 0.0;
  /// Lowest and highest bin boundaries attaining the maximum.
  double tied_low = 0.0;
  double tied_high = 0.0;
};

/// Relative tolerance under which two between-class variances count as tied.
inline constexpr double kOtsuTieTolerance = 1e-10;

/// Otsu's method over bin boundaries k/n, k = 1..n-1. Bins below k form the
/// low class, bins at or above k the high class; each bin contributes its
/// center as the score value. The returned threshold is the midpoint of the
/// lowest and highest maximizing boundaries.
inline OtsuResult otsu_threshold(const ScoreHistogram& h) {
  const std::size_t n = h.bin_count();
  std::size_t occupied = 0;
  for (auto c : h.counts) occupied += (c > 0);
  if (h.total < 2 || occupied < 2) {
    throw DegenerateError(
        "otsu needs at least two occupied histogram bins (got " +
        std::to_string(occupied) + ")");
  }

  const double total = static_cast<double>(h.total);
  double total_sum = 0;
  for (std::size_t b = 0; b < n; ++b) {
    total_sum += static_cast<double>(h.counts[b]) * h.bin_center(b);
  }

  std::vector<double> variance(n, 0.0);
  double w0_count = 0, sum0 = 0, best = 0;
  for (std::size_t k = 1; k < n; ++k) {
    w0_count += static_cast<double>(h.counts[k - 1]);
    sum0 += static_cast<double>(h.counts[k - 1]) * h.bin_center(k - 1);
    const double w1_count = total - w0_count;
    if (w0_count <= 0 || w1_count <= 0) continue;
    const double w0 = w0_count / total;
    const double w1 = w1_count / total;
    const double mu0 = sum0 / w0_count;
    const double mu1 = (total_sum - sum0) / w1_count;
    variance[k] = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    best = std::max(best, variance[k]);
  }

  std::size_t lo = 0, hi = 0;
  for (std::size_t k = 1; k < n; ++k) {
    if (variance[k] >= best * (1.0 - kOtsuTieTolerance)) {
      if (lo == 0) lo = k;
      hi = k;
    }
  }
  OtsuResult r;
  r.between_class_variance = best;
  r.tied_low = static_cast<double>(lo) * h.bin_width();
  r.tied_high = static_cast<double>(hi) * h.bin_width();
  r.threshold = 0.5 * (r.tied_low + r.tied_high);
  return r;
}

/// Keeps detections with score >= t, preserving order.
inline std::vector<Detection> filter_by_threshold(std::span<const Detection> dets,
                                                  double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("threshold " + std::to_string(t) + " outside [0, 1]");
  }
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (d.score >= t) out.push_back(d);
  }
  return out;
}

}  // namespace detfuse
