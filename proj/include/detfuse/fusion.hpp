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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/geometry.hpp"

namespace detfuse {

enum class FusionMethod { kWbf, kNms, kSoftNms, kNmw };

inline std::string_view to_string(FusionMethod m) {
  switch (m) {
    case FusionMethod::kWbf: return "wbf";
    case FusionMethod::kNms: return "nms";
    case FusionMethod::kSoftNms: return "soft_nms";
    case FusionMethod::kNmw: return "nmw";
  }
  return "unknown";
}

inline FusionMethod parse_fusion_method(std::string_view name) {
  if (name == "wbf") return FusionMethod::kWbf;
  if (name == "nms") return FusionMethod::kNms;
  if (name == "soft_nms" || name == "soft-nms" || name == "softnms") {
    return FusionMethod::kSoftNms;
  }
  if (name == "nmw") return FusionMethod::kNmw;
  throw ConfigError("unknown fusion method '" + std::string(name) +
                    "' (expected wbf, nms, soft_nms or nmw)");
}

inline constexpr double kDefaultFusionIou = 0.55;
inline constexpr double kDefaultSoftNmsFloor = 0.001;

struct FusionParams {
  double iou_threshold = kDefaultFusionIou;
  FusionMethod method = FusionMethod::kWbf;
  /// Soft-NMS drops boxes whose decayed score falls below this.
  double soft_nms_floor = kDefaultSoftNmsFloor;
  std::optional<std::map<std::string, double>> source_weights;

  void Validate() const {
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
      throw ConfigError("fusion iou_threshold " +
                        std::to_string(iou_threshold) + " must lie in (0, 1)");
    }
    if (!(soft_nms_floor >= 0.0 && soft_nms_floor < 1.0)) {
      throw ConfigError("soft_nms_floor must lie in [0, 1)");
    }
    if (source_weights) {
      for (const auto& [id, w] : *source_weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
          throw ConfigError("source weight for '" + id + "' must be positive");
        }
      }
    }
  }
};

/// Indices into the fused input. members.front() is the seed, the
/// highest-priority member at grouping time.
struct BoxCluster {
  std::vector<std::size_t> members;
  std::size_t seed() const { return members.front(); }
};

/// Fused detections plus, for each output, the input indices it came from.
struct FusionResult {
  std::vector<Detection> detections;
  std::vector<std::vector<std::size_t>> members;
};

/// Multiplies each score by its source's weight, clamped to [0, 1].
inline std::vector<Detection> apply_source_weights(
    std::span<const Detection> dets,
    const std::map<std::string, double>& weights) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    auto it = weights.find(d.source_id);
    if (it == weights.end()) {
      throw ConfigError("no weight configured for source '" + d.source_id +
                        "'");
    }
    Detection w = d;
    w.score = std::clamp(d.score * it->second, 0.0, 1.0);
    out.push_back(std::move(w));
  }
  return out;
}

namespace detail {

inline void check_fusion_input(std::span<const Detection> dets) {
  for (std::size_t i = 0; i < dets.size(); ++i) {
    dets[i].Validate();
    if (dets[i].image_id != dets.front().image_id) {
      throw ValidationError("fusion input mixes images '" +
                            dets.front().image_id + "' and '" +
                            dets[i].image_id + "'");
    }
  }
}

inline std::vector<std::size_t> priority_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return priority_before(dets[a], dets[b]);
  });
  return order;
}

/// Shared preamble of every kernel: validate, then weight if configured.
inline std::vector<Detection> prepare(std::span<const Detection> dets,
                                      const FusionParams& params) {
  params.Validate();
  check_fusion_input(dets);
  if (params.source_weights) {
    return apply_source_weights(dets, *params.source_weights);
  }
  return {dets.begin(), dets.end()};
}

}  // namespace detail

/// Greedy single-pass clustering: the highest-priority unclustered box seeds
/// a cluster that absorbs every unclustered same-label box with IoU > T
/// against the seed.
inline std::vector<BoxCluster> cluster_boxes(std::span<const Detection> dets,
                                             double iou_threshold) {
  const auto order = detail::priority_order(dets);
  std::vector<bool> taken(dets.size(), false);
  std::vector<BoxCluster> clusters;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t seed = order[oi];
    if (taken[seed]) continue;
    taken[seed] = true;
    BoxCluster c;
    c.members.push_back(seed);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (taken[j] || dets[j].label != dets[seed].label) continue;
      if (iou(dets[seed].box, dets[j].box) > iou_threshold) {
        taken[j] = true;
        c.members.push_back(j);
      }
    }
    clusters.push_back(std::move(c));
  }
  return clusters;
}

namespace detail {

template <typename WeightFn>
Box weighted_mean_box(std::span<const Detection> dets, const BoxCluster& c,
                      WeightFn weight) {
  std::vector<double> w(c.members.size());
  double sw = 0;
  for (std::size_t k = 0; k < c.members.size(); ++k) {
    w[k] = weight(c.members[k]);
    sw += w[k];
  }
  if (!(sw > 0)) {
    // All-zero weights: fall back to the unweighted mean.
    std::fill(w.begin(), w.end(), 1.0);
    sw = static_cast<double>(w.size());
  }
  double acc[4] = {0, 0, 0, 0};
  double lo[4], hi[4];
  std::fill(std::begin(lo), std::end(lo), std::numeric_limits<double>::infinity());
  std::fill(std::begin(hi), std::end(hi), -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < c.members.size(); ++k) {
    const Box& b = dets[c.members[k]].box;
    const double v[4] = {b.x1(), b.y1(), b.x2(), b.y2()};
    for (int j = 0; j < 4; ++j) {
      acc[j] += w[k] * v[j];
      lo[j] = std::min(lo[j], v[j]);
      hi[j] = std::max(hi[j], v[j]);
    }
  }
  // Rounding must not push a mean outside the members' range.
  double m[4];
  for (int j = 0; j < 4; ++j) m[j] = std::clamp(acc[j] / sw, lo[j], hi[j]);
  return Box(m[0], m[1], m[2], m[3]);
}

template <typename WeightFn>
FusionResult fuse_clusters(std::span<const Detection> dets, double T,
                           WeightFn weight_for) {
  FusionResult out;
  for (const auto& c : cluster_boxes(dets, T)) {
    Detection fused = dets[c.seed()];
    if (c.members.size() > 1) {
      fused.box = weighted_mean_box(
          dets, c, [&](std::size_t i) { return weight_for(c, i); });
    }
    out.detections.push_back(std::move(fused));
    out.members.push_back(c.members);
  }
  return out;
}

}  // namespace detail

/// Weighted box fusion. Each cluster collapses to the score-weighted mean of
/// its member corners; score and label come from the max-score member.
inline FusionResult fuse_wbf_traced(std::span<const Detection> input,
                                    const FusionParams& params) {
  const auto dets = detail::prepare(input, params);
  return detail::fuse_clusters(
      dets, params.iou_threshold,
      [&](const BoxCluster&, std::size_t i) { return dets[i].score; });
}

/// Non-maximum weighted: like WBF, but each member's weight is
/// score * IoU(member, seed).
inline FusionResult fuse_nmw_traced(std::span<const Detection> input,
                                    const FusionParams& params) {
  const auto dets = detail::prepare(input, params);
  return detail::fuse_clusters(
      dets, params.iou_threshold, [&](const BoxCluster& c, std::size_t i) {
        return dets[i].score * iou(dets[i].box, dets[c.seed()].box);
      });
}

/// Greedy NMS. Kept boxes are unmodified (weighted) inputs.
inline FusionResult fuse_nms_traced(std::span<const Detection> input,
                                    const FusionParams& params) {
  const auto dets = detail::prepare(input, params);
  FusionResult out;
  for (const auto& c : cluster_boxes(dets, params.iou_threshold)) {
    out.detections.push_back(dets[c.seed()]);
    out.members.push_back(c.members);
  }
  return out;
}

/// Linear Soft-NMS: overlapping same-label boxes (IoU > T with the box just
/// kept) have their score scaled by (1 - IoU); boxes below the floor drop.
inline FusionResult fuse_soft_nms_traced(std::span<const Detection> input,
                                         const FusionParams& params) {
  auto work = detail::prepare(input, params);
  std::vector<std::size_t> alive(work.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});

  FusionResult out;
  while (!alive.empty()) {
    auto best_it = std::min_element(
        alive.begin(), alive.end(), [&](std::size_t a, std::size_t b) {
          return priority_before(work[a], work[b]);
        });
    const std::size_t best = *best_it;
    alive.erase(best_it);
    std::erase_if(alive, [&](std::size_t i) {
      if (work[i].label != work[best].label) return false;
      const double ov = iou(work[best].box, work[i].box);
      if (!(ov > params.iou_threshold)) return false;
      work[i].score *= (1.0 - ov);
      return work[i].score < params.soft_nms_floor;
    });
    out.detections.push_back(work[best]);
    out.members.push_back({best});
  }
  return out;
}

inline FusionResult fuse_traced(std::span<const Detection> dets,
                                const FusionParams& params) {
  switch (params.method) {
    case FusionMethod::kWbf: return fuse_wbf_traced(dets, params);
    case FusionMethod::kNms: return fuse_nms_traced(dets, params);
    case FusionMethod::kSoftNms: return fuse_soft_nms_traced(dets, params);
    case FusionMethod::kNmw: return fuse_nmw_traced(dets, params);
  }
  throw ConfigError("unhandled fusion method");
}

inline std::vector<Detection> fuse_wbf(std::span<const Detection> dets,
                                       const FusionParams& params) {
  return fuse_wbf_traced(dets, params).detections;
}
inline std::vector<Detection> fuse_nms(std::span<const Detection> dets,
                                       const FusionParams& params) {
  return fuse_nms_traced(dets, params).detections;
}
inline std::vector<Detection> fuse_soft_nms(std::span<const Detection> dets,
                                            const FusionParams& params) {
  return fuse_soft_nms_traced(dets, params).detections;
}
inline std::vector<Detection> fuse_nmw(std::span<const Detection> dets,
                                       const FusionParams& params) {
  return fuse_nmw_traced(dets, params).detections;
}
inline std::vector<Detection> fuse(std::span<const Detection> dets,
                                   const FusionParams& params) {
  return fuse_traced(dets, params).detections;
}

/// Fuses a multi-image detection list image by image. The output is grouped
/// by image_id in ascending order; members index into `dets`.
inline FusionResult fuse_per_image(std::span<const Detection> dets,
                                   const FusionParams& params) {
  std::map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    by_image[dets[i].image_id].push_back(i);
  }
  FusionResult out;
  for (const auto& [image, idx] : by_image) {
    std::vector<Detection> subset;
    subset.reserve(idx.size());
    for (std::size_t i : idx) subset.push_back(dets[i]);
    auto r = fuse_traced(subset, params);
    for (std::size_t k = 0; k < r.detections.size(); ++k) {
      out.detections.push_back(std::move(r.detections[k]));
      std::vector<std::size_t> global;
      for (std::size_t m : r.members[k]) global.push_back(idx[m]);
      out.members.push_back(std::move(global));
    }
  }
  return out;
}

}  // namespace detfuse
