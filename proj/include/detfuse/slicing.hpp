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
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/fusion.hpp"
#include "detfuse/geometry.hpp"

namespace detfuse {

/// Pixel-aligned sub-window [x0, x1) x [y0, y1) of an image.
struct SliceWindow {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  friend auto operator<=>(const SliceWindow&, const SliceWindow&) = default;
};

struct SlicePlan {
  int image_w = 0, image_h = 0;
  int slice_w = 0, slice_h = 0;
  double overlap_ratio = 0.0;
  std::vector<SliceWindow> slices;  // row-major

  bool Contains(const SliceWindow& w) const {
    for (const auto& s : slices) {
      if (s == w) return true;
    }
    return false;
  }
};

/// Round-half-up stride, never below one pixel.
inline int slice_stride(int extent, double overlap_ratio) {
  const int stride =
      static_cast<int>(std::floor(extent * (1.0 - overlap_ratio) + 0.5));
  return std::max(stride, 1);
}

/// Origins 0, s, 2s, ...; the first origin whose slice would reach past the
/// image edge is clamped to (image - slice) and ends the axis.
inline std::vector<int> slice_origins(int image, int slice, double overlap) {
  const int stride = slice_stride(slice, overlap);
  std::vector<int> origins;
  for (int o = 0;; o += stride) {
    if (o + slice >= image) {
      const int clamped = image - slice;
      if (origins.empty() || origins.back() != clamped) {
        origins.push_back(clamped);
      }
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

inline SlicePlan plan_slices(int image_w, int image_h, int slice_w, int slice_h,
                             double overlap_ratio) {
  if (image_w <= 0 || image_h <= 0) {
    throw ConfigError("image extents must be positive");
  }
  if (slice_w <= 0 || slice_h <= 0) {
    throw ConfigError("slice extents must be positive");
  }
  if (slice_w > image_w || slice_h > image_h) {
    throw ConfigError("slice " + std::to_string(slice_w) + "x" +
                      std::to_string(slice_h) + " larger than image " +
                      std::to_string(image_w) + "x" + std::to_string(image_h));
  }
  if (!(overlap_ratio >= 0.0 && overlap_ratio < 1.0)) {
    throw ConfigError("overlap_ratio must lie in [0, 1)");
  }
  SlicePlan plan{image_w, image_h, slice_w, slice_h, overlap_ratio, {}};
  const auto xs = slice_origins(image_w, slice_w, overlap_ratio);
  const auto ys = slice_origins(image_h, slice_h, overlap_ratio);
  for (int y : ys) {
    for (int x : xs) {
      plan.slices.push_back({x, y, x + slice_w, y + slice_h});
    }
  }
  return plan;
}

/// "Half the original size" per axis, rounded down to an even pixel count.
inline int half_slice_extent(int image_extent) {
  const int half = image_extent / 2;
  return std::max(half - (half % 2), 1);
}

/// Shifts slice-local detections into image coordinates.
inline std::vector<Detection> remap_to_global(std::span<const Detection> dets,
                                              const SliceWindow& slice) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    const Box& b = d.box;
    if (b.x1() < 0 || b.y1() < 0 || b.x2() > slice.width() ||
        b.y2() > slice.height()) {
      throw ValidationError(
          "detection box (" + std::to_string(b.x1()) + ", " +
          std::to_string(b.y1()) + ", " + std::to_string(b.x2()) + ", " +
          std::to_string(b.y2()) + ") lies outside its " +
          std::to_string(slice.width()) + "x" +
          std::to_string(slice.height()) + " slice");
    }
    out.push_back(translate(d, slice.x0, slice.y0));
  }
  return out;
}

/// Inverse of remap for synthetic per-slice data: each detection is copied
/// into every window that fully contains it. A box no window contains is
/// clipped to the window it overlaps most, as a sliced detector would only
/// see that part.
inline std::vector<std::pair<SliceWindow, Detection>> project_to_slices(
    std::span<const Detection> dets, const SlicePlan& plan) {
  std::vector<std::pair<SliceWindow, Detection>> out;
  for (const auto& d : dets) {
    const Box& b = d.box;
    bool any = false;
    const SliceWindow* best = nullptr;
    double best_area = 0;
    for (const auto& w : plan.slices) {
      if (b.x1() >= w.x0 && b.y1() >= w.y0 && b.x2() <= w.x1 && b.y2() <= w.y1) {
        out.emplace_back(w, translate(d, -w.x0, -w.y0));
        any = true;
        continue;
      }
      const double ix = std::min(b.x2(), double(w.x1)) - std::max(b.x1(), double(w.x0));
      const double iy = std::min(b.y2(), double(w.y1)) - std::max(b.y1(), double(w.y0));
      if (ix > 0 && iy > 0 && ix * iy > best_area) {
        best_area = ix * iy;
        best = &w;
      }
    }
    if (any || !best) continue;
    Detection c = d;
    c.box = Box(std::max(b.x1(), double(best->x0)) - best->x0,
                std::max(b.y1(), double(best->y0)) - best->y0,
                std::min(b.x2(), double(best->x1)) - best->x0,
                std::min(b.y2(), double(best->y1)) - best->y0);
    out.emplace_back(*best, std::move(c));
  }
  return out;
}

struct SliceDetections {
  SliceWindow window;
  std::vector<Detection> detections;  // slice-local coordinates
};

/// Remaps every slice to global coordinates, then merges overlap-zone
/// duplicates with the configured fusion method. Members index into the
/// concatenation of the per-slice lists in input order.
inline FusionResult aggregate_slices_traced(std::span<const SliceDetections> per_slice,
                                            const FusionParams& params) {
  std::vector<Detection> global;
  for (const auto& s : per_slice) {
    auto mapped = remap_to_global(s.detections, s.window);
    global.insert(global.end(), std::make_move_iterator(mapped.begin()),
                  std::make_move_iterator(mapped.end()));
  }
  return fuse_per_image(global, params);
}

inline std::vector<Detection> aggregate_slices(std::span<const SliceDetections> per_slice,
                                               const FusionParams& params) {
  return aggregate_slices_traced(per_slice, params).detections;
}

}  // namespace detfuse
