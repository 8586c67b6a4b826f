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
#include <compare>
#include <string>
#include <tuple>

#include "detfuse/error.hpp"

namespace detfuse {

/// Axis-aligned box in continuous pixel coordinates, corner convention.
/// Construction rejects non-finite coordinates and zero or negative extent.
class Box {
 public:
  Box(double x1, double y1, double x2, double y2)
      : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
    if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) ||
        !std::isfinite(y2)) {
      throw ValidationError("box has non-finite coordinate");
    }
    if (!(x1 < x2) || !(y1 < y2)) {
      throw ValidationError("box (" + std::to_string(x1) + ", " +
                            std::to_string(y1) + ", " + std::to_string(x2) +
                            ", " + std::to_string(y2) + ") has no area");
    }
  }

  /// Builds from (x, y, width, height), the interchange-format convention.
  static Box FromXywh(double x, double y, double w, double h) {
    if (!(w > 0) || !(h > 0)) {
      throw ValidationError("bbox width and height must be positive");
    }
    return Box(x, y, x + w, y + h);
  }

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double center_x() const { return 0.5 * (x1_ + x2_); }
  double center_y() const { return 0.5 * (y1_ + y2_); }

  Box Translated(double dx, double dy) const {
    return Box(x1_ + dx, y1_ + dy, x2_ + dx, y2_ + dy);
  }

  friend auto operator<=>(const Box&, const Box&) = default;
  friend bool operator==(const Box&, const Box&) = default;

 private:
  double x1_, y1_, x2_, y2_;
};

inline double area(const Box& a) { return a.width() * a.height(); }

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double h = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

/// Intersection over union. Symmetric; exactly 1 for identical boxes.
inline double iou(const Box& a, const Box& b) {
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = area(a) + area(b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

struct Detection {
  Box box;
  double score = 0.0;
  std::string label;
  std::string image_id;
  std::string source_id;

  /// Throws unless the score lies in [0, 1].
  void Validate() const {
    if (!(score >= 0.0 && score <= 1.0)) {
      throw ValidationError("detection score " + std::to_string(score) +
                            " outside [0, 1]");
    }
  }

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline Detection translate(const Detection& d, double dx, double dy) {
  Detection out = d;
  out.box = d.box.Translated(dx, dy);
  return out;
}

/// Strict total order used wherever "highest confidence first" is needed:
/// score descending, then source_id, x1, y1, x2, y2, label, image_id
/// ascending. Makes every greedy procedure a function of the input set.
inline bool priority_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.source_id, a.box, a.label, a.image_id) <
         std::tie(b.source_id, b.box, b.label, b.image_id);
}

/// Field-wise lexicographic order for canonicalizing output sets.
inline bool canonical_less(const Detection& a, const Detection& b) {
  return std::tie(a.image_id, a.label, a.box, a.score, a.source_id) <
         std::tie(b.image_id, b.label, b.box, b.score, b.source_id);
}

}  // namespace detfuse
