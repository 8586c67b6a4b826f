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
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/geometry.hpp"

namespace detfuse {

inline constexpr double kDefaultMatchIou = 0.5;

struct GroundTruthBox {
  Box box;
  std::string label;
  std::string image_id;
};

using Vocabulary = std::set<std::string>;

struct ClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  ClassCounts& operator+=(const ClassCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct DetectionMatch {
  std::size_t detection = 0;                 // index into the detection list
  std::optional<std::size_t> ground_truth;   // index into the ground truths
  double iou = 0.0;
};

struct MatchResult {
  /// image_id -> matches, each image's entries in processing order.
  std::map<std::string, std::vector<DetectionMatch>> per_image;
  /// Every vocabulary class appears, possibly with all-zero counts.
  std::map<std::string, ClassCounts> per_class;
  /// is_tp[i] for detection i.
  std::vector<bool> is_tp;
};

namespace detail {

inline void check_labels(std::span<const Detection> dets,
                         std::span<const GroundTruthBox> gts,
                         const Vocabulary& vocab) {
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!vocab.contains(dets[i].label)) {
      throw ValidationError("detection " + std::to_string(i) +
                            " has unknown class label '" + dets[i].label + "'");
    }
  }
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!vocab.contains(gts[i].label)) {
      throw ValidationError("ground truth " + std::to_string(i) +
                            " has unknown class label '" + gts[i].label + "'");
    }
  }
}

}  // namespace detail

/// Greedy matching within each (image, class): detections in descending
/// score take the unmatched ground truth of highest IoU when that IoU reaches
/// the threshold; otherwise they are false positives. Leftover ground truths
/// are false negatives.
inline MatchResult match_detections(std::span<const Detection> dets,
                                    std::span<const GroundTruthBox> gts,
                                    const Vocabulary& vocab,
                                    double iou_thresh = kDefaultMatchIou) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
    throw ConfigError("match iou_thresh must lie in (0, 1)");
  }
  detail::check_labels(dets, gts, vocab);

  using Key = std::pair<std::string, std::string>;  // (image, label)
  std::map<Key, std::vector<std::size_t>> det_groups, gt_groups;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    det_groups[{dets[i].image_id, dets[i].label}].push_back(i);
  }
  for (std::size_t i = 0; i < gts.size(); ++i) {
    gt_groups[{gts[i].image_id, gts[i].label}].push_back(i);
  }

  MatchResult m;
  m.is_tp.assign(dets.size(), false);
  for (const auto& label : vocab) m.per_class[label];

  for (auto& [key, didx] : det_groups) {
    std::sort(didx.begin(), didx.end(), [&](std::size_t a, std::size_t b) {
      return priority_before(dets[a], dets[b]);
    });
    auto git = gt_groups.find(key);
    const std::vector<std::size_t> empty;
    const auto& gidx = git == gt_groups.end() ? empty : git->second;
    std::vector<bool> used(gidx.size(), false);
    auto& counts = m.per_class[key.second];
    auto& image_matches = m.per_image[key.first];

    for (std::size_t d : didx) {
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gidx.size(); ++g) {
        if (used[g]) continue;
        const double ov = iou(dets[d].box, gts[gidx[g]].box);
        if (ov > best) {
          best = ov;
          best_g = g;
        }
      }
      DetectionMatch dm{d, std::nullopt, std::max(best, 0.0)};
      if (best >= iou_thresh) {
        used[best_g] = true;
        dm.ground_truth = gidx[best_g];
        m.is_tp[d] = true;
        ++counts.tp;
      } else {
        ++counts.fp;
      }
      image_matches.push_back(dm);
    }
    counts.fn += static_cast<std::size_t>(
        std::count(used.begin(), used.end(), false));
  }
  // Ground-truth groups that received no detections at all.
  for (const auto& [key, gidx] : gt_groups) {
    if (!det_groups.contains(key)) m.per_class[key.second].fn += gidx.size();
  }
  return m;
}

struct PrecisionRecallF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Zero denominators yield 0.
inline PrecisionRecallF1 compute_prf(const ClassCounts& c) {
  PrecisionRecallF1 r;
  const auto tp = static_cast<double>(c.tp);
  if (c.tp + c.fp > 0) r.precision = tp / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = tp / static_cast<double>(c.tp + c.fn);
  if (r.precision + r.recall > 0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

struct PrfSummary {
  std::map<std::string, PrecisionRecallF1> per_class;
  ClassCounts micro_counts;
  PrecisionRecallF1 micro;
  /// Mean per-class F1 over classes present in ground truth.
  double macro_f1 = 0.0;
};

inline PrfSummary precision_recall_f1(const MatchResult& m) {
  PrfSummary s;
  double f1_sum = 0;
  std::size_t gt_classes = 0;
  for (const auto& [label, c] : m.per_class) {
    s.per_class[label] = compute_prf(c);
    s.micro_counts += c;
    if (c.tp + c.fn > 0) {
      f1_sum += s.per_class[label].f1;
      ++gt_classes;
    }
  }
  const auto& mc = s.micro_counts;
  if (mc.tp + mc.fp + mc.fn == 0) {
    // Nothing annotated and nothing predicted: vacuously perfect.
    s.micro = {1.0, 1.0, 1.0};
  } else {
    s.micro = compute_prf(mc);
  }
  s.macro_f1 = gt_classes ? f1_sum / static_cast<double>(gt_classes) : 0.0;
  return s;
}

struct PrPoint {
  double score = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double interpolated_precision = 0.0;
};

/// Cumulative precision/recall after each detection of `label`, swept in
/// descending score across all images, with the monotone envelope applied.
inline std::vector<PrPoint> pr_curve(std::span<const Detection> dets,
                                     const MatchResult& m,
                                     const std::string& label,
                                     std::size_t gt_count) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].label == label) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return priority_before(dets[a], dets[b]);
  });
  std::vector<PrPoint> curve;
  curve.reserve(order.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += m.is_tp[order[k]] ? 1 : 0;
    PrPoint p;
    p.score = dets[order[k]].score;
    p.precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    p.recall = gt_count ? static_cast<double>(tp) / static_cast<double>(gt_count)
                        : 0.0;
    curve.push_back(p);
  }
  double env = 0.0;
  for (auto it = curve.rbegin(); it != curve.rend(); ++it) {
    env = std::max(env, it->precision);
    it->interpolated_precision = env;
  }
  return curve;
}

/// All-point interpolated AP: sum of recall increments times the precision
/// envelope.
inline double ap_from_curve(std::span<const PrPoint> curve) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve) {
    ap += (p.recall - prev_recall) * p.interpolated_precision;
    prev_recall = p.recall;
  }
  return std::clamp(ap, 0.0, 1.0);
}

/// AP for one class. Empty when the class has no ground truth.
inline std::optional<double> average_precision(std::span<const Detection> dets,
                                               std::span<const GroundTruthBox> gts,
                                               const std::string& label,
                                               double iou_thresh = kDefaultMatchIou) {
  std::vector<Detection> cd;
  std::vector<GroundTruthBox> cg;
  for (const auto& d : dets) {
    if (d.label == label) cd.push_back(d);
  }
  for (const auto& g : gts) {
    if (g.label == label) cg.push_back(g);
  }
  if (cg.empty()) return std::nullopt;
  const auto m = match_detections(cd, cg, Vocabulary{label}, iou_thresh);
  return ap_from_curve(pr_curve(cd, m, label, cg.size()));
}

/// Arithmetic mean of the defined per-class APs.
inline double mean_average_precision(
    const std::map<std::string, std::optional<double>>& per_class_ap) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [label, ap] : per_class_ap) {
    if (ap) {
      sum += *ap;
      ++n;
    }
  }
  if (n == 0) throw EvaluationError("no class with ground truth to average");
  return sum / static_cast<double>(n);
}

struct ClassReport {
  ClassCounts counts;
  PrecisionRecallF1 prf;
  std::optional<double> ap;
};

struct EvalReport {
  double iou_thresh = kDefaultMatchIou;
  std::map<std::string, ClassReport> per_class;
  ClassCounts micro_counts;
  PrecisionRecallF1 micro;
  double macro_f1 = 0.0;
  std::optional<double> map;
};

/// Full evaluation: one matching pass feeds counts, F1 aggregates and AP.
inline EvalReport evaluate(std::span<const Detection> dets,
                           std::span<const GroundTruthBox> gts,
                           const Vocabulary& vocab,
                           double iou_thresh = kDefaultMatchIou,
                           std::map<std::string, std::vector<PrPoint>>* curves = nullptr) {
  const auto m = match_detections(dets, gts, vocab, iou_thresh);
  const auto prf = precision_recall_f1(m);
  EvalReport r;
  r.iou_thresh = iou_thresh;
  r.micro_counts = prf.micro_counts;
  r.micro = prf.micro;
  r.macro_f1 = prf.macro_f1;
  std::map<std::string, std::optional<double>> aps;
  for (const auto& [label, counts] : m.per_class) {
    ClassReport cr;
    cr.counts = counts;
    cr.prf = prf.per_class.at(label);
    const std::size_t gt_count = counts.tp + counts.fn;
    if (gt_count > 0) {
      auto curve = pr_curve(dets, m, label, gt_count);
      cr.ap = ap_from_curve(curve);
      if (curves) (*curves)[label] = std::move(curve);
    }
    aps[label] = cr.ap;
    r.per_class[label] = cr;
  }
  const bool any_gt = std::any_of(aps.begin(), aps.end(),
                                  [](const auto& kv) { return kv.second.has_value(); });
  if (any_gt) r.map = mean_average_precision(aps);
  return r;
}

}  // namespace detfuse
