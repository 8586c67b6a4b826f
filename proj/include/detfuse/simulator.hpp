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
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/evaluation.hpp"
#include "detfuse/geometry.hpp"

namespace detfuse {

// ---------------------------------------------------------------------------
// Seeding helpers

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Per-detector seed: master seed mixed with a hash of the profile name, so
/// that detectors sharing a master seed still make independent errors.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  return splitmix64(master ^ fnv1a64(name));
}

inline double unit_uniform(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// Profiles

/// Beta-shaped score distribution parameterized by mean and concentration
/// (alpha + beta).
struct ScoreModel {
  double mean = 0.5;
  double concentration = 8.0;

  double Sample(std::mt19937_64& rng) const {
    std::gamma_distribution<double> ga(mean * concentration, 1.0);
    std::gamma_distribution<double> gb((1.0 - mean) * concentration, 1.0);
    const double a = ga(rng);
    const double b = gb(rng);
    if (a + b <= 0) return mean;
    return std::clamp(a / (a + b), 0.0, 1.0);
  }
};

struct ClassRates {
  double recall = 0.0;
  double precision = 1.0;
};

struct DetectorProfile {
  std::string name;
  std::map<std::string, ClassRates> classes;
  /// Corner perturbation sigma as a fraction of box width (x) or height (y).
  double jitter = 0.04;
  ScoreModel tp_score{0.75, 8.0};
  ScoreModel fp_score{0.30, 8.0};

  void Validate() const {
    if (name.empty()) throw ConfigError("detector profile needs a name");
    if (!(jitter >= 0.0) || !std::isfinite(jitter)) {
      throw ConfigError("profile '" + name + "': jitter must be >= 0");
    }
    for (const auto* sm : {&tp_score, &fp_score}) {
      if (!(sm->mean > 0.0 && sm->mean < 1.0) || !(sm->concentration > 0.0)) {
        throw ConfigError("profile '" + name +
                          "': score model needs mean in (0,1) and "
                          "concentration > 0");
      }
    }
    for (const auto& [label, r] : classes) {
      if (!(r.recall >= 0.0 && r.recall <= 1.0)) {
        throw ConfigError("profile '" + name + "' class '" + label +
                          "': recall outside [0, 1]");
      }
      if (!(r.precision > 0.0 && r.precision <= 1.0)) {
        throw ConfigError("profile '" + name + "' class '" + label +
                          "': precision outside (0, 1]");
      }
    }
  }
};

/// Fisheye traffic-camera class vocabulary in category-id order.
inline const std::vector<std::string>& fisheye_classes() {
  static const std::vector<std::string> names{"Bus", "Bike", "Car",
                                              "Pedestrian", "Truck"};
  return names;
}

/// Per-class (recall, precision) of the validation-set models, in the order
/// Bus, Bike, Car, Pedestrian, Truck.
inline const std::vector<DetectorProfile>& reference_profiles() {
  static const std::vector<DetectorProfile> profiles = [] {
    struct Row {
      const char* name;
      double v[10];
    };
    const Row rows[] = {
        {"yolov11n-640", {0.426, 0.239, 0.455, 0.457, 0.397, 0.638, 0.071, 0.245, 0.156, 0.441}},
        {"yolov11n-1280", {0.475, 0.481, 0.376, 0.722, 0.563, 0.787, 0.201, 0.551, 0.313, 0.563}},
        {"yolov11s-640", {0.559, 0.581, 0.455, 0.693, 0.555, 0.867, 0.149, 0.473, 0.306, 0.703}},
        {"yolov11s-1280", {0.570, 0.712, 0.384, 0.714, 0.613, 0.845, 0.245, 0.320, 0.349, 0.745}},
        {"yolov12n-640", {0.486, 0.503, 0.398, 0.772, 0.488, 0.786, 0.116, 0.281, 0.303, 0.347}},
        {"yolov12n-1280", {0.632, 0.708, 0.418, 0.648, 0.567, 0.733, 0.161, 0.363, 0.307, 0.679}},
        {"yolov12s-640", {0.523, 0.377, 0.410, 0.705, 0.522, 0.824, 0.139, 0.487, 0.307, 0.605}},
        {"yolov12s-1280", {0.542, 0.611, 0.472, 0.766, 0.597, 0.810, 0.283, 0.440, 0.315, 0.616}},
        {"salience-detr-swin-l", {0.928, 0.711, 0.774, 0.568, 0.833, 0.645, 0.728, 0.360, 0.612, 0.359}},
        {"salience-detr-convnext", {0.929, 0.671, 0.790, 0.608, 0.881, 0.709, 0.773, 0.354, 0.585, 0.416}},
        {"salience-detr-focalnet", {0.928, 0.706, 0.842, 0.636, 0.886, 0.723, 0.708, 0.367, 0.801, 0.436}},
        {"salience-detr-resnet-5scale", {0.808, 0.522, 0.765, 0.571, 0.791, 0.665, 0.682, 0.268, 0.489, 0.331}},
        {"salience-detr-resnet-50", {0.865, 0.433, 0.700, 0.509, 0.849, 0.606, 0.606, 0.202, 0.794, 0.421}},
        {"co-detr-vit-l", {0.927, 0.861, 0.693, 0.859, 0.869, 0.866, 0.546, 0.696, 0.837, 0.830}},
        {"co-detr-codeform-r50", {0.905, 0.852, 0.674, 0.849, 0.860, 0.851, 0.522, 0.704, 0.817, 0.738}},
        {"yolor-1280", {0.933, 0.871, 0.898, 0.973, 0.937, 0.987, 0.719, 0.974, 0.970, 0.985}},
    };
    std::vector<DetectorProfile> out;
    for (const auto& row : rows) {
      DetectorProfile p;
      p.name = row.name;
      for (std::size_t c = 0; c < fisheye_classes().size(); ++c) {
        p.classes[fisheye_classes()[c]] = {row.v[2 * c], row.v[2 * c + 1]};
      }
      out.push_back(std::move(p));
    }
    return out;
  }();
  return profiles;
}

inline const DetectorProfile& reference_profile(std::string_view name) {
  for (const auto& p : reference_profiles()) {
    if (p.name == name) return p;
  }
  throw ConfigError("no built-in detector profile named '" + std::string(name) +
                    "'");
}

// ---------------------------------------------------------------------------
// Scenes

struct ObjectSize {
  double mean_w = 40.0;
  double mean_h = 40.0;
  double log_spread = 0.25;  // sigma of the log-normal size multiplier
};

struct SceneParams {
  int image_w = 1280;
  int image_h = 1280;
  std::size_t object_count = 60;
  std::map<std::string, double> class_mix;
  std::map<std::string, ObjectSize> sizes;
  /// 0 places centers uniformly over the image circle; larger values push
  /// objects outward and shrink them toward the rim.
  double periphery_bias = 0.0;
  /// Ground-truth boxes may overlap each other up to this IoU.
  double max_overlap_iou = 0.3;
  int max_attempts = 200;

  static SceneParams Fisheye() {
    SceneParams p;
    for (const auto& c : fisheye_classes()) p.class_mix[c] = 0.2;
    p.sizes["Bus"] = {120, 100, 0.25};
    p.sizes["Bike"] = {28, 28, 0.25};
    p.sizes["Car"] = {64, 52, 0.25};
    p.sizes["Pedestrian"] = {18, 34, 0.25};
    p.sizes["Truck"] = {96, 80, 0.25};
    return p;
  }

  void Validate() const {
    if (image_w <= 0 || image_h <= 0) {
      throw ConfigError("scene extents must be positive");
    }
    if (class_mix.empty() && object_count > 0) {
      throw ConfigError("scene class_mix is empty");
    }
    double sum = 0;
    for (const auto& [label, p] : class_mix) {
      if (!(p >= 0.0)) throw ConfigError("class proportion must be >= 0");
      if (!sizes.contains(label)) {
        throw ConfigError("no size entry for class '" + label + "'");
      }
      sum += p;
    }
    if (!class_mix.empty() && std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("class proportions sum to " + std::to_string(sum) +
                        ", expected 1");
    }
    if (!(periphery_bias >= 0.0)) {
      throw ConfigError("periphery_bias must be >= 0");
    }
    if (!(max_overlap_iou >= 0.0 && max_overlap_iou <= 1.0)) {
      throw ConfigError("max_overlap_iou must lie in [0, 1]");
    }
  }
};

struct SyntheticScene {
  int image_w = 0;
  int image_h = 0;
  std::string image_id;
  std::uint64_t seed = 0;
  std::vector<GroundTruthBox> objects;
};

/// Deterministic scene for (params, seed).
inline SyntheticScene generate_scene(const SceneParams& params,
                                     std::uint64_t seed,
                                     std::string image_id = {}) {
  params.Validate();
  SyntheticScene scene;
  scene.image_w = params.image_w;
  scene.image_h = params.image_h;
  scene.seed = seed;
  scene.image_id = image_id.empty() ? "scene_" + std::to_string(seed) : image_id;
  if (params.object_count == 0) return scene;

  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::string> labels;
  std::vector<double> cumulative;
  double acc = 0;
  for (const auto& [label, p] : params.class_mix) {
    acc += p;
    labels.push_back(label);
    cumulative.push_back(acc);
  }

  const double cx0 = 0.5 * params.image_w;
  const double cy0 = 0.5 * params.image_h;
  const double radius = 0.5 * std::min(params.image_w, params.image_h);
  const double radial_exponent = 1.0 / (2.0 + 4.0 * params.periphery_bias);

  for (std::size_t n = 0; n < params.object_count; ++n) {
    const double u = unit(rng) * acc;
    std::size_t ci = 0;
    while (ci + 1 < cumulative.size() && u >= cumulative[ci]) ++ci;
    const std::string& label = labels[ci];
    const ObjectSize& size = params.sizes.at(label);

    bool placed = false;
    for (int attempt = 0; attempt < params.max_attempts && !placed; ++attempt) {
      const double r = radius * std::pow(unit(rng), radial_exponent);
      const double theta = 2.0 * std::numbers::pi * unit(rng);
      const double shrink = 1.0 - 0.5 * std::min(params.periphery_bias, 1.0) * (r / radius);
      double w = size.mean_w * std::exp(size.log_spread * normal(rng)) * shrink;
      double h = size.mean_h * std::exp(size.log_spread * normal(rng)) * shrink;
      w = std::clamp(w, 2.0, static_cast<double>(params.image_w));
      h = std::clamp(h, 2.0, static_cast<double>(params.image_h));
      const double cx = cx0 + r * std::cos(theta);
      const double cy = cy0 + r * std::sin(theta);
      const double x1 = std::clamp(cx - 0.5 * w, 0.0, params.image_w - w);
      const double y1 = std::clamp(cy - 0.5 * h, 0.0, params.image_h - h);
      Box box(x1, y1, x1 + w, y1 + h);

      bool clear = true;
      for (const auto& other : scene.objects) {
        if (iou(box, other.box) > params.max_overlap_iou) {
          clear = false;
          break;
        }
      }
      if (clear) {
        scene.objects.push_back({box, label, scene.image_id});
        placed = true;
      }
    }
    if (!placed) {
      throw ConfigError("infeasible placement: could not place object " +
                        std::to_string(n + 1) + " of " +
                        std::to_string(params.object_count) + " in " +
                        std::to_string(params.image_w) + "x" +
                        std::to_string(params.image_h));
    }
  }
  return scene;
}

/// `count` scenes with ids img_00000, img_00001, ...; scene i is seeded from
/// (master_seed, i).
inline std::vector<SyntheticScene> generate_scenes(const SceneParams& params,
                                                   std::size_t count,
                                                   std::uint64_t master_seed) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "img_%05zu", i);
    scenes.push_back(
        generate_scene(params, splitmix64(master_seed + 0x51ed * (i + 1)), id));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// Detector simulation

struct SimulationOptions {
  /// Probability that a ground truth is missed by every detector at once.
  /// The marginal recall of each profile is preserved.
  double shared_miss_probability = 0.0;
};

/// Emits each ground truth with probability recall(class), jittered, scored
/// from the TP model, then adds Poisson(recall * n * (1 - p) / p) uniformly
/// placed false positives per class scored from the FP model.
inline std::vector<Detection> simulate_detector(const SyntheticScene& scene,
                                                const DetectorProfile& profile,
                                                std::uint64_t seed,
                                                const SimulationOptions& opts = {}) {
  profile.Validate();
  const double q = opts.shared_miss_probability;
  if (!(q >= 0.0 && q < 1.0)) {
    throw ConfigError("shared_miss_probability must lie in [0, 1)");
  }
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& label = scene.objects[i].label;
    if (!profile.classes.contains(label)) {
      throw ConfigError("profile '" + profile.name + "' has no rates for class '" +
                        label + "'");
    }
    by_class[label].push_back(i);
  }

  std::mt19937_64 rng(splitmix64(derive_seed(seed, profile.name) ^
                                 splitmix64(scene.seed)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Detection> out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& gt = scene.objects[i];
    const ClassRates& rates = profile.classes.at(gt.label);
    double p_emit = rates.recall;
    if (q > 0.0) {
      const double shared = unit_uniform(splitmix64(scene.seed ^ splitmix64(i + 1)));
      if (shared < q) {
        unit(rng);  // keep the stream aligned with the q == 0 case
        continue;
      }
      p_emit = std::min(1.0, rates.recall / (1.0 - q));
    }
    if (!(unit(rng) < p_emit)) continue;

    Box box = gt.box;
    if (profile.jitter > 0.0) {
      const double sx = profile.jitter * gt.box.width();
      const double sy = profile.jitter * gt.box.height();
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double x1 = gt.box.x1() + sx * normal(rng);
        const double y1 = gt.box.y1() + sy * normal(rng);
        const double x2 = gt.box.x2() + sx * normal(rng);
        const double y2 = gt.box.y2() + sy * normal(rng);
        if (x1 < x2 && y1 < y2) {
          box = Box(x1, y1, x2, y2);
          break;
        }
      }
    }
    out.push_back({box, profile.tp_score.Sample(rng), gt.label, scene.image_id,
                   profile.name});
  }

  for (const auto& [label, members] : by_class) {
    const ClassRates& rates = profile.classes.at(label);
    const double expected_tp = rates.recall * static_cast<double>(members.size());
    const double expected_fp = expected_tp * (1.0 - rates.precision) / rates.precision;
    if (!(expected_fp > 0.0)) continue;
    std::poisson_distribution<long> count_dist(expected_fp);
    const long count = count_dist(rng);
    for (long k = 0; k < count; ++k) {
      const auto& ref = scene.objects[members[static_cast<std::size_t>(
          unit(rng) * static_cast<double>(members.size())) % members.size()]];
      const double w = std::min(ref.box.width(), static_cast<double>(scene.image_w));
      const double h = std::min(ref.box.height(), static_cast<double>(scene.image_h));
      const double x1 = unit(rng) * (scene.image_w - w);
      const double y1 = unit(rng) * (scene.image_h - h);
      out.push_back({Box(x1, y1, x1 + w, y1 + h), profile.fp_score.Sample(rng),
                     label, scene.image_id, profile.name});
    }
  }
  return out;
}

/// Ground truth of every scene, concatenated.
inline std::vector<GroundTruthBox> scene_ground_truth(
    const std::vector<SyntheticScene>& scenes) {
  std::vector<GroundTruthBox> out;
  for (const auto& s : scenes) out.insert(out.end(), s.objects.begin(), s.objects.end());
  return out;
}

inline std::vector<Detection> simulate_detector(const std::vector<SyntheticScene>& scenes,
                                                const DetectorProfile& profile,
                                                std::uint64_t seed,
                                                const SimulationOptions& opts = {}) {
  std::vector<Detection> out;
  for (const auto& s : scenes) {
    auto d = simulate_detector(s, profile, seed, opts);
    out.insert(out.end(), std::make_move_iterator(d.begin()),
               std::make_move_iterator(d.end()));
  }
  return out;
}

}  // namespace detfuse
