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
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "detfuse/evaluation.hpp"
#include "detfuse/thresholding.hpp"
#include "oracles.hpp"

namespace detfuse {
namespace {

const Vocabulary kVocab{"Bus", "Bike", "Car", "Pedestrian", "Truck"};

Detection det(double x1, double y1, double x2, double y2, double s,
              std::string label = "Car", std::string image = "img") {
  return {Box(x1, y1, x2, y2), s, std::move(label), std::move(image), "m"};
}

GroundTruthBox gt(double x1, double y1, double x2, double y2,
                  std::string label = "Car", std::string image = "img") {
  return {Box(x1, y1, x2, y2), std::move(label), std::move(image)};
}

void expect_conservation(const MatchResult& m, std::span<const Detection> dets,
                         std::span<const GroundTruthBox> gts) {
  for (const auto& [label, c] : m.per_class) {
    const auto nd = std::count_if(dets.begin(), dets.end(),
                                  [&](const auto& d) { return d.label == label; });
    const auto ng = std::count_if(gts.begin(), gts.end(),
                                  [&](const auto& g) { return g.label == label; });
    EXPECT_EQ(c.tp + c.fp, static_cast<std::size_t>(nd)) << label;
    EXPECT_EQ(c.tp + c.fn, static_cast<std::size_t>(ng)) << label;
  }
}

TEST(Match, OneHitOneStray) {
  const std::vector gts{gt(0, 0, 10, 10)};
  const std::vector dets{det(0, 0, 10, 10, 0.9), det(20, 20, 30, 30, 0.8)};
  const auto m = match_detections(dets, gts, kVocab, 0.5);
  EXPECT_EQ(m.per_class.at("Car"), (ClassCounts{1, 1, 0}));
  EXPECT_EQ(m.per_class.size(), kVocab.size());
  EXPECT_TRUE(m.is_tp[0]);
  EXPECT_FALSE(m.is_tp[1]);
  ASSERT_EQ(m.per_image.at("img").size(), 2u);
  EXPECT_EQ(m.per_image.at("img")[0].ground_truth, std::optional<std::size_t>(0));
}

TEST(Match, NoDetections) {
  const std::vector gts{gt(0, 0, 10, 10), gt(50, 50, 60, 60, "Bus", "b")};
  const auto m = match_detections({}, gts, kVocab);
  EXPECT_EQ(m.per_class.at("Car"), (ClassCounts{0, 0, 1}));
  EXPECT_EQ(m.per_class.at("Bus"), (ClassCounts{0, 0, 1}));
}

TEST(Match, SubThresholdOverlap) {
  const std::vector gts{gt(0, 0, 10, 10)};
  const std::vector dets{det(0, 0, 4, 10, 0.9)};  // IoU 0.4
  const auto m = match_detections(dets, gts, kVocab, 0.5);
  EXPECT_EQ(m.per_class.at("Car"), (ClassCounts{0, 1, 1}));
  EXPECT_NEAR(m.per_image.at("img")[0].iou, 0.4, 1e-12);
}

TEST(Match, HigherScoreClaimsFirst) {
  const std::vector gts{gt(0, 0, 10, 10)};
  const std::vector dets{det(0, 0, 9, 10, 0.4), det(0, 0, 8, 10, 0.9)};
  const auto m = match_detections(dets, gts, kVocab);
  EXPECT_FALSE(m.is_tp[0]);
  EXPECT_TRUE(m.is_tp[1]);
}

TEST(Match, PicksHighestIouAmongUnmatched) {
  const std::vector gts{gt(0, 0, 10, 10), gt(2, 0, 12, 10)};
  const std::vector dets{det(2, 0, 12, 10, 0.9), det(0, 0, 10, 10, 0.8)};
  const auto m = match_detections(dets, gts, kVocab);
  EXPECT_EQ(m.per_image.at("img")[0].ground_truth, std::optional<std::size_t>(1));
  EXPECT_EQ(m.per_image.at("img")[1].ground_truth, std::optional<std::size_t>(0));
}

TEST(Match, ClassAndImageGates) {
  const std::vector gts{gt(0, 0, 10, 10, "Car", "a")};
  const std::vector dets{det(0, 0, 10, 10, 0.9, "Bus", "a"), det(0, 0, 10, 10, 0.9, "Car", "b")};
  const auto m = match_detections(dets, gts, kVocab);
  EXPECT_EQ(m.per_class.at("Car"), (ClassCounts{0, 1, 1}));
  EXPECT_EQ(m.per_class.at("Bus"), (ClassCounts{0, 1, 0}));
}

TEST(Match, Errors) {
  const std::vector gts{gt(0, 0, 10, 10)};
  try {
    match_detections(std::vector{det(0, 0, 1, 1, 0.5, "Tram")}, gts, kVocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kValidation);
  }
  EXPECT_THROW(match_detections({}, std::vector{gt(0, 0, 1, 1, "Tram")}, kVocab), Error);
  EXPECT_THROW(match_detections({}, gts, kVocab, 1.0), Error);
  EXPECT_THROW(match_detections({}, gts, kVocab, 0.0), Error);
}

TEST(Prf, Fixtures) {
  const auto r = compute_prf({3, 1, 2});
  EXPECT_DOUBLE_EQ(r.precision, 0.75);
  EXPECT_DOUBLE_EQ(r.recall, 0.6);
  EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-9);

  const auto eq = compute_prf({2, 2, 2});
  EXPECT_DOUBLE_EQ(eq.f1, eq.precision);

  const auto empty = compute_prf({0, 0, 0});
  EXPECT_EQ(empty.precision, 0.0);
  EXPECT_EQ(empty.recall, 0.0);
  EXPECT_EQ(empty.f1, 0.0);
}

TEST(Prf, MicroPoolsCountsMacroSkipsUnannotated) {
  MatchResult m;
  m.per_class["Car"] = {3, 1, 0};
  m.per_class["Bus"] = {0, 0, 2};
  m.per_class["Truck"] = {0, 2, 0};  // predicted, never annotated
  const auto s = precision_recall_f1(m);
  EXPECT_EQ(s.micro_counts, (ClassCounts{3, 3, 2}));
  EXPECT_DOUBLE_EQ(s.micro.precision, 0.5);
  EXPECT_DOUBLE_EQ(s.micro.recall, 0.6);
  EXPECT_NEAR(s.macro_f1, (2 * 0.75 / 1.75 + 0.0) / 2, 1e-12);
}

TEST(Prf, AllEmptyIsVacuouslyPerfect) {
  MatchResult m;
  m.per_class["Car"] = {};
  const auto s = precision_recall_f1(m);
  EXPECT_EQ(s.micro.f1, 1.0);
  EXPECT_EQ(s.per_class.at("Car").f1, 0.0);
}

TEST(PrfProperty, F1Bounds) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> c(0, 40);
  for (int trial = 0; trial < 5000; ++trial) {
    const ClassCounts k{c(rng), c(rng), c(rng)};
    const auto r = compute_prf(k);
    const auto swapped = compute_prf({k.tp, k.fn, k.fp});  // swaps P and R
    EXPECT_NEAR(r.f1, swapped.f1, 1e-15);
    EXPECT_LE(r.f1, 2 * std::min(r.precision, r.recall) + 1e-15);
    EXPECT_LE(r.f1, std::max(r.precision, r.recall) + 1e-15);
    for (double v : {r.precision, r.recall, r.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Ap, Fixtures) {
  const std::vector gts{gt(0, 0, 10, 10)};
  EXPECT_EQ(average_precision(std::vector{det(0, 0, 10, 10, 0.9)}, gts, "Car"), 1.0);
  const std::vector fp_then_tp{det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.8)};
  EXPECT_NEAR(*average_precision(fp_then_tp, gts, "Car"), 0.5, 1e-12);
  EXPECT_EQ(average_precision({}, gts, "Car"), 0.0);
  EXPECT_EQ(average_precision(std::vector{det(0, 0, 10, 10, 0.9)}, gts, "Bus"), std::nullopt);
}

TEST(Ap, CurveEnvelope) {
  const std::vector gts{gt(0, 0, 10, 10), gt(20, 0, 30, 10)};
  const std::vector dets{det(0, 0, 10, 10, 0.9), det(50, 0, 60, 10, 0.8),
                         det(20, 0, 30, 10, 0.7)};
  const auto m = match_detections(dets, gts, kVocab);
  const auto curve = pr_curve(dets, m, "Car", 2);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_DOUBLE_EQ(curve[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(curve[1].interpolated_precision, 2.0 / 3.0);
  EXPECT_NEAR(ap_from_curve(curve), 0.5 + 0.5 * 2.0 / 3.0, 1e-12);
}

TEST(Map, Fixtures) {
  EXPECT_DOUBLE_EQ(mean_average_precision({{"a", 1.0}, {"b", 0.0}}), 0.5);
  EXPECT_DOUBLE_EQ(mean_average_precision({{"a", 0.7}}), 0.7);
  EXPECT_NEAR(mean_average_precision({{"a", 0.6}, {"b", 0.6}, {"c", 0.6}}), 0.6, 1e-15);
  EXPECT_DOUBLE_EQ(mean_average_precision({{"a", 0.4}, {"b", std::nullopt}}), 0.4);
  try {
    mean_average_precision({{"a", std::nullopt}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEvaluation);
  }
}

// Small random single-class instances on a coarse lattice so that overlaps,
// ties and multi-image structure all occur.
struct Instance {
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
};

Instance random_instance(std::mt19937_64& rng, int max_dets, int max_gts, const char* label = "Car") {
  std::uniform_int_distribution<int> corner(0, 6), ext(2, 5), img(0, 1);
  std::uniform_int_distribution<int> score(1, 10);
  Instance in;
  const int nd = std::uniform_int_distribution<int>(0, max_dets)(rng);
  const int ng = std::uniform_int_distribution<int>(0, max_gts)(rng);
  for (int i = 0; i < ng; ++i) {
    const double x = corner(rng), y = corner(rng);
    in.gts.push_back(gt(x, y, x + ext(rng), y + ext(rng), label, "i" + std::to_string(img(rng))));
  }
  for (int i = 0; i < nd; ++i) {
    const double x = corner(rng), y = corner(rng);
    in.dets.push_back(det(x, y, x + ext(rng), y + ext(rng), score(rng) / 10.0, label,
                          "i" + std::to_string(img(rng))));
  }
  return in;
}

TEST(ApProperty, MatchesBruteForce) {
  std::mt19937_64 rng(99);
  int checked = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto in = random_instance(rng, 6, 4);
    if (in.gts.empty()) continue;
    auto sorted = in.dets;
    std::sort(sorted.begin(), sorted.end(), priority_before);
    std::vector<oracle::RefScoredDet> rd;
    for (const auto& d : sorted) {
      rd.push_back({{d.box.x1(), d.box.y1(), d.box.x2(), d.box.y2()}, d.score,
                    d.image_id == "i1"});
    }
    std::vector<oracle::RefGt> rg;
    for (const auto& g : in.gts) {
      rg.push_back({{g.box.x1(), g.box.y1(), g.box.x2(), g.box.y2()}, g.image_id == "i1"});
    }
    for (double thr : {0.3, 0.5, 0.7}) {
      const double expected = oracle::ap_bruteforce(rd, rg, thr);
      EXPECT_NEAR(*average_precision(in.dets, in.gts, "Car", thr), expected, 1e-12);
      ++checked;
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(EvalProperty, ConservationAndMonotonicity) {
  std::mt19937_64 rng(123);
  const char* labels[] = {"Car", "Bus"};
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = random_instance(rng, 8, 6, labels[0]);
    auto b = random_instance(rng, 8, 6, labels[1]);
    a.dets.insert(a.dets.end(), b.dets.begin(), b.dets.end());
    a.gts.insert(a.gts.end(), b.gts.begin(), b.gts.end());
    std::size_t prev_tp = SIZE_MAX;
    for (double thr = 0.05; thr < 1.0; thr += 0.05) {
      const auto m = match_detections(a.dets, a.gts, kVocab, thr);
      expect_conservation(m, a.dets, a.gts);
      std::size_t tp = 0;
      for (const auto& [l, c] : m.per_class) tp += c.tp;
      EXPECT_LE(tp, prev_tp);
      prev_tp = tp;
      // Each ground truth is claimed at most once.
      std::set<std::size_t> claimed;
      for (const auto& [img, ms] : m.per_image) {
        for (const auto& dm : ms) {
          if (dm.ground_truth) {
            EXPECT_TRUE(claimed.insert(*dm.ground_truth).second);
          }
        }
      }
    }
  }
}

TEST(EvalProperty, ScoreFilterNeverRaisesRecall) {
  std::mt19937_64 rng(321);
  for (int trial = 0; trial < 500; ++trial) {
    const auto in = random_instance(rng, 10, 6);
    if (in.gts.empty()) continue;
    const double base = evaluate(in.dets, in.gts, kVocab).micro.recall;
    for (double t = 0.0; t <= 1.0; t += 0.1) {
      const auto kept = filter_by_threshold(in.dets, t);
      EXPECT_LE(evaluate(kept, in.gts, kVocab).micro.recall, base + 1e-15);
    }
  }
}

TEST(EvalProperty, PerfectDetections) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pos(0, 1000), ext(5, 100);
  const std::vector<std::string> labels(kVocab.begin(), kVocab.end());
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruthBox> gts;
    std::vector<Detection> dets;
    for (int i = 0; i < 30; ++i) {
      const double x = pos(rng), y = pos(rng);
      gts.push_back(gt(x, y, x + ext(rng), y + ext(rng), labels[i % labels.size()],
                       "img" + std::to_string(i % 3)));
      dets.push_back({gts.back().box, 1.0, gts.back().label, gts.back().image_id, "m"});
    }
    for (double thr : {0.1, 0.5, 0.95, 0.999}) {
      const auto r = evaluate(dets, gts, kVocab, thr);
      EXPECT_EQ(r.micro.precision, 1.0);
      EXPECT_EQ(r.micro.recall, 1.0);
      EXPECT_EQ(r.micro.f1, 1.0);
      EXPECT_EQ(r.macro_f1, 1.0);
      ASSERT_TRUE(r.map.has_value());
      EXPECT_EQ(*r.map, 1.0);
      for (const auto& [l, c] : r.per_class) EXPECT_EQ(c.ap, 1.0);
    }
  }
}

TEST(Evaluate, ReportMatchesParts) {
  const std::vector gts{gt(0, 0, 10, 10), gt(0, 0, 10, 10, "Bus", "b")};
  const std::vector dets{det(0, 0, 10, 10, 0.9), det(40, 40, 50, 50, 0.8, "Truck")};
  std::map<std::string, std::vector<PrPoint>> curves;
  const auto r = evaluate(dets, gts, kVocab, 0.5, &curves);
  EXPECT_EQ(r.micro_counts, (ClassCounts{1, 1, 1}));
  EXPECT_EQ(r.per_class.at("Car").ap, 1.0);
  EXPECT_EQ(r.per_class.at("Bus").ap, 0.0);
  EXPECT_EQ(r.per_class.at("Truck").ap, std::nullopt);
  EXPECT_DOUBLE_EQ(*r.map, 0.5);
  EXPECT_EQ(curves.count("Car"), 1u);
  EXPECT_EQ(curves.count("Truck"), 0u);
}

}  // namespace
}  // namespace detfuse
