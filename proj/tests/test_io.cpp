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
#include <random>

#include <gtest/gtest.h>

#include "detfuse/io.hpp"
#include "test_support.hpp"

namespace detfuse {
namespace {

using testing_support::TempDir;

std::string error_message(auto&& f, ErrorKind* kind = nullptr) {
  try {
    f();
  } catch (const Error& e) {
    if (kind) *kind = e.kind();
    return e.what();
  }
  return "";
}

const char* kGt = R"({
  "images": [{"id": "cam1_0001", "width": 1280, "height": 1280, "file_name": "a.png"},
             {"id": 7, "width": 640, "height": 480}],
  "annotations": [
    {"id": 1, "image_id": "cam1_0001", "category_id": 2, "bbox": [100, 100, 50, 40]},
    {"id": 2, "image_id": 7, "category_id": 0, "bbox": [600, 400, 80, 100]}
  ],
  "categories": [{"id": 0, "name": "Bus"}, {"id": 1, "name": "Bike"}, {"id": 2, "name": "Car"},
                 {"id": 3, "name": "Pedestrian"}, {"id": 4, "name": "Truck"}]
})";

TEST(Detections, BareArray) {
  const auto f = parse_detections_json(
      parse_json_text(R"([{"image_id": "cam1_0001", "category_id": 2,
                           "bbox": [100, 100, 50, 40], "score": 0.9}])", "t"),
      "yolor");
  ASSERT_EQ(f.detections.size(), 1u);
  const auto& d = f.detections[0];
  EXPECT_EQ(d.box, Box(100, 100, 150, 140));
  EXPECT_EQ(d.label, "Car");
  EXPECT_EQ(d.image_id, "cam1_0001");
  EXPECT_EQ(d.source_id, "yolor");
  EXPECT_EQ(d.score, 0.9);
  EXPECT_FALSE(f.sliced());
}

TEST(Detections, EmptyIsValid) {
  EXPECT_TRUE(parse_detections_json(parse_json_text("[]", "t"), "m").detections.empty());
  const auto f = parse_detections_json(
      parse_json_text(R"({"source_id": "x", "detections": []})", "t"), "m");
  EXPECT_EQ(f.source_id, "x");
  EXPECT_TRUE(f.detections.empty());
}

TEST(Detections, IntegerImageIdsAndFieldOrder) {
  const auto a = parse_detections_json(
      parse_json_text(R"([{"score": 0.5, "bbox": [1.5, 2, 3, 4], "category_id": 0, "image_id": 12}])",
                      "t"), "m");
  const auto b = parse_detections_json(
      parse_json_text(R"([{"image_id": 12, "category_id": 0, "bbox": [1.5, 2.0, 3e0, 4], "score": 5e-1}])",
                      "t"), "m");
  EXPECT_EQ(a.detections, b.detections);
  EXPECT_EQ(a.detections[0].image_id, "12");
}

TEST(Detections, ValidationErrorsNameRecordAndField) {
  auto parse = [](const char* text) {
    return [text] { parse_detections_json(parse_json_text(text, "t"), "m", CategoryMap::Fisheye(), "f.json"); };
  };
  ErrorKind kind{};
  auto msg = error_message(parse(R"([{"image_id": 1, "category_id": 2, "bbox": [0,0,1,1], "score": 0.5},
                                     {"image_id": 1, "category_id": 2, "bbox": [0,0,1,1], "score": 1.5}])"),
                           &kind);
  EXPECT_EQ(kind, ErrorKind::kValidation);
  EXPECT_NE(msg.find("f.json[1].score"), std::string::npos) << msg;

  msg = error_message(parse(R"([{"image_id": 1, "category_id": 9, "bbox": [0,0,1,1], "score": 0.5}])"));
  EXPECT_NE(msg.find("[0].category_id"), std::string::npos) << msg;
  msg = error_message(parse(R"([{"image_id": 1, "category_id": 1, "bbox": [0,0,0,1], "score": 0.5}])"));
  EXPECT_NE(msg.find("[0].bbox"), std::string::npos) << msg;
  msg = error_message(parse(R"([{"image_id": 1, "category_id": 1, "bbox": [0,0,1], "score": 0.5}])"));
  EXPECT_NE(msg.find("[0].bbox"), std::string::npos) << msg;
  msg = error_message(parse(R"([{"category_id": 1, "bbox": [0,0,1,1], "score": 0.5}])"));
  EXPECT_NE(msg.find("[0].image_id"), std::string::npos) << msg;
  msg = error_message(parse(R"([{"image_id": 1, "category_id": 1, "bbox": [0,0,1,1], "score": "high"}])"));
  EXPECT_NE(msg.find("[0].score"), std::string::npos) << msg;
}

TEST(Detections, MalformedSyntaxIsParseError) {
  ErrorKind kind{};
  const auto msg = error_message([] { parse_json_text("[{\"image_id\": 1,,}]", "bad.json"); }, &kind);
  EXPECT_EQ(kind, ErrorKind::kParse);
  EXPECT_NE(msg.find("bad.json"), std::string::npos);
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
}

TEST(Detections, SliceWindowsAllOrNone) {
  const auto f = parse_detections_json(parse_json_text(
      R"([{"image_id": 1, "category_id": 2, "bbox": [0,0,10,10], "score": 0.5, "slice": [480,0,1120,640]}])",
      "t"), "m");
  ASSERT_TRUE(f.sliced());
  EXPECT_EQ(f.windows[0], (SliceWindow{480, 0, 1120, 640}));
  EXPECT_THROW(parse_detections_json(parse_json_text(
      R"([{"image_id": 1, "category_id": 2, "bbox": [0,0,10,10], "score": 0.5, "slice": [0,0,64,64]},
          {"image_id": 1, "category_id": 2, "bbox": [0,0,10,10], "score": 0.5}])", "t"), "m"),
      Error);
}

TEST(Detections, WriteThenParse) {
  TempDir dir;
  const std::vector<Detection> dets{
      {Box(0.6667, 0, 10.6667, 10), 0.123456789012345, "Car", "img1", "ens"},
      {Box(100, 100, 150, 140), 1.0, "Truck", "img2", "other"},
  };
  write_detections(dets, dir / "out.json", "ens");
  const auto back = parse_detections(dir / "out.json");
  EXPECT_EQ(back.source_id, "ens");
  ASSERT_EQ(back.detections.size(), 2u);
  EXPECT_NEAR(back.detections[0].box.x1(), 0.6667, 1e-4);
  EXPECT_NEAR(back.detections[0].box.x2(), 10.6667, 1e-4);
  EXPECT_EQ(back.detections[0].score, dets[0].score);
  EXPECT_EQ(back.detections[1], dets[1]);

  write_detections(std::vector<Detection>{}, dir / "empty.json", "none");
  EXPECT_TRUE(parse_detections(dir / "empty.json").detections.empty());
  EXPECT_FALSE(fs::exists(dir / "out.json.tmp"));
}

TEST(Detections, UnwritablePathIsIoError) {
  ErrorKind kind{};
  error_message([] { write_detections(std::vector<Detection>{}, "/nonexistent/dir/x.json", "m"); },
                &kind);
  EXPECT_EQ(kind, ErrorKind::kIo);
  error_message([] { parse_detections("/nonexistent/x.json"); }, &kind);
  EXPECT_EQ(kind, ErrorKind::kIo);
}

TEST(DetectionsProperty, RoundTripIdentity) {
  // Coordinates on a 1/64 lattice and arbitrary doubles for scores: both are
  // representable exactly by the encoding.
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> pos(0, 1280 * 64), ext(1, 200 * 64), cat(0, 4), img(0, 5);
  std::uniform_real_distribution<double> sc(0, 1);
  const auto& cls = fisheye_classes();
  TempDir dir;
  for (int trial = 0; trial < 50; ++trial) {
    DetectionFile f;
    f.source_id = "src" + std::to_string(trial);
    const int n = std::uniform_int_distribution<int>(0, 80)(rng);
    const bool sliced = trial % 3 == 0;
    for (int i = 0; i < n; ++i) {
      const double x = pos(rng) / 64.0, y = pos(rng) / 64.0;
      f.detections.push_back({Box(x, y, x + ext(rng) / 64.0, y + ext(rng) / 64.0), sc(rng),
                              cls[cat(rng)], "img" + std::to_string(img(rng)),
                              i % 7 == 0 ? "mixed" : f.source_id});
      if (sliced) f.windows.push_back({0, 640, 640, 1280});
    }
    const auto path = dir / "rt.json";
    write_detections(f, path);
    const auto back = parse_detections(path);
    EXPECT_EQ(back.source_id, f.source_id);
    EXPECT_EQ(back.categories, f.categories);
    EXPECT_EQ(back.detections, f.detections);
    EXPECT_EQ(back.windows, f.windows);
  }
}

TEST(GroundTruth, FiveCategories) {
  const auto g = parse_ground_truth_json(parse_json_text(kGt, "gt"));
  EXPECT_EQ(g.categories.vocabulary(), (Vocabulary{"Bus", "Bike", "Car", "Pedestrian", "Truck"}));
  ASSERT_EQ(g.images.size(), 2u);
  EXPECT_EQ(g.images[1].id, "7");
  ASSERT_EQ(g.annotations.size(), 2u);
  EXPECT_EQ(g.annotations[0].box, Box(100, 100, 150, 140));
  EXPECT_EQ(g.annotations[0].label, "Car");
  // The second box runs past the 640x480 image and is clipped with a warning.
  EXPECT_EQ(g.annotations[1].box, Box(600, 400, 640, 480));
  ASSERT_EQ(g.warnings.size(), 1u);
  EXPECT_NE(g.warnings[0].find("annotations[1]"), std::string::npos);
}

TEST(GroundTruth, Errors) {
  auto with_ann = [](const char* ann) {
    return std::string(R"({"images": [{"id": 1, "width": 100, "height": 100}],
                           "categories": [{"id": 0, "name": "Car"}], "annotations": [)") +
           ann + "]}";
  };
  ErrorKind kind{};
  auto msg = error_message(
      [&] { parse_ground_truth_json(parse_json_text(with_ann(R"({"image_id": 2, "category_id": 0, "bbox": [0,0,5,5]})"), "t")); },
      &kind);
  EXPECT_EQ(kind, ErrorKind::kValidation);
  EXPECT_NE(msg.find("annotations[0].image_id"), std::string::npos) << msg;
  msg = error_message(
      [&] { parse_ground_truth_json(parse_json_text(with_ann(R"({"image_id": 1, "category_id": 0, "bbox": [10,10,0,5]})"), "t")); });
  EXPECT_NE(msg.find("zero-area"), std::string::npos) << msg;
  msg = error_message(
      [&] { parse_ground_truth_json(parse_json_text(with_ann(R"({"image_id": 1, "category_id": 0, "bbox": [200,200,5,5]})"), "t")); });
  EXPECT_NE(msg.find("outside"), std::string::npos) << msg;
  msg = error_message(
      [&] { parse_ground_truth_json(parse_json_text(with_ann(R"({"image_id": 1, "category_id": 3, "bbox": [0,0,5,5]})"), "t")); });
  EXPECT_NE(msg.find("category_id"), std::string::npos) << msg;
}

TEST(GroundTruth, RoundTrip) {
  TempDir dir;
  auto g = parse_ground_truth_json(parse_json_text(kGt, "gt"));
  g.warnings.clear();
  write_ground_truth(g, dir / "gt.json");
  const auto back = parse_ground_truth(dir / "gt.json");
  EXPECT_EQ(back.annotations.size(), g.annotations.size());
  for (std::size_t i = 0; i < g.annotations.size(); ++i) {
    EXPECT_EQ(back.annotations[i].box, g.annotations[i].box);
    EXPECT_EQ(back.annotations[i].label, g.annotations[i].label);
    EXPECT_EQ(back.annotations[i].image_id, g.annotations[i].image_id);
  }
  EXPECT_TRUE(back.warnings.empty());
  EXPECT_EQ(back.categories, g.categories);
}

class ConfigTest : public ::testing::Test {
 protected:
  void SetUp() override {
    for (const char* n : {"a.json", "b.json", "c.json", "gt.json"}) {
      write_text_file(dir_ / n, "[]");
    }
  }
  PipelineConfig parse(const std::string& text) {
    return parse_config_text(text, dir_.path(), "test.cfg");
  }
  std::string fails(const std::string& text, ErrorKind expect = ErrorKind::kConfig) {
    ErrorKind kind = ErrorKind::kIo;
    auto msg = error_message([&] { parse(text); }, &kind);
    EXPECT_EQ(kind, expect) << msg;
    return msg;
  }
  TempDir dir_;
};

TEST_F(ConfigTest, MinimalAppliesDefaults) {
  const auto c = parse("[source only]\npath = a.json\n");
  ASSERT_EQ(c.sources.size(), 1u);
  EXPECT_EQ(c.sources[0].id, "only");
  EXPECT_EQ(c.sources[0].path, dir_ / "a.json");
  EXPECT_EQ(c.sources[0].weight, 1.0);
  EXPECT_FALSE(c.sources[0].sliced);
  EXPECT_EQ(c.fusion.iou_threshold, 0.55);
  EXPECT_EQ(c.fusion.method, FusionMethod::kWbf);
  EXPECT_EQ(c.threshold.mode, ThresholdMode::kNone);
  EXPECT_EQ(c.threshold.bins, 256u);
  EXPECT_FALSE(c.eval.has_value());
}

TEST_F(ConfigTest, ThreeSourceEnsemble) {
  const auto c = parse(R"(# three input resolutions of one detector
name = model1
[source yolor_1280]
path = a.json
[source yolor_1536]
path = b.json
[source yolor_1920]
path = c.json
weight = 2
[fusion]
method = wbf
iou_threshold = 0.55
[threshold]
mode = otsu
[eval]
gt = gt.json
)");
  EXPECT_EQ(c.name, "model1");
  ASSERT_EQ(c.sources.size(), 3u);
  EXPECT_EQ(c.sources[2].id, "yolor_1920");
  EXPECT_EQ(c.sources[2].weight, 2.0);
  EXPECT_EQ(c.threshold.mode, ThresholdMode::kOtsu);
  ASSERT_TRUE(c.eval.has_value());
  EXPECT_EQ(c.eval->iou_threshold, 0.5);
  EXPECT_EQ(c.eval->aggregate, F1Aggregate::kMicro);
}

TEST_F(ConfigTest, SlicedSource) {
  const auto c = parse(R"([source codetr]
path = a.json
slice = true
slice_method = nms
image_width = 1280
image_height = 1280
slice_width = 640
slice_height = 640
)");
  ASSERT_TRUE(c.sources[0].plan.has_value());
  EXPECT_EQ(c.sources[0].plan->overlap, 0.25);
  EXPECT_EQ(c.sources[0].slice_fusion.method, FusionMethod::kNms);
}

TEST_F(ConfigTest, Errors) {
  EXPECT_NE(fails("[source a]\npath = a.json\n[source a]\npath = b.json\n").find("duplicate source_id"),
            std::string::npos);
  EXPECT_NE(fails("[source a]\npath = missing.json\n").find("not found"), std::string::npos);
  EXPECT_NE(fails("[source a]\npath = a.json\ncolour = red\n").find("test.cfg:3: unknown key 'colour'"),
            std::string::npos);
  fails("[source a]\npath = a.json\n[fusion]\niou_threshold = 1.5\n");
  fails("[source a]\npath = a.json\n[fusion]\nmethod = vote\n");
  fails("[source a]\npath = a.json\nweight = 0\n");
  fails("[source a]\npath = a.json\n[threshold]\nmode = fixed\n");
  fails("[source a]\npath = a.json\n[threshold]\nmode = fixed\nvalue = 1.2\n");
  fails("[source a]\npath = a.json\n[threshold]\nmode = otsu\nvalue = 0.3\n");
  fails("[source a]\npath = a.json\nslice = true\nimage_width = 10\n");
  fails("[source a]\npath = a.json\n[eval]\n");
  fails("[source a]\npath = a.json\n[extras]\n");
  fails("[source a]\npath = a.json\npath = b.json\n");
  fails("[source a]\npath = a.json\n[fusion]\n[fusion]\n");
  fails("name = x\n");
  fails("[source a]\npath a.json\n", ErrorKind::kParse);
  fails("[source a\n", ErrorKind::kParse);
}

TEST_F(ConfigTest, FileStemNamesUnnamedConfig) {
  write_text_file(dir_ / "variant.cfg", "[source a]\npath = a.json\n");
  EXPECT_EQ(parse_config(dir_ / "variant.cfg").name, "variant");
}

}  // namespace
}  // namespace detfuse
