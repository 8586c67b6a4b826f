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

#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "detfuse/error.hpp"
#include "detfuse/evaluation.hpp"
#include "detfuse/fusion.hpp"
#include "detfuse/geometry.hpp"
#include "detfuse/simulator.hpp"
#include "detfuse/slicing.hpp"
#include "detfuse/thresholding.hpp"

namespace detfuse {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files and scalars

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a sibling temporary and renames, so readers never observe
/// a partially written file.
inline void write_text_file(const fs::path& path, std::string_view text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + path.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move into '" + path.string() + "': " + ec.message());
}

inline json parse_json_text(std::string_view text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline json read_json_file(const fs::path& path) {
  return parse_json_text(read_text_file(path), path.string());
}

inline void write_json_file(const fs::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/// Six-decimal quantization used for every written coordinate.
inline double round6(double v) {
  const double r = std::round(v * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;  // no negative zero on disk
}

inline std::uint64_t file_digest(const fs::path& path) {
  return fnv1a64(read_text_file(path));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

inline const json& require(const json& obj, const char* field, const std::string& ctx) {
  if (!obj.is_object()) throw ValidationError(ctx + ": expected an object");
  auto it = obj.find(field);
  if (it == obj.end()) throw ValidationError(ctx + "." + field + ": missing");
  return *it;
}

inline double number_field(const json& obj, const char* field, const std::string& ctx) {
  const json& v = require(obj, field, ctx);
  if (!v.is_number()) throw ValidationError(ctx + "." + field + ": not a number");
  return v.get<double>();
}

inline long long integer_field(const json& obj, const char* field, const std::string& ctx) {
  const json& v = require(obj, field, ctx);
  if (!v.is_number_integer()) {
    throw ValidationError(ctx + "." + field + ": not an integer");
  }
  return v.get<long long>();
}

inline std::string id_field(const json& obj, const char* field, const std::string& ctx) {
  const json& v = require(obj, field, ctx);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw ValidationError(ctx + "." + field + ": expected string or integer");
}

inline std::string string_field(const json& obj, const char* field, const std::string& ctx) {
  const json& v = require(obj, field, ctx);
  if (!v.is_string()) throw ValidationError(ctx + "." + field + ": not a string");
  return v.get<std::string>();
}

inline std::vector<double> number_array(const json& obj, const char* field,
                                        std::size_t n, const std::string& ctx) {
  const json& v = require(obj, field, ctx);
  if (!v.is_array() || v.size() != n) {
    throw ValidationError(ctx + "." + field + ": expected " + std::to_string(n) +
                          " numbers");
  }
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) {
      throw ValidationError(ctx + "." + field + ": expected numeric entries");
    }
    const double d = e.get<double>();
    if (!std::isfinite(d)) throw ValidationError(ctx + "." + field + ": not finite");
    out.push_back(d);
  }
  return out;
}

/// Runs `fn`, prefixing any validation failure with the record context.
template <typename Fn>
auto in_context(const std::string& ctx, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kValidation) throw;
    std::string msg = e.what();
    const std::string prefix = "validation error: ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    if (msg.rfind(ctx, 0) == 0) throw;
    throw ValidationError(ctx + ": " + msg);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Categories

struct CategoryMap {
  std::map<long long, std::string> names;

  static CategoryMap Fisheye() {
    CategoryMap m;
    const auto& cls = fisheye_classes();
    for (std::size_t i = 0; i < cls.size(); ++i) {
      m.names[static_cast<long long>(i)] = cls[i];
    }
    return m;
  }

  const std::string& Name(long long id, const std::string& ctx) const {
    auto it = names.find(id);
    if (it == names.end()) {
      throw ValidationError(ctx + ".category_id: unknown category " +
                            std::to_string(id));
    }
    return it->second;
  }

  long long Id(const std::string& name) const {
    for (const auto& [id, n] : names) {
      if (n == name) return id;
    }
    throw ValidationError("label '" + name + "' has no category id");
  }

  Vocabulary vocabulary() const {
    Vocabulary v;
    for (const auto& [id, n] : names) v.insert(n);
    return v;
  }

  friend bool operator==(const CategoryMap&, const CategoryMap&) = default;
};

inline CategoryMap parse_categories(const json& arr, const std::string& ctx) {
  if (!arr.is_array()) throw ValidationError(ctx + ": expected an array");
  CategoryMap m;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string rc = ctx + "[" + std::to_string(i) + "]";
    const long long id = detail::integer_field(arr[i], "id", rc);
    std::string name = detail::string_field(arr[i], "name", rc);
    if (m.names.contains(id)) throw ValidationError(rc + ".id: duplicate id");
    if (!seen.insert(name).second) throw ValidationError(rc + ".name: duplicate name");
    m.names[id] = std::move(name);
  }
  return m;
}

inline json categories_to_json(const CategoryMap& m) {
  json arr = json::array();
  for (const auto& [id, name] : m.names) arr.push_back({{"id", id}, {"name", name}});
  return arr;
}

// ---------------------------------------------------------------------------
// Detections

/// One detector's (or fusion stage's) output. Records carry COCO-style
/// (x, y, w, h) boxes on disk and corner boxes in memory. `windows` is either
/// empty or parallel to `detections` for per-slice files.
struct DetectionFile {
  std::string source_id;
  CategoryMap categories = CategoryMap::Fisheye();
  std::vector<Detection> detections;
  std::vector<SliceWindow> windows;

  bool sliced() const { return !windows.empty(); }
};

/// Accepts either a bare COCO results array or an object with
/// {source_id, categories, detections}. Bare arrays take `default_source`
/// and `fallback` categories.
inline DetectionFile parse_detections_json(const json& root,
                                           const std::string& default_source,
                                           const CategoryMap& fallback = CategoryMap::Fisheye(),
                                           const std::string& origin = "detections") {
  DetectionFile f;
  f.source_id = default_source;
  f.categories = fallback;
  const json* records = &root;
  if (root.is_object()) {
    if (auto it = root.find("source_id"); it != root.end()) {
      if (!it->is_string()) throw ValidationError(origin + ".source_id: not a string");
      f.source_id = it->get<std::string>();
    }
    if (auto it = root.find("categories"); it != root.end()) {
      f.categories = parse_categories(*it, origin + ".categories");
    }
    records = &detail::require(root, "detections", origin);
  }
  if (!records->is_array()) {
    throw ValidationError(origin + ": detections must be an array");
  }

  bool any_window = false, all_window = true;
  std::vector<std::optional<SliceWindow>> windows;
  for (std::size_t i = 0; i < records->size(); ++i) {
    const json& rec = (*records)[i];
    const std::string ctx = origin + "[" + std::to_string(i) + "]";
    const std::string image_id = detail::id_field(rec, "image_id", ctx);
    const long long cat = detail::integer_field(rec, "category_id", ctx);
    const auto bb = detail::number_array(rec, "bbox", 4, ctx);
    const double score = detail::number_field(rec, "score", ctx);
    if (!(score >= 0.0 && score <= 1.0)) {
      throw ValidationError(ctx + ".score: " + std::to_string(score) +
                            " outside [0, 1]");
    }
    if (!(bb[2] > 0) || !(bb[3] > 0)) {
      throw ValidationError(ctx + ".bbox: width and height must be positive");
    }
    std::string source = f.source_id;
    if (auto it = rec.find("source_id"); it != rec.end()) {
      source = detail::id_field(rec, "source_id", ctx);
    }
    Box box = detail::in_context(ctx + ".bbox", [&] {
      return Box::FromXywh(bb[0], bb[1], bb[2], bb[3]);
    });
    f.detections.push_back({box, score, f.categories.Name(cat, ctx), image_id,
                            std::move(source)});
    if (auto it = rec.find("slice"); it != rec.end()) {
      any_window = true;
      const auto w = detail::number_array(rec, "slice", 4, ctx);
      SliceWindow sw{static_cast<int>(w[0]), static_cast<int>(w[1]),
                     static_cast<int>(w[2]), static_cast<int>(w[3])};
      if (sw.width() <= 0 || sw.height() <= 0 || sw.x0 < 0 || sw.y0 < 0) {
        throw ValidationError(ctx + ".slice: invalid window");
      }
      windows.push_back(sw);
    } else {
      all_window = false;
      windows.emplace_back();
    }
  }
  if (any_window) {
    if (!all_window) {
      throw ValidationError(origin + ": either every record or none carries a slice window");
    }
    for (const auto& w : windows) f.windows.push_back(*w);
  }
  return f;
}

inline DetectionFile parse_detections(const fs::path& path,
                                      const CategoryMap& fallback = CategoryMap::Fisheye()) {
  return parse_detections_json(read_json_file(path), path.stem().string(), fallback,
                               path.string());
}

inline json detection_record_json(const Detection& d, const DetectionFile& f,
                                  std::size_t index) {
  json rec;
  rec["image_id"] = d.image_id;
  rec["category_id"] = f.categories.Id(d.label);
  rec["bbox"] = {round6(d.box.x1()), round6(d.box.y1()), round6(d.box.width()),
                 round6(d.box.height())};
  rec["score"] = d.score;
  if (d.source_id != f.source_id) rec["source_id"] = d.source_id;
  if (f.sliced()) {
    const auto& w = f.windows.at(index);
    rec["slice"] = {w.x0, w.y0, w.x1, w.y1};
  }
  return rec;
}

/// One record per line inside a valid JSON document.
inline std::string format_detections(const DetectionFile& f) {
  if (f.sliced() && f.windows.size() != f.detections.size()) {
    throw ValidationError("slice windows not parallel to detections");
  }
  std::string out = "{\"source_id\": " + json(f.source_id).dump() +
                    ", \"categories\": " + categories_to_json(f.categories).dump() +
                    ",\n\"detections\": [";
  for (std::size_t i = 0; i < f.detections.size(); ++i) {
    f.detections[i].Validate();
    out += (i == 0 ? "\n  " : ",\n  ");
    out += detection_record_json(f.detections[i], f, i).dump();
  }
  out += f.detections.empty() ? "]}\n" : "\n]}\n";
  return out;
}

inline void write_detections(const DetectionFile& f, const fs::path& path) {
  write_text_file(path, format_detections(f));
}

inline void write_detections(std::span<const Detection> dets, const fs::path& path,
                             const std::string& source_id,
                             const CategoryMap& categories = CategoryMap::Fisheye()) {
  DetectionFile f;
  f.source_id = source_id;
  f.categories = categories;
  f.detections.assign(dets.begin(), dets.end());
  write_detections(f, path);
}

// ---------------------------------------------------------------------------
// Ground truth

struct ImageInfo {
  std::string id;
  int width = 0;
  int height = 0;
  std::string file_name;
};

struct GroundTruthFile {
  std::vector<ImageInfo> images;
  std::vector<GroundTruthBox> annotations;
  CategoryMap categories;
  /// Non-fatal findings, e.g. boxes clipped to the image extent.
  std::vector<std::string> warnings;
};

inline GroundTruthFile parse_ground_truth_json(const json& root,
                                               const std::string& origin = "ground_truth") {
  if (!root.is_object()) throw ValidationError(origin + ": expected an object");
  GroundTruthFile g;
  g.categories = parse_categories(detail::require(root, "categories", origin),
                                  origin + ".categories");
  std::map<std::string, std::size_t> image_index;
  const json& images = detail::require(root, "images", origin);
  if (!images.is_array()) throw ValidationError(origin + ".images: expected an array");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string ctx = origin + ".images[" + std::to_string(i) + "]";
    ImageInfo info;
    info.id = detail::id_field(images[i], "id", ctx);
    info.width = static_cast<int>(detail::integer_field(images[i], "width", ctx));
    info.height = static_cast<int>(detail::integer_field(images[i], "height", ctx));
    if (info.width <= 0 || info.height <= 0) {
      throw ValidationError(ctx + ": width and height must be positive");
    }
    if (auto it = images[i].find("file_name"); it != images[i].end() && it->is_string()) {
      info.file_name = it->get<std::string>();
    }
    if (!image_index.emplace(info.id, g.images.size()).second) {
      throw ValidationError(ctx + ".id: duplicate image id '" + info.id + "'");
    }
    g.images.push_back(std::move(info));
  }

  const json& anns = detail::require(root, "annotations", origin);
  if (!anns.is_array()) throw ValidationError(origin + ".annotations: expected an array");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string ctx = origin + ".annotations[" + std::to_string(i) + "]";
    const std::string image_id = detail::id_field(anns[i], "image_id", ctx);
    auto im = image_index.find(image_id);
    if (im == image_index.end()) {
      throw ValidationError(ctx + ".image_id: unknown image '" + image_id + "'");
    }
    const auto& info = g.images[im->second];
    const std::string& label =
        g.categories.Name(detail::integer_field(anns[i], "category_id", ctx), ctx);
    const auto bb = detail::number_array(anns[i], "bbox", 4, ctx);
    if (!(bb[2] > 0) || !(bb[3] > 0)) {
      throw ValidationError(ctx + ".bbox: zero-area box");
    }
    double x1 = bb[0], y1 = bb[1], x2 = bb[0] + bb[2], y2 = bb[1] + bb[3];
    if (x1 < 0 || y1 < 0 || x2 > info.width || y2 > info.height) {
      x1 = std::max(x1, 0.0);
      y1 = std::max(y1, 0.0);
      x2 = std::min(x2, static_cast<double>(info.width));
      y2 = std::min(y2, static_cast<double>(info.height));
      g.warnings.push_back(ctx + ".bbox: clipped to image extent");
      if (!(x1 < x2) || !(y1 < y2)) {
        throw ValidationError(ctx + ".bbox: lies entirely outside image '" +
                              image_id + "'");
      }
    }
    g.annotations.push_back({Box(x1, y1, x2, y2), label, image_id});
  }
  return g;
}

inline GroundTruthFile parse_ground_truth(const fs::path& path) {
  return parse_ground_truth_json(read_json_file(path), path.string());
}

inline json ground_truth_to_json(const GroundTruthFile& g) {
  json images = json::array();
  for (const auto& im : g.images) {
    images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height},
                      {"file_name", im.file_name}});
  }
  json anns = json::array();
  for (std::size_t i = 0; i < g.annotations.size(); ++i) {
    const auto& a = g.annotations[i];
    anns.push_back({{"id", i + 1},
                    {"image_id", a.image_id},
                    {"category_id", g.categories.Id(a.label)},
                    {"bbox", {round6(a.box.x1()), round6(a.box.y1()),
                              round6(a.box.width()), round6(a.box.height())}}});
  }
  json root;
  root["images"] = std::move(images);
  root["annotations"] = std::move(anns);
  root["categories"] = categories_to_json(g.categories);
  return root;
}

inline void write_ground_truth(const GroundTruthFile& g, const fs::path& path) {
  write_json_file(path, ground_truth_to_json(g));
}

/// Ground-truth tables for synthetic scenes, with Fisheye category ids.
inline GroundTruthFile ground_truth_from_scenes(const std::vector<SyntheticScene>& scenes) {
  GroundTruthFile gt;
  gt.categories = CategoryMap::Fisheye();
  for (const auto& s : scenes) {
    gt.images.push_back({s.image_id, s.image_w, s.image_h, s.image_id + ".png"});
  }
  gt.annotations = scene_ground_truth(scenes);
  return gt;
}

/// Per-slice detection file: image-coordinate detections projected onto
/// `plan`, each record tagged with its window.
inline DetectionFile sliced_detection_file(std::span<const Detection> dets,
                                           const SlicePlan& plan,
                                           const std::string& source_id) {
  DetectionFile f;
  f.source_id = source_id;
  for (auto& [w, d] : project_to_slices(dets, plan)) {
    f.windows.push_back(w);
    f.detections.push_back(std::move(d));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Reports

inline json prf_json(const PrecisionRecallF1& p) {
  return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

inline json counts_json(const ClassCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
}

inline json report_to_json(const EvalReport& r) {
  json classes = json::object();
  for (const auto& [label, cr] : r.per_class) {
    json c = counts_json(cr.counts);
    c.update(prf_json(cr.prf));
    c["ap"] = cr.ap ? json(*cr.ap) : json(nullptr);
    classes[label] = std::move(c);
  }
  json micro = counts_json(r.micro_counts);
  micro.update(prf_json(r.micro));
  json root;
  root["iou_threshold"] = r.iou_thresh;
  root["micro"] = std::move(micro);
  root["macro_f1"] = r.macro_f1;
  root["map"] = r.map ? json(*r.map) : json(nullptr);
  root["classes"] = std::move(classes);
  return root;
}

// ---------------------------------------------------------------------------
// Detector profiles

inline json profile_to_json(const DetectorProfile& p) {
  json classes = json::object();
  for (const auto& [label, r] : p.classes) {
    classes[label] = {{"recall", r.recall}, {"precision", r.precision}};
  }
  return {{"name", p.name},
          {"jitter", p.jitter},
          {"tp_score", {{"mean", p.tp_score.mean}, {"concentration", p.tp_score.concentration}}},
          {"fp_score", {{"mean", p.fp_score.mean}, {"concentration", p.fp_score.concentration}}},
          {"classes", std::move(classes)}};
}

inline DetectorProfile parse_profile_json(const json& root, const std::string& origin) {
  DetectorProfile p;
  p.name = detail::string_field(root, "name", origin);
  if (root.contains("jitter")) p.jitter = detail::number_field(root, "jitter", origin);
  for (auto [key, model] : {std::pair{"tp_score", &p.tp_score}, {"fp_score", &p.fp_score}}) {
    if (!root.contains(key)) continue;
    const json& sm = root.at(key);
    const std::string ctx = origin + "." + key;
    if (sm.contains("mean")) model->mean = detail::number_field(sm, "mean", ctx);
    if (sm.contains("concentration")) {
      model->concentration = detail::number_field(sm, "concentration", ctx);
    }
  }
  const json& classes = detail::require(root, "classes", origin);
  if (!classes.is_object()) throw ValidationError(origin + ".classes: expected an object");
  for (const auto& [label, rates] : classes.items()) {
    const std::string ctx = origin + ".classes." + label;
    p.classes[label] = {detail::number_field(rates, "recall", ctx),
                        detail::number_field(rates, "precision", ctx)};
  }
  p.Validate();
  return p;
}

inline DetectorProfile parse_profile(const fs::path& path) {
  return parse_profile_json(read_json_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Pipeline configuration

enum class ThresholdMode { kNone, kFixed, kOtsu };
enum class ThresholdOrder { kAfterFusion, kBeforeFusion };
enum class F1Aggregate { kMicro, kMacro };

/// Optional check that a sliced source's windows belong to one plan.
struct SlicePlanSpec {
  int image_w = 0, image_h = 0, slice_w = 0, slice_h = 0;
  double overlap = 0.25;
};

struct SourceConfig {
  std::string id;
  fs::path path;
  double weight = 1.0;
  bool sliced = false;
  FusionParams slice_fusion;
  std::optional<SlicePlanSpec> plan;
};

struct ThresholdConfig {
  ThresholdMode mode = ThresholdMode::kNone;
  double value = 0.0;
  std::size_t bins = kDefaultHistogramBins;
  ThresholdOrder order = ThresholdOrder::kAfterFusion;
};

struct EvalConfig {
  fs::path gt;
  double iou_threshold = kDefaultMatchIou;
  F1Aggregate aggregate = F1Aggregate::kMicro;
};

struct PipelineConfig {
  std::string name;
  std::vector<SourceConfig> sources;
  FusionParams fusion;
  ThresholdConfig threshold;
  std::optional<EvalConfig> eval;
  /// Verbatim config text, echoed into run manifests.
  std::string text;
};

namespace detail {

struct IniEntry {
  std::string key, value;
  int line = 0;
};

struct IniSection {
  std::string kind;  // "" for the top level
  std::string arg;   // e.g. the source id in [source yolor]
  int line = 0;
  std::vector<IniEntry> entries;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<IniSection> parse_ini(std::string_view text, const std::string& origin) {
  std::vector<IniSection> sections(1);
  std::istringstream in{std::string(text)};
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(line);
    if (s.front() == '[') {
      if (s.back() != ']') throw ParseError(where + ": unterminated section header");
      const std::string inner = trim(std::string_view(s).substr(1, s.size() - 2));
      IniSection sec;
      sec.line = line;
      const auto sp = inner.find_first_of(" \t");
      sec.kind = inner.substr(0, sp);
      if (sp != std::string::npos) sec.arg = trim(std::string_view(inner).substr(sp));
      if (sec.kind.empty()) throw ParseError(where + ": empty section name");
      sections.push_back(std::move(sec));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
    IniEntry e{trim(std::string_view(s).substr(0, eq)),
               trim(std::string_view(s).substr(eq + 1)), line};
    if (e.key.empty()) throw ParseError(where + ": empty key");
    for (const auto& prev : sections.back().entries) {
      if (prev.key == e.key) throw ConfigError(where + ": duplicate key '" + e.key + "'");
    }
    sections.back().entries.push_back(std::move(e));
  }
  return sections;
}

inline double parse_double(const IniEntry& e, const std::string& origin) {
  double v = 0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [ptr, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ConfigError(origin + ":" + std::to_string(e.line) + ": '" + e.key +
                      "' expects a number, got '" + e.value + "'");
  }
  return v;
}

inline long long parse_int(const IniEntry& e, const std::string& origin) {
  long long v = 0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [ptr, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(origin + ":" + std::to_string(e.line) + ": '" + e.key +
                      "' expects an integer, got '" + e.value + "'");
  }
  return v;
}

inline bool parse_bool(const IniEntry& e, const std::string& origin) {
  if (e.value == "true" || e.value == "yes" || e.value == "1") return true;
  if (e.value == "false" || e.value == "no" || e.value == "0") return false;
  throw ConfigError(origin + ":" + std::to_string(e.line) + ": '" + e.key +
                    "' expects true or false");
}

}  // namespace detail

/// Parses the sectioned `key = value` pipeline format. Paths are resolved
/// against `base_dir`. Unknown sections and keys are errors.
inline PipelineConfig parse_config_text(std::string_view text, const fs::path& base_dir,
                                        const std::string& origin = "config") {
  using detail::IniEntry;
  PipelineConfig cfg;
  cfg.text = std::string(text);
  const auto sections = detail::parse_ini(text, origin);
  auto at = [&](const IniEntry& e) { return origin + ":" + std::to_string(e.line); };
  auto bad_key = [&](const IniEntry& e, const std::string& sec) {
    return ConfigError(at(e) + ": unknown key '" + e.key + "' in [" + sec + "]");
  };
  auto in_range = [&](const IniEntry& e, double v, double lo, double hi, bool lo_open,
                      bool hi_open) {
    const bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    if (!ok) {
      throw ConfigError(at(e) + ": '" + e.key + "' = " + e.value + " out of range");
    }
    return v;
  };
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  std::set<std::string> seen_sections;

  for (const auto& sec : sections) {
    if (sec.kind != "source" && !sec.kind.empty() &&
        !seen_sections.insert(sec.kind).second) {
      throw ConfigError(origin + ":" + std::to_string(sec.line) + ": duplicate section [" +
                        sec.kind + "]");
    }
    if (sec.kind.empty()) {
      for (const auto& e : sec.entries) {
        if (e.key == "name") cfg.name = e.value;
        else throw bad_key(e, "top level");
      }
    } else if (sec.kind == "source") {
      SourceConfig src;
      src.id = sec.arg;
      if (src.id.empty()) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) +
                          ": [source] needs an id, e.g. [source yolor_1280]");
      }
      for (const auto& s : cfg.sources) {
        if (s.id == src.id) {
          throw ConfigError(origin + ":" + std::to_string(sec.line) +
                            ": duplicate source_id '" + src.id + "'");
        }
      }
      SlicePlanSpec plan;
      int plan_keys = 0;
      bool has_path = false;
      for (const auto& e : sec.entries) {
        if (e.key == "path") {
          src.path = resolve(e.value);
          has_path = true;
        } else if (e.key == "weight") {
          src.weight = detail::parse_double(e, origin);
          if (!(src.weight > 0)) throw ConfigError(at(e) + ": weight must be positive");
        } else if (e.key == "slice") {
          src.sliced = detail::parse_bool(e, origin);
        } else if (e.key == "slice_method") {
          src.slice_fusion.method = parse_fusion_method(e.value);
        } else if (e.key == "slice_iou") {
          src.slice_fusion.iou_threshold =
              in_range(e, detail::parse_double(e, origin), 0, 1, true, true);
        } else if (e.key == "image_width") {
          plan.image_w = static_cast<int>(detail::parse_int(e, origin)), ++plan_keys;
        } else if (e.key == "image_height") {
          plan.image_h = static_cast<int>(detail::parse_int(e, origin)), ++plan_keys;
        } else if (e.key == "slice_width") {
          plan.slice_w = static_cast<int>(detail::parse_int(e, origin)), ++plan_keys;
        } else if (e.key == "slice_height") {
          plan.slice_h = static_cast<int>(detail::parse_int(e, origin)), ++plan_keys;
        } else if (e.key == "overlap") {
          plan.overlap = in_range(e, detail::parse_double(e, origin), 0, 1, false, true);
        } else {
          throw bad_key(e, "source " + src.id);
        }
      }
      if (!has_path) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) + ": source '" +
                          src.id + "' has no path");
      }
      if (!fs::exists(src.path)) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) + ": source '" +
                          src.id + "' file not found: " + src.path.string());
      }
      if (plan_keys != 0 && plan_keys != 4) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) + ": source '" +
                          src.id +
                          "' needs all of image_width, image_height, slice_width, "
                          "slice_height or none");
      }
      if (plan_keys == 4) {
        if (!src.sliced) {
          throw ConfigError(origin + ":" + std::to_string(sec.line) + ": source '" +
                            src.id + "' declares a slice plan but slice = false");
        }
        src.plan = plan;
      }
      cfg.sources.push_back(std::move(src));
    } else if (sec.kind == "fusion") {
      for (const auto& e : sec.entries) {
        if (e.key == "method") {
          try {
            cfg.fusion.method = parse_fusion_method(e.value);
          } catch (const Error& err) {
            throw ConfigError(at(e) + ": " + e.value + " is not a fusion method");
          }
        } else if (e.key == "iou_threshold") {
          cfg.fusion.iou_threshold =
              in_range(e, detail::parse_double(e, origin), 0, 1, true, true);
        } else if (e.key == "soft_nms_floor") {
          cfg.fusion.soft_nms_floor =
              in_range(e, detail::parse_double(e, origin), 0, 1, false, true);
        } else {
          throw bad_key(e, "fusion");
        }
      }
    } else if (sec.kind == "threshold") {
      cfg.threshold.mode = ThresholdMode::kOtsu;
      const IniEntry* value = nullptr;
      for (const auto& e : sec.entries) {
        if (e.key == "mode") {
          if (e.value == "otsu") cfg.threshold.mode = ThresholdMode::kOtsu;
          else if (e.value == "fixed") cfg.threshold.mode = ThresholdMode::kFixed;
          else if (e.value == "none") cfg.threshold.mode = ThresholdMode::kNone;
          else throw ConfigError(at(e) + ": mode must be otsu, fixed or none");
        } else if (e.key == "value") {
          cfg.threshold.value = in_range(e, detail::parse_double(e, origin), 0, 1, false, false);
          value = &e;
        } else if (e.key == "bins") {
          const auto b = detail::parse_int(e, origin);
          if (b < 2) throw ConfigError(at(e) + ": bins must be >= 2");
          cfg.threshold.bins = static_cast<std::size_t>(b);
        } else if (e.key == "order") {
          if (e.value == "after_fusion") cfg.threshold.order = ThresholdOrder::kAfterFusion;
          else if (e.value == "before_fusion") cfg.threshold.order = ThresholdOrder::kBeforeFusion;
          else throw ConfigError(at(e) + ": order must be after_fusion or before_fusion");
        } else {
          throw bad_key(e, "threshold");
        }
      }
      if (cfg.threshold.mode == ThresholdMode::kFixed && !value) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) +
                          ": fixed threshold mode needs a value");
      }
      if (cfg.threshold.mode != ThresholdMode::kFixed && value) {
        throw ConfigError(at(*value) + ": 'value' conflicts with a non-fixed mode");
      }
    } else if (sec.kind == "eval") {
      EvalConfig ev;
      bool has_gt = false;
      for (const auto& e : sec.entries) {
        if (e.key == "gt") {
          ev.gt = resolve(e.value);
          has_gt = true;
        } else if (e.key == "iou_threshold") {
          ev.iou_threshold = in_range(e, detail::parse_double(e, origin), 0, 1, true, true);
        } else if (e.key == "aggregate") {
          if (e.value == "micro") ev.aggregate = F1Aggregate::kMicro;
          else if (e.value == "macro") ev.aggregate = F1Aggregate::kMacro;
          else throw ConfigError(at(e) + ": aggregate must be micro or macro");
        } else {
          throw bad_key(e, "eval");
        }
      }
      if (!has_gt) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) + ": [eval] needs gt");
      }
      if (!fs::exists(ev.gt)) {
        throw ConfigError(origin + ":" + std::to_string(sec.line) +
                          ": ground truth file not found: " + ev.gt.string());
      }
      cfg.eval = ev;
    } else {
      throw ConfigError(origin + ":" + std::to_string(sec.line) + ": unknown section [" +
                        sec.kind + "]");
    }
  }
  if (cfg.sources.empty()) throw ConfigError(origin + ": no [source ...] sections");
  cfg.fusion.Validate();
  return cfg;
}

inline PipelineConfig parse_config(const fs::path& path) {
  PipelineConfig cfg = parse_config_text(read_text_file(path), path.parent_path(),
                                         path.string());
  if (cfg.name.empty()) cfg.name = path.stem().string();
  return cfg;
}

}  // namespace detfuse
