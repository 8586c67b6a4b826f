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
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "detfuse/error.hpp"
#include "detfuse/evaluation.hpp"
#include "detfuse/fusion.hpp"
#include "detfuse/io.hpp"
#include "detfuse/slicing.hpp"
#include "detfuse/thresholding.hpp"

namespace detfuse {

inline constexpr const char* kToolkitVersion = "0.1.0";

namespace stage {
inline constexpr const char* kIngest = "ingest";
inline constexpr const char* kSliceAggregation = "slice_aggregation";
inline constexpr const char* kWeighting = "source_weighting";
inline constexpr const char* kFusion = "fusion";
inline constexpr const char* kThresholding = "thresholding";
inline constexpr const char* kEvaluation = "evaluation";
}  // namespace stage

/// Stage sequence a run executes for the given threshold placement.
inline std::vector<std::string> stage_sequence(ThresholdOrder order) {
  if (order == ThresholdOrder::kBeforeFusion) {
    return {stage::kIngest, stage::kSliceAggregation, stage::kWeighting,
            stage::kThresholding, stage::kFusion, stage::kEvaluation};
  }
  return {stage::kIngest, stage::kSliceAggregation, stage::kWeighting,
          stage::kFusion, stage::kThresholding, stage::kEvaluation};
}

/// A detection as ingested: record `index` of source `source_id`.
struct SourceRef {
  std::string source_id;
  std::size_t index = 0;
  friend auto operator<=>(const SourceRef&, const SourceRef&) = default;
};

struct StageRecord {
  std::string name;
  std::size_t input_count = 0;
  std::size_t output_count = 0;
  double millis = 0.0;
};

struct ThresholdOutcome {
  ThresholdMode mode = ThresholdMode::kNone;
  double value = 0.0;
  std::optional<OtsuResult> otsu;
};

struct PipelineRun {
  PipelineConfig config;
  std::vector<StageRecord> stages;
  std::vector<Detection> detections;
  /// trace[i] lists the ingested detections that produced detections[i].
  std::vector<std::vector<SourceRef>> trace;
  /// All ingested detections per source, for traceability checks.
  std::map<std::string, std::vector<Detection>> ingested;
  ThresholdOutcome threshold;
  std::optional<EvalReport> report;
  std::map<std::string, std::string> input_digests;  // path -> hex digest
  std::string gt_digest;
};

namespace detail {

/// Detections paired with their provenance as they move between stages.
struct Tracked {
  std::vector<Detection> dets;
  std::vector<std::vector<SourceRef>> refs;

  void Append(Tracked&& o) {
    dets.insert(dets.end(), std::make_move_iterator(o.dets.begin()),
                std::make_move_iterator(o.dets.end()));
    refs.insert(refs.end(), std::make_move_iterator(o.refs.begin()),
                std::make_move_iterator(o.refs.end()));
  }
};

inline Tracked remap_tracked(const Tracked& in, const FusionResult& r) {
  Tracked out;
  out.dets = r.detections;
  for (const auto& members : r.members) {
    std::vector<SourceRef> refs;
    for (std::size_t m : members) {
      refs.insert(refs.end(), in.refs[m].begin(), in.refs[m].end());
    }
    std::sort(refs.begin(), refs.end());
    out.refs.push_back(std::move(refs));
  }
  return out;
}

class StageTimer {
 public:
  StageTimer(PipelineRun& run, const char* name, std::size_t input)
      : run_(run), name_(name), input_(input),
        start_(std::chrono::steady_clock::now()) {}

  void Done(std::size_t output) {
    const auto dt = std::chrono::steady_clock::now() - start_;
    run_.stages.push_back(
        {name_, input_, output,
         std::chrono::duration<double, std::milli>(dt).count()});
  }

 private:
  PipelineRun& run_;
  const char* name_;
  std::size_t input_;
  std::chrono::steady_clock::time_point start_;
};

template <typename Fn>
auto run_stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("stage '") + name + "' failed: " + e.what());
  }
}

inline Tracked aggregate_source(const SourceConfig& src, const DetectionFile& file,
                                Tracked in) {
  if (!src.sliced) return in;
  if (!file.sliced()) {
    throw ValidationError("source '" + src.id +
                          "' is configured as sliced but its records carry no slice windows");
  }
  std::optional<SlicePlan> plan;
  if (src.plan) {
    plan = plan_slices(src.plan->image_w, src.plan->image_h, src.plan->slice_w,
                       src.plan->slice_h, src.plan->overlap);
  }
  // image -> window -> indices into `in`
  std::map<std::string, std::map<SliceWindow, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < in.dets.size(); ++i) {
    const SliceWindow& w = file.windows[i];
    if (plan && !plan->Contains(w)) {
      throw ValidationError("source '" + src.id + "' record " + std::to_string(i) +
                            ": slice window is not part of the configured plan");
    }
    groups[in.dets[i].image_id][w].push_back(i);
  }
  Tracked out;
  for (const auto& [image, windows] : groups) {
    std::vector<SliceDetections> per_slice;
    Tracked flat;  // global-coordinate order matching aggregate's concatenation
    for (const auto& [window, idx] : windows) {
      SliceDetections sd{window, {}};
      for (std::size_t i : idx) {
        sd.detections.push_back(in.dets[i]);
        flat.refs.push_back(in.refs[i]);
      }
      per_slice.push_back(std::move(sd));
    }
    out.Append(remap_tracked(flat, aggregate_slices_traced(per_slice, src.slice_fusion)));
  }
  return out;
}

inline Tracked apply_threshold(Tracked in, const ThresholdConfig& cfg,
                               ThresholdOutcome& outcome) {
  outcome.mode = cfg.mode;
  if (cfg.mode == ThresholdMode::kNone) return in;
  if (cfg.mode == ThresholdMode::kFixed) {
    outcome.value = cfg.value;
  } else {
    outcome.otsu = otsu_threshold(build_histogram(in.dets, cfg.bins));
    outcome.value = outcome.otsu->threshold;
  }
  Tracked out;
  for (std::size_t i = 0; i < in.dets.size(); ++i) {
    if (in.dets[i].score >= outcome.value) {
      out.dets.push_back(std::move(in.dets[i]));
      out.refs.push_back(std::move(in.refs[i]));
    }
  }
  return out;
}

}  // namespace detail

/// Runs ingest, per-source slice aggregation, source weighting, fusion,
/// thresholding and evaluation in that order (thresholding moves ahead of
/// fusion when configured). Nothing is written; see write_run().
inline PipelineRun run_pipeline(const PipelineConfig& config) {
  PipelineRun run;
  run.config = config;
  run.config.fusion.Validate();

  std::optional<GroundTruthFile> gt;
  if (config.eval) {
    gt = detail::run_stage(stage::kIngest, [&] { return parse_ground_truth(config.eval->gt); });
    run.gt_digest = hex64(file_digest(config.eval->gt));
    run.input_digests[config.eval->gt.string()] = run.gt_digest;
  }
  const CategoryMap categories = gt ? gt->categories : CategoryMap::Fisheye();

  // Ingest.
  std::vector<std::pair<DetectionFile, detail::Tracked>> sources;
  {
    detail::StageTimer timer(run, stage::kIngest, 0);
    std::size_t total = 0;
    detail::run_stage(stage::kIngest, [&] {
      for (const auto& src : config.sources) {
        DetectionFile f = parse_detections(src.path, categories);
        run.input_digests[src.path.string()] = hex64(file_digest(src.path));
        detail::Tracked t;
        for (std::size_t i = 0; i < f.detections.size(); ++i) {
          f.detections[i].source_id = src.id;
          t.dets.push_back(f.detections[i]);
          t.refs.push_back({{src.id, i}});
        }
        run.ingested[src.id] = f.detections;
        total += t.dets.size();
        sources.emplace_back(std::move(f), std::move(t));
      }
      return 0;
    });
    timer.Done(total);
  }

  // Per-source slice aggregation.
  detail::Tracked merged;
  {
    std::size_t in_count = 0;
    for (const auto& s : sources) in_count += s.second.dets.size();
    detail::StageTimer timer(run, stage::kSliceAggregation, in_count);
    detail::run_stage(stage::kSliceAggregation, [&] {
      for (std::size_t k = 0; k < sources.size(); ++k) {
        merged.Append(detail::aggregate_source(config.sources[k], sources[k].first,
                                               std::move(sources[k].second)));
      }
      return 0;
    });
    timer.Done(merged.dets.size());
  }

  // Source weighting.
  {
    detail::StageTimer timer(run, stage::kWeighting, merged.dets.size());
    std::map<std::string, double> weights;
    for (const auto& s : config.sources) weights[s.id] = s.weight;
    merged.dets = detail::run_stage(stage::kWeighting,
                                    [&] { return apply_source_weights(merged.dets, weights); });
    timer.Done(merged.dets.size());
  }

  auto threshold_stage = [&] {
    detail::StageTimer timer(run, stage::kThresholding, merged.dets.size());
    merged = detail::run_stage(stage::kThresholding, [&] {
      return detail::apply_threshold(std::move(merged), config.threshold, run.threshold);
    });
    timer.Done(merged.dets.size());
  };
  auto fusion_stage = [&] {
    detail::StageTimer timer(run, stage::kFusion, merged.dets.size());
    FusionParams fp = config.fusion;
    fp.source_weights.reset();  // already applied by the weighting stage
    merged = detail::run_stage(stage::kFusion, [&] {
      return detail::remap_tracked(merged, fuse_per_image(merged.dets, fp));
    });
    timer.Done(merged.dets.size());
  };
  if (config.threshold.order == ThresholdOrder::kBeforeFusion) {
    threshold_stage();
    fusion_stage();
  } else {
    fusion_stage();
    threshold_stage();
  }

  run.detections = std::move(merged.dets);
  run.trace = std::move(merged.refs);

  if (gt) {
    detail::StageTimer timer(run, stage::kEvaluation, run.detections.size());
    run.report = detail::run_stage(stage::kEvaluation, [&] {
      return evaluate(run.detections, gt->annotations, gt->categories.vocabulary(),
                      config.eval->iou_threshold);
    });
    timer.Done(run.detections.size());
  } else {
    run.stages.push_back({stage::kEvaluation, run.detections.size(), 0, 0.0});
  }
  return run;
}

/// Headline F1 under the configured aggregate.
inline double headline_f1(const EvalReport& r, F1Aggregate agg) {
  return agg == F1Aggregate::kMacro ? r.macro_f1 : r.micro.f1;
}

inline json trace_to_json(const PipelineRun& run) {
  json arr = json::array();
  for (const auto& refs : run.trace) {
    json members = json::array();
    for (const auto& r : refs) members.push_back({r.source_id, r.index});
    arr.push_back(std::move(members));
  }
  return arr;
}

inline json manifest_to_json(const PipelineRun& run) {
  json stages = json::array();
  for (const auto& s : run.stages) {
    stages.push_back({{"name", s.name}, {"input", s.input_count},
                      {"output", s.output_count}, {"millis", s.millis}});
  }
  json digests = json::object();
  for (const auto& [path, d] : run.input_digests) digests[path] = d;
  json thr = {{"mode", run.threshold.mode == ThresholdMode::kOtsu    ? "otsu"
                       : run.threshold.mode == ThresholdMode::kFixed ? "fixed"
                                                                     : "none"},
              {"value", run.threshold.value}};
  if (run.threshold.otsu) {
    thr["between_class_variance"] = run.threshold.otsu->between_class_variance;
    thr["tied_range"] = {run.threshold.otsu->tied_low, run.threshold.otsu->tied_high};
  }
  json m;
  m["name"] = run.config.name;
  m["toolkit_version"] = kToolkitVersion;
  m["config"] = run.config.text;
  m["input_digests"] = std::move(digests);
  m["gt_digest"] = run.gt_digest;
  m["stages"] = std::move(stages);
  m["threshold"] = std::move(thr);
  return m;
}

/// Summary of one evaluated run, as needed by compare_runs.
struct RunSummary {
  std::string name;
  std::string gt_digest;
  double f1 = 0.0;
  std::optional<double> map;
  std::map<std::string, double> class_f1;
};

inline RunSummary summarize(const PipelineRun& run) {
  if (!run.report) throw EvaluationError("run '" + run.config.name + "' was not evaluated");
  RunSummary s;
  s.name = run.config.name;
  s.gt_digest = run.gt_digest;
  s.f1 = headline_f1(*run.report, run.config.eval->aggregate);
  s.map = run.report->map;
  for (const auto& [label, c] : run.report->per_class) s.class_f1[label] = c.prf.f1;
  return s;
}

inline json summary_to_json(const RunSummary& s) {
  json cls = json::object();
  for (const auto& [label, f1] : s.class_f1) cls[label] = f1;
  return {{"name", s.name}, {"gt_digest", s.gt_digest}, {"f1", s.f1},
          {"map", s.map ? json(*s.map) : json(nullptr)}, {"class_f1", std::move(cls)}};
}

inline RunSummary parse_summary_json(const json& j, const std::string& origin) {
  RunSummary s;
  s.name = detail::string_field(j, "name", origin);
  s.gt_digest = detail::string_field(j, "gt_digest", origin);
  s.f1 = detail::number_field(j, "f1", origin);
  if (j.contains("map") && j.at("map").is_number()) s.map = j.at("map").get<double>();
  if (j.contains("class_f1")) {
    for (const auto& [label, v] : j.at("class_f1").items()) s.class_f1[label] = v.get<double>();
  }
  return s;
}

/// Writes detections.json, trace.json, manifest.json and, for evaluated runs,
/// report.json and summary.json into `dir`.
inline void write_run(const PipelineRun& run, const fs::path& dir,
                      const CategoryMap& categories) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory '" + dir.string() + "'");
  write_detections(run.detections, dir / "detections.json", run.config.name, categories);
  write_json_file(dir / "trace.json", trace_to_json(run));
  if (run.report) {
    json report = report_to_json(*run.report);
    report["name"] = run.config.name;
    write_json_file(dir / "report.json", report);
    write_json_file(dir / "summary.json", summary_to_json(summarize(run)));
  }
  write_json_file(dir / "manifest.json", manifest_to_json(run));
}

inline RunSummary load_run_summary(const fs::path& dir) {
  const fs::path p = dir / "summary.json";
  if (!fs::exists(p)) {
    throw ValidationError("'" + dir.string() + "' holds no summary.json (was the run evaluated?)");
  }
  return parse_summary_json(read_json_file(p), p.string());
}

struct AblationRow {
  std::string name;
  double f1 = 0.0;
  std::optional<double> map;
  std::map<std::string, double> class_f1;
};

/// Rows sorted by F1 descending, ties by name. All runs must share one
/// ground truth.
inline std::vector<AblationRow> compare_runs(std::span<const RunSummary> runs) {
  if (runs.empty()) throw ConfigError("compare needs at least one run");
  for (const auto& r : runs) {
    if (r.gt_digest != runs.front().gt_digest) {
      throw ValidationError("run '" + r.name + "' was evaluated against different ground truth than '" +
                            runs.front().name + "'");
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& r : runs) rows.push_back({r.name, r.f1, r.map, r.class_f1});
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    if (a.f1 != b.f1) return a.f1 > b.f1;
    return a.name < b.name;
  });
  return rows;
}

inline std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::set<std::string> labels;
  std::size_t name_w = 13;
  for (const auto& r : rows) {
    name_w = std::max(name_w, r.name.size());
    for (const auto& [l, f] : r.class_f1) labels.insert(l);
  }
  std::string out;
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  out += pad("Configuration", name_w) + " | F1     | mAP   ";
  for (const auto& l : labels) out += " | " + pad(l, 6);
  auto end_line = [&out] {
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += "\n";
  };
  end_line();
  for (const auto& r : rows) {
    out += pad(r.name, name_w) + " | " + num(r.f1) + " | " + (r.map ? num(*r.map) : "  n/a ");
    for (const auto& l : labels) {
      auto it = r.class_f1.find(l);
      out += " | " + pad(it == r.class_f1.end() ? "n/a" : num(it->second),
                         std::max<std::size_t>(6, l.size()));
    }
    end_line();
  }
  return out;
}

}  // namespace detfuse
