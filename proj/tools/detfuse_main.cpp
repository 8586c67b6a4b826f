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
// detfuse: command-line front end for the detection post-processing toolkit.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detfuse.hpp"

namespace fs = std::filesystem;
using namespace detfuse;

namespace {

// Exit-code taxonomy.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string out_dir;
  bool quiet = false;
  bool verbose = false;
};

int exit_code_for(ErrorKind kind) {
  return kind == ErrorKind::kIo ? kExitRuntime : kExitValidation;
}

/// Resolves an output file name inside the output directory. Names with
/// directory components are rejected so nothing lands outside it.
fs::path output_path(const Globals& g, const std::string& name) {
  const fs::path p(name);
  if (name.empty() || p.has_parent_path() || p.is_absolute() || name == "." ||
      name == "..") {
    throw UsageError("output name '" + name +
                     "' must be a plain file name; use --out-dir to choose the directory");
  }
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + g.out_dir + "'");
  return fs::path(g.out_dir) / p;
}

std::map<std::string, double> parse_weights(const std::vector<std::string>& specs) {
  std::map<std::string, double> w;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw UsageError("--weight expects source=value, got '" + s + "'");
    }
    const std::string id = s.substr(0, eq);
    try {
      std::size_t used = 0;
      const double v = std::stod(s.substr(eq + 1), &used);
      if (used != s.size() - eq - 1) throw std::invalid_argument(s);
      w[id] = v;
    } catch (const std::logic_error&) {
      throw UsageError("--weight value for '" + id + "' is not a number");
    }
  }
  return w;
}

std::vector<DetectionFile> load_detection_files(const std::vector<std::string>& paths,
                                                const CategoryMap& categories) {
  std::vector<DetectionFile> files;
  for (const auto& p : paths) files.push_back(parse_detections(p, categories));
  return files;
}

std::vector<Detection> concat(const std::vector<DetectionFile>& files) {
  std::vector<Detection> all;
  for (const auto& f : files) all.insert(all.end(), f.detections.begin(), f.detections.end());
  return all;
}

CategoryMap merged_categories(const std::vector<DetectionFile>& files) {
  if (files.empty()) return CategoryMap::Fisheye();
  for (const auto& f : files) {
    if (!(f.categories == files.front().categories)) {
      throw ValidationError("input files declare different category maps");
    }
  }
  return files.front().categories;
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_report(const EvalReport& r, std::ostream& os) {
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %7s %7s %7s %9s %7s %7s %7s\n", "class", "tp", "fp",
                "fn", "precision", "recall", "f1", "ap");
  os << line;
  for (const auto& [label, c] : r.per_class) {
    std::snprintf(line, sizeof line, "%-12s %7zu %7zu %7zu %9.4f %7.4f %7.4f %7s\n",
                  label.c_str(), c.counts.tp, c.counts.fp, c.counts.fn, c.prf.precision,
                  c.prf.recall, c.prf.f1, c.ap ? fmt4(*c.ap).c_str() : "n/a");
    os << line;
  }
  std::snprintf(line, sizeof line, "%-12s %7zu %7zu %7zu %9.4f %7.4f %7.4f\n", "micro",
                r.micro_counts.tp, r.micro_counts.fp, r.micro_counts.fn, r.micro.precision,
                r.micro.recall, r.micro.f1);
  os << line;
  os << "macro_f1 " << fmt4(r.macro_f1) << "\n";
  os << "mAP " << (r.map ? fmt4(*r.map) : std::string("n/a")) << "\n";
  os << "iou_threshold " << r.iou_thresh << "\n";
}

void add_fusion_flags(CLI::App* cmd, std::string& method, double& iou) {
  cmd->add_option("--method", method, "Fusion method: wbf, nms, soft_nms, nmw")
      ->capture_default_str();
  cmd->add_option("--iou", iou, "IoU threshold T for grouping, in (0, 1)")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detfuse: detection fusion, thresholding, slicing and evaluation toolkit"};
  app.require_subcommand(1);
  Globals g;
  if (const char* env = std::getenv("DETFUSE_OUT_DIR"); env && *env) {
    g.out_dir = env;
  } else {
    g.out_dir = ".";
  }
  app.add_option("--out-dir", g.out_dir,
                 "Directory for all outputs (default: $DETFUSE_OUT_DIR or .)");
  app.add_flag("-q,--quiet", g.quiet, "Suppress informational output");
  app.add_flag("-v,--verbose", g.verbose, "Print warnings such as clipped ground truth");

  // fuse ---------------------------------------------------------------
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse detections from one or more sources");
  std::vector<std::string> fuse_dets, fuse_weights;
  std::string fuse_method = "wbf", fuse_out = "fused.json", fuse_source = "fused";
  double fuse_iou = kDefaultFusionIou;
  fuse_cmd->add_option("--dets", fuse_dets, "Detection files")->required();
  add_fusion_flags(fuse_cmd, fuse_method, fuse_iou);
  fuse_cmd->add_option("--weight", fuse_weights, "Per-source weight, source=value (repeatable)");
  fuse_cmd->add_option("--out", fuse_out, "Output file name")->capture_default_str();
  fuse_cmd->add_option("--source-id", fuse_source, "source_id for the output file")
      ->capture_default_str();

  // slice --------------------------------------------------------------
  auto* slice_cmd = app.add_subcommand("slice", "Print the slice plan for an image size");
  int image_w = 0, image_h = 0;
  std::optional<int> slice_w, slice_h;
  double overlap = 0.25;
  std::string slice_out;
  slice_cmd->add_option("--image-w", image_w, "Image width in pixels")->required();
  slice_cmd->add_option("--image-h", image_h, "Image height in pixels")->required();
  slice_cmd->add_option("--slice-w", slice_w, "Slice width (default: half the image)");
  slice_cmd->add_option("--slice-h", slice_h, "Slice height (default: half the image)");
  slice_cmd->add_option("--overlap", overlap, "Overlap ratio in [0, 1)")->capture_default_str();
  slice_cmd->add_option("--out", slice_out, "Also write the plan as JSON to this file name");

  // aggregate ----------------------------------------------------------
  auto* agg_cmd = app.add_subcommand("aggregate",
                                     "Merge per-slice detections into image coordinates");
  std::vector<std::string> agg_dets;
  std::string agg_method = "wbf", agg_out = "aggregated.json";
  double agg_iou = kDefaultFusionIou;
  agg_cmd->add_option("--dets", agg_dets, "Per-slice detection files (records carry 'slice')")
      ->required();
  add_fusion_flags(agg_cmd, agg_method, agg_iou);
  agg_cmd->add_option("--out", agg_out, "Output file name")->capture_default_str();

  // threshold ----------------------------------------------------------
  auto* thr_cmd = app.add_subcommand("threshold", "Otsu or fixed confidence thresholding");
  std::vector<std::string> thr_dets;
  std::size_t bins = kDefaultHistogramBins;
  bool use_otsu = false;
  std::optional<double> fixed;
  std::string hist_out, apply_out;
  thr_cmd->add_option("--dets", thr_dets, "Detection files")->required();
  thr_cmd->add_option("--bins", bins, "Histogram bins")->capture_default_str();
  auto* otsu_flag = thr_cmd->add_flag("--otsu", use_otsu, "Select the cutoff by Otsu (default)");
  auto* fixed_opt = thr_cmd->add_option("--fixed", fixed, "Use a fixed cutoff instead of Otsu");
  otsu_flag->excludes(fixed_opt);
  thr_cmd->add_option("--hist", hist_out, "Write the score histogram (columns) to this file");
  thr_cmd->add_option("--apply", apply_out, "Write the filtered detections to this file");

  // eval ---------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate detections against ground truth");
  std::string gt_path, eval_summary = "report.json";
  std::vector<std::string> eval_dets;
  double match_iou = kDefaultMatchIou;
  bool pr_curves = false;
  eval_cmd->add_option("--gt", gt_path, "Ground-truth file")->required();
  eval_cmd->add_option("--dets", eval_dets, "Detection files")->required();
  eval_cmd->add_option("--iou", match_iou, "Matching IoU threshold")->capture_default_str();
  eval_cmd->add_option("--summary", eval_summary, "Machine-readable report file name")
      ->capture_default_str();
  eval_cmd->add_flag("--pr-curves", pr_curves, "Dump per-class PR curves as pr_<class>.txt");

  // simulate -----------------------------------------------------------
  auto* sim_cmd = app.add_subcommand("simulate", "Generate synthetic ground truth and detections");
  std::size_t sim_images = 20, sim_objects = 60;
  int sim_w = 1280, sim_h = 1280;
  double sim_bias = 0.5, shared_miss = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> profile_files, builtin, sliced_profiles;
  std::string sim_gt = "gt.json";
  bool list_builtin = false;
  sim_cmd->add_option("--images", sim_images, "Number of scenes")->capture_default_str();
  sim_cmd->add_option("--objects", sim_objects, "Objects per scene")->capture_default_str();
  sim_cmd->add_option("--width", sim_w, "Scene width")->capture_default_str();
  sim_cmd->add_option("--height", sim_h, "Scene height")->capture_default_str();
  sim_cmd->add_option("--bias", sim_bias, "Periphery bias (0 = uniform)")->capture_default_str();
  sim_cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
  sim_cmd->add_option("--shared-miss", shared_miss,
                      "Probability that all detectors miss the same object")
      ->capture_default_str();
  sim_cmd->add_option("--profile", profile_files, "Detector profile JSON files");
  sim_cmd->add_option("--builtin", builtin, "Built-in reference profile names");
  sim_cmd->add_option("--sliced", sliced_profiles,
                      "Profiles whose output is written per slice (half-size slices, 25% overlap)");
  sim_cmd->add_option("--gt-out", sim_gt, "Ground-truth file name")->capture_default_str();
  sim_cmd->add_flag("--list-builtin", list_builtin, "List built-in profiles and exit");

  // pipeline -----------------------------------------------------------
  auto* pipe_cmd = app.add_subcommand("pipeline", "Config-driven runs and ablation tables");
  pipe_cmd->require_subcommand(1);
  auto* run_cmd = pipe_cmd->add_subcommand("run", "Execute a pipeline config");
  std::string config_path;
  run_cmd->add_option("config", config_path, "Pipeline config file")->required();
  auto* cmp_cmd = pipe_cmd->add_subcommand("compare", "Tabulate evaluated runs by F1");
  std::vector<std::string> run_dirs;
  std::string cmp_out;
  cmp_cmd->add_option("runs", run_dirs, "Run directories")->required();
  cmp_cmd->add_option("--out", cmp_out, "Also write the table to this file name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  auto info = [&](const std::string& s) {
    if (!g.quiet) std::cout << s << "\n";
  };

  try {
    if (*fuse_cmd) {
      FusionParams params;
      params.method = parse_fusion_method(fuse_method);
      params.iou_threshold = fuse_iou;
      if (!fuse_weights.empty()) params.source_weights = parse_weights(fuse_weights);
      params.Validate();
      const auto files = load_detection_files(fuse_dets, CategoryMap::Fisheye());
      const auto fused = fuse_per_image(concat(files), params);
      write_detections(fused.detections, output_path(g, fuse_out), fuse_source,
                       merged_categories(files));
      info("fused " + std::to_string(concat(files).size()) + " detections into " +
           std::to_string(fused.detections.size()) + " (" + std::string(to_string(params.method)) +
           ", T=" + std::to_string(params.iou_threshold) + ")");
    } else if (*slice_cmd) {
      const int sw = slice_w.value_or(half_slice_extent(image_w));
      const int sh = slice_h.value_or(half_slice_extent(image_h));
      const auto plan = plan_slices(image_w, image_h, sw, sh, overlap);
      std::cout << "# image " << image_w << "x" << image_h << " slice " << sw << "x" << sh
                << " overlap " << overlap << " count " << plan.slices.size() << "\n";
      json windows = json::array();
      for (const auto& s : plan.slices) {
        std::cout << s.x0 << " " << s.y0 << " " << s.x1 << " " << s.y1 << "\n";
        windows.push_back({s.x0, s.y0, s.x1, s.y1});
      }
      if (!slice_out.empty()) {
        write_json_file(output_path(g, slice_out),
                        {{"image_width", image_w}, {"image_height", image_h},
                         {"slice_width", sw}, {"slice_height", sh}, {"overlap", overlap},
                         {"slices", std::move(windows)}});
      }
    } else if (*agg_cmd) {
      FusionParams params;
      params.method = parse_fusion_method(agg_method);
      params.iou_threshold = agg_iou;
      params.Validate();
      const auto files = load_detection_files(agg_dets, CategoryMap::Fisheye());
      std::map<std::string, std::map<SliceWindow, std::vector<Detection>>> by_image;
      for (const auto& f : files) {
        if (!f.sliced()) {
          throw ValidationError("file for source '" + f.source_id +
                                "' carries no slice windows");
        }
        for (std::size_t i = 0; i < f.detections.size(); ++i) {
          by_image[f.detections[i].image_id][f.windows[i]].push_back(f.detections[i]);
        }
      }
      std::vector<Detection> out;
      for (const auto& [image, windows] : by_image) {
        std::vector<SliceDetections> per_slice;
        for (const auto& [w, d] : windows) per_slice.push_back({w, d});
        auto merged = aggregate_slices(per_slice, params);
        out.insert(out.end(), merged.begin(), merged.end());
      }
      write_detections(out, output_path(g, agg_out),
                       files.empty() ? "aggregated" : files.front().source_id,
                       merged_categories(files));
      info("aggregated " + std::to_string(concat(files).size()) + " slice detections into " +
           std::to_string(out.size()));
    } else if (*thr_cmd) {
      const auto files = load_detection_files(thr_dets, CategoryMap::Fisheye());
      const auto dets = concat(files);
      const auto hist = build_histogram(dets, bins);
      double t = 0;
      if (fixed) {
        t = *fixed;
        if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("--fixed must lie in [0, 1]");
        std::cout << "mode fixed\nthreshold " << t << "\n";
      } else {
        const auto r = otsu_threshold(hist);
        t = r.threshold;
        std::cout << "mode otsu\nthreshold " << r.threshold << "\nvariance "
                  << r.between_class_variance << "\ntied_range " << r.tied_low << " "
                  << r.tied_high << "\n";
      }
      std::cout << "bins " << bins << "\ntotal " << hist.total << "\n";
      if (!hist_out.empty()) {
        std::string text = "# bin lower upper count\n";
        for (std::size_t b = 0; b < hist.bin_count(); ++b) {
          char row[96];
          std::snprintf(row, sizeof row, "%zu %.6f %.6f %llu\n", b, b * hist.bin_width(),
                        (b + 1) * hist.bin_width(),
                        static_cast<unsigned long long>(hist.counts[b]));
          text += row;
        }
        write_text_file(output_path(g, hist_out), text);
      }
      if (!apply_out.empty()) {
        const auto kept = filter_by_threshold(dets, t);
        write_detections(kept, output_path(g, apply_out),
                         files.size() == 1 ? files.front().source_id : "thresholded",
                         merged_categories(files));
        info("kept " + std::to_string(kept.size()) + " of " + std::to_string(dets.size()));
      }
    } else if (*eval_cmd) {
      const auto gt = parse_ground_truth(gt_path);
      if (g.verbose) {
        for (const auto& w : gt.warnings) std::cerr << "warning: " << w << "\n";
      }
      const auto files = load_detection_files(eval_dets, gt.categories);
      const auto dets = concat(files);
      std::map<std::string, std::vector<PrPoint>> curves;
      const auto report = evaluate(dets, gt.annotations, gt.categories.vocabulary(), match_iou,
                                   pr_curves ? &curves : nullptr);
      print_report(report, std::cout);
      write_json_file(output_path(g, eval_summary), report_to_json(report));
      for (const auto& [label, curve] : curves) {
        std::string text = "# score precision recall interpolated_precision\n";
        for (const auto& p : curve) {
          char row[128];
          std::snprintf(row, sizeof row, "%.6f %.6f %.6f %.6f\n", p.score, p.precision,
                        p.recall, p.interpolated_precision);
          text += row;
        }
        write_text_file(output_path(g, "pr_" + label + ".txt"), text);
      }
    } else if (*sim_cmd) {
      if (list_builtin) {
        for (const auto& p : reference_profiles()) std::cout << p.name << "\n";
        return kExitOk;
      }
      std::vector<DetectorProfile> profiles;
      for (const auto& f : profile_files) profiles.push_back(parse_profile(f));
      for (const auto& b : builtin) profiles.push_back(reference_profile(b));
      if (profiles.empty()) throw UsageError("simulate needs --profile or --builtin");
      SceneParams sp = SceneParams::Fisheye();
      sp.image_w = sim_w;
      sp.image_h = sim_h;
      sp.object_count = sim_objects;
      sp.periphery_bias = sim_bias;
      const auto scenes = generate_scenes(sp, sim_images, seed);
      for (const auto& name : sliced_profiles) {
        if (std::none_of(profiles.begin(), profiles.end(),
                         [&](const auto& p) { return p.name == name; })) {
          throw UsageError("--sliced " + name + " names no simulated profile");
        }
      }
      const auto gt = ground_truth_from_scenes(scenes);
      write_ground_truth(gt, output_path(g, sim_gt));
      SimulationOptions opts;
      opts.shared_miss_probability = shared_miss;
      for (const auto& p : profiles) {
        const auto dets = simulate_detector(scenes, p, seed, opts);
        const bool sliced = std::find(sliced_profiles.begin(), sliced_profiles.end(),
                                      p.name) != sliced_profiles.end();
        if (sliced) {
          const auto plan = plan_slices(sim_w, sim_h, half_slice_extent(sim_w),
                                        half_slice_extent(sim_h), 0.25);
          write_detections(sliced_detection_file(dets, plan, p.name),
                           output_path(g, p.name + ".json"));
        } else {
          write_detections(dets, output_path(g, p.name + ".json"), p.name);
        }
        info(p.name + ": " + std::to_string(dets.size()) + " detections");
      }
      info("ground truth: " + std::to_string(gt.annotations.size()) + " boxes in " +
           std::to_string(scenes.size()) + " images");
    } else if (*run_cmd) {
      const auto cfg = parse_config(config_path);
      const auto run = run_pipeline(cfg);
      const CategoryMap cats =
          cfg.eval ? parse_ground_truth(cfg.eval->gt).categories : CategoryMap::Fisheye();
      std::error_code ec;
      fs::create_directories(g.out_dir, ec);
      write_run(run, g.out_dir, cats);
      for (const auto& s : run.stages) {
        info(s.name + ": " + std::to_string(s.input_count) + " -> " +
             std::to_string(s.output_count));
      }
      if (run.threshold.mode != ThresholdMode::kNone) {
        info("threshold " + std::to_string(run.threshold.value));
      }
      if (run.report && !g.quiet) print_report(*run.report, std::cout);
    } else if (*cmp_cmd) {
      std::vector<RunSummary> runs;
      for (const auto& d : run_dirs) runs.push_back(load_run_summary(d));
      const auto table = format_ablation_table(compare_runs(runs));
      std::cout << table;
      if (!cmp_out.empty()) write_text_file(output_path(g, cmp_out), table);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
