#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vox2bev/config.hpp"
#include "vox2bev/dataset.hpp"
#include "vox2bev/errors.hpp"
#include "vox2bev/evalkit.hpp"
#include "vox2bev/harness.hpp"

namespace vox2bev {

namespace cli_detail {

inline std::string fmt_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Row-major CSV of a [H,W] (or [H,W,1]) map, 6 significant digits.
inline void write_map_csv(const Tensor& map, int64_t h, int64_t w, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      if (j) f << ",";
      f << fmt_g6(map.data[static_cast<size_t>(i * w + j)]);
    }
    f << "\n";
  }
}

// 8-bit ASCII PGM, linearly scaled so hi maps to 255.
inline void write_map_pgm(const Tensor& map, int64_t h, int64_t w, double lo, double hi, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "P2\n" << w << " " << h << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      const double v = (map.data[static_cast<size_t>(i * w + j)] - lo) / span;
      const int g = std::min(255, std::max(0, static_cast<int>(std::lround(v * 255.0))));
      if (j) f << " ";
      f << g;
    }
    f << "\n";
  }
}

inline std::string sequence_id_for(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq%03" PRId64, index);
  return buf;
}

inline std::map<std::string, int64_t> load_bucket_thresholds(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open bucket thresholds: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("malformed bucket thresholds " + path + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("bucket thresholds " + path + ": expected an object of category -> count");
  std::map<std::string, int64_t> out;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<int64_t>();
  return out;
}

inline const Sequence& find_sequence(const std::vector<Sequence>& dataset, const std::string& id) {
  for (const auto& s : dataset)
    if (s.id == id) return s;
  throw std::runtime_error("sequence '" + id + "' not found in dataset");
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

inline void cmd_gen(const std::string& spec_path, const std::string& out_path, uint64_t seed, int64_t count) {
  if (count < 1) throw UsageError("gen: --count must be >= 1");
  const SceneSpec base = load_scene_spec(spec_path);
  std::vector<Sequence> seqs;
  for (int64_t i = 0; i < count; ++i) {
    SceneSpec s = base;
    s.seed = seed + static_cast<uint64_t>(i);
    seqs.push_back(generate_sequence(s, cli_detail::sequence_id_for(i), s.category));
  }
  save_dataset(seqs, out_path);
}

inline void cmd_train(const std::string& data_path, const std::string& config_path, const std::string& out_path,
                      uint64_t seed) {
  const PipelineConfig cfg = load_config(config_path);
  const std::vector<Sequence> dataset = load_dataset(data_path);
  TrainResult result = train(dataset, cfg, seed);
  result.params.save(out_path);
  {
    std::ofstream f(out_path + ".ini");
    if (!f) throw std::runtime_error("cannot write config echo: " + out_path + ".ini");
    f << config_to_string(cfg);
  }
  {
    std::ofstream f(out_path + ".loss.csv");
    if (!f) throw std::runtime_error("cannot write loss curve: " + out_path + ".loss.csv");
    f << "iteration,total,shape,center,offset,z\n";
    for (size_t i = 0; i < result.parts_curve.size(); ++i) {
      const LossParts& p = result.parts_curve[i];
      f << i << "," << fmt_g9(p.total) << "," << fmt_g9(p.shape) << "," << fmt_g9(p.center) << "," << fmt_g9(p.offset)
        << "," << fmt_g9(p.z) << "\n";
    }
  }
  std::cerr << "trained " << result.loss_curve.size() << " iterations (" << result.skipped << " samples skipped), first loss "
            << (result.loss_curve.empty() ? 0.0 : result.loss_curve.front()) << ", last loss "
            << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << "\n";
}

inline PipelineConfig load_checkpoint_config(const std::string& ckpt_path) {
  const std::string sidecar = ckpt_path + ".ini";
  std::ifstream probe(sidecar);
  if (!probe) throw std::runtime_error("missing config echo " + sidecar + " (written alongside the checkpoint by train)");
  return load_config(sidecar);
}

inline void cmd_track(const std::string& data_path, const std::string& ckpt_path, const std::string& scheme,
                      const std::string& out_path, uint64_t seed) {
  try {
    parse_scheme(scheme);  // validate before any heavy work
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  PipelineConfig cfg = load_checkpoint_config(ckpt_path);
  cfg.track.scheme = scheme;
  cfg.validate();
  ParamStore ps = ParamStore::load(ckpt_path);
  for (const auto& name : ps.names())
    if (!ps.at(name).all_finite())
      throw NumericError("non-finite parameter '" + name + "' in checkpoint " + ckpt_path);
  const std::vector<Sequence> dataset = load_dataset(data_path);
  if (dataset.empty()) throw std::runtime_error("track: dataset is empty");

  std::map<std::string, std::vector<Box3D>> results;
  std::ostringstream report;
  report << "{\"sequences\":[";
  double total_seconds = 0;
  bool first = true;
  for (const auto& seq : dataset) {
    TrackResult r = track_sequence(ps, seq, cfg, seed);
    total_seconds += r.seconds;
    if (!first) report << ",";
    first = false;
    report << "{\"id\":\"" << detail::json_escape(seq.id) << "\",\"frames\":" << r.boxes.size() << ",\"fallbacks\":[";
    for (size_t t = 0; t < r.fallback.size(); ++t) report << (t ? "," : "") << static_cast<int>(r.fallback[t]);
    report << "],\"boxes\":[";
    for (size_t t = 0; t < r.boxes.size(); ++t) {
      const Box3D& b = r.boxes[t];
      report << (t ? "," : "") << "[" << fmt_g9(b.cx) << "," << fmt_g9(b.cy) << "," << fmt_g9(b.cz) << "," << fmt_g9(b.l)
             << "," << fmt_g9(b.w) << "," << fmt_g9(b.h) << "," << fmt_g9(b.yaw) << "]";
    }
    report << "],\"seconds\":" << fmt_g9(r.seconds) << "}";
    results.emplace(seq.id, std::move(r.boxes));
  }
  report << "],\"total_seconds\":" << fmt_g9(total_seconds) << "}\n";

  save_results(results, out_path);
  std::ofstream f(out_path + ".report.json");
  if (!f) throw std::runtime_error("cannot write run report: " + out_path + ".report.json");
  f << report.str();
}

inline void cmd_eval(const std::string& data_path, const std::string& results_path, const std::string& buckets_path,
                     const std::string& out_path) {
  const std::vector<Sequence> dataset = load_dataset(data_path);
  const auto results = import_results(results_path);
  const std::vector<FrameScore> scores = score_frames(dataset, results);
  MetricsReport rep;
  if (!buckets_path.empty())
    rep = compute_metrics_bucketed(scores, cli_detail::load_bucket_thresholds(buckets_path));
  else
    rep = compute_metrics(scores);

  std::ofstream f(out_path);
  if (!f) throw std::runtime_error("cannot write metrics report: " + out_path);
  f << "{\"overall\":{\"success\":" << fmt_g9(rep.success) << ",\"precision\":" << fmt_g9(rep.precision) << "},\"buckets\":[";
  for (size_t i = 0; i < rep.buckets.size(); ++i) {
    const BucketMetrics& b = rep.buckets[i];
    f << (i ? "," : "") << "{\"name\":\"" << detail::json_escape(b.name) << "\",\"frames\":" << b.frames
      << ",\"success\":" << fmt_g9(b.success) << ",\"precision\":" << fmt_g9(b.precision) << "}";
  }
  f << "],\"frames\":" << rep.frames << "}\n";

  std::ofstream fc(out_path + ".frames.csv");
  if (!fc) throw std::runtime_error("cannot write per-frame scores: " + out_path + ".frames.csv");
  fc << "sequence_id,frame,points_in_gt,iou,distance\n";
  for (const auto& s : scores)
    fc << s.sequence_id << "," << s.frame << "," << s.points_in_gt << "," << fmt_g9(s.iou) << "," << fmt_g9(s.distance)
       << "\n";
}

inline void cmd_inspect(const std::string& ckpt_path, const std::string& data_path, const std::string& seq_id,
                        int64_t frame, const std::string& out_dir, bool with_shape) {
  const PipelineConfig cfg = load_checkpoint_config(ckpt_path);
  ParamStore ps = ParamStore::load(ckpt_path);
  const std::vector<Sequence> dataset = load_dataset(data_path);
  const Sequence& seq = cli_detail::find_sequence(dataset, seq_id);
  if (frame < 0 || frame >= static_cast<int64_t>(seq.frames.size()))
    throw std::runtime_error("frame " + std::to_string(frame) + " out of range for sequence " + seq_id + " (" +
                             std::to_string(seq.frames.size()) + " frames)");
  std::filesystem::create_directories(out_dir);

  // Reference = previous frame's GT (the tracking-time stand-in); template
  // mirrors the training construction without augmentation.
  const Box3D ref = seq.frames[static_cast<size_t>(std::max<int64_t>(frame - 1, 0))].box;
  const Frame& fr = seq.frames[static_cast<size_t>(frame)];
  const Region region = make_region(ref, cfg.track.margin, cfg.voxel.z_half, cfg.voxel.size);

  PointCloud first_crop = crop_and_center(seq.frames[0].cloud, seq.frames[0].box).first;
  PointCloud tmpl_union = first_crop;
  PointCloud prev_crop;
  if (frame >= 2) {
    prev_crop = crop_and_center(seq.frames[static_cast<size_t>(frame - 1)].cloud, ref).first;
    if (prev_crop.size() > 0) tmpl_union = merge_clouds({&first_crop, &prev_crop});
  }
  if (tmpl_union.size() == 0) throw std::runtime_error("inspect: no template points for sequence " + seq_id);
  PointCloud search_raw = crop_to_region(fr.cloud, ref, region);
  if (search_raw.size() == 0) throw std::runtime_error("inspect: empty search area at frame " + std::to_string(frame));

  Rng rng(0);
  PointCloud tmpl = resample(tmpl_union, cfg.track.template_budget, rng);
  PointCloud search = resample(search_raw, cfg.track.search_budget, rng);

  Tape tape;
  ForwardOut fwd = model_forward(tape, ps, tmpl, search, region, cfg);

  const int64_t H = region.h(), W = region.w(), Z = region.z();
  const std::string dir = out_dir + "/";
  cli_detail::write_map_csv(fwd.maps.heatmap, H, W, dir + "pred_heatmap.csv");
  cli_detail::write_map_pgm(fwd.maps.heatmap, H, W, 0.0, 1.0, dir + "pred_heatmap.pgm");

  const LocalizationTargets targets = make_targets(box_in_frame(fr.box, ref), region, cfg.loss.offset_radius);
  cli_detail::write_map_csv(targets.heatmap, H, W, dir + "gt_heatmap.csv");
  cli_detail::write_map_pgm(targets.heatmap, H, W, 0.0, 1.0, dir + "gt_heatmap.pgm");

  Tensor occupancy(Shape{H, W});
  double occ_max = 0;
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double s = 0;
      for (int64_t k = 0; k < Z; ++k) s += fwd.grid.counts.data[static_cast<size_t>((i * W + j) * Z + k)];
      occupancy.data[static_cast<size_t>(i * W + j)] = s;
      occ_max = std::max(occ_max, s);
    }
  cli_detail::write_map_csv(occupancy, H, W, dir + "occupancy.csv");
  cli_detail::write_map_pgm(occupancy, H, W, 0.0, occ_max, dir + "occupancy.pgm");

  if (with_shape) {
    Tensor gated = gate(tape, ps, fwd.search.F);
    Tensor coords = generate_shape(tape, ps, gated, shape_config(cfg));
    std::ofstream f(dir + "shape_points.csv");
    if (!f) throw std::runtime_error("cannot write " + dir + "shape_points.csv");
    f << "x,y,z\n";
    for (int64_t i = 0; i < coords.dim(0); ++i)
      f << cli_detail::fmt_g6(coords.data[static_cast<size_t>(3 * i)]) << ","
        << cli_detail::fmt_g6(coords.data[static_cast<size_t>(3 * i + 1)]) << ","
        << cli_detail::fmt_g6(coords.data[static_cast<size_t>(3 * i + 2)]) << "\n";
  }
}

inline void cmd_stats(const std::string& data_path, const std::string& bins_arg, std::ostream& os) {
  const std::vector<Sequence> dataset = load_dataset(data_path);
  std::vector<int64_t> edges;
  std::stringstream ss(bins_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      edges.push_back(std::stoll(tok));
    } catch (const std::exception&) {
      throw UsageError("stats: cannot parse bin edge '" + tok + "'");
    }
  }
  const auto bins = point_stats(dataset, edges);
  os << "bin_lo,bin_hi,count\n";
  for (const auto& b : bins) {
    os << b.lo << ",";
    if (b.hi < 0)
      os << "inf";
    else
      os << b.hi;
    os << "," << b.count << "\n";
  }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"voxel-to-BEV 3D single-object tracker"};
  app.require_subcommand(1);

  std::string spec, data, config, ckpt, out, scheme, buckets, seq_id, out_dir, bins;
  uint64_t seed = 0;
  int64_t count = 1, frame = 0;
  bool with_shape = false;

  auto* gen = app.add_subcommand("gen", "generate synthetic tracking sequences");
  gen->add_option("--spec", spec, "scene spec JSON")->required();
  gen->add_option("--out", out, "output dataset JSONL")->required();
  gen->add_option("--seed", seed, "base seed (sequence i uses seed+i)")->required();
  gen->add_option("--count", count, "number of sequences")->required();
  gen->callback([&] { cmd_gen(spec, out, seed, count); });

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", data, "dataset JSONL")->required();
  train_cmd->add_option("--config", config, "pipeline config file")->required();
  train_cmd->add_option("--out", out, "output checkpoint path")->required();
  train_cmd->add_option("--seed", seed, "training seed");
  train_cmd->callback([&] { cmd_train(data, config, out, seed); });

  auto* track = app.add_subcommand("track", "track every sequence in a dataset");
  track->add_option("--data", data, "dataset JSONL")->required();
  track->add_option("--ckpt", ckpt, "checkpoint from train")->required();
  track->add_option("--scheme", scheme, "template scheme: first_gt | previous_result | first_and_previous | all_previous")
      ->required();
  track->add_option("--out", out, "output results CSV")->required();
  track->add_option("--seed", seed, "resampling seed");
  track->callback([&] { cmd_track(data, ckpt, scheme, out, seed); });

  auto* eval = app.add_subcommand("eval", "score tracking results against a dataset");
  eval->add_option("--data", data, "dataset JSONL")->required();
  eval->add_option("--results", out, "results CSV from track")->required();
  eval->add_option("--buckets", buckets, "JSON of per-category sparsity thresholds");
  std::string eval_out;
  eval->add_option("--out", eval_out, "metrics report JSON")->required();
  eval->callback([&] { cmd_eval(data, out, buckets, eval_out); });

  auto* inspect = app.add_subcommand("inspect", "dump heatmaps and grids for one frame");
  inspect->add_option("--ckpt", ckpt, "checkpoint from train")->required();
  inspect->add_option("--data", data, "dataset JSONL")->required();
  inspect->add_option("--seq", seq_id, "sequence id")->required();
  inspect->add_option("--frame", frame, "frame index")->required();
  inspect->add_option("--out-dir", out_dir, "output directory")->required();
  inspect->add_flag("--shape", with_shape, "also dump generated shape coordinates (training-mode path)");
  inspect->callback([&] { cmd_inspect(ckpt, data, seq_id, frame, out_dir, with_shape); });

  auto* stats = app.add_subcommand("stats", "histogram of in-GT-box point counts");
  stats->add_option("--data", data, "dataset JSONL")->required();
  stats->add_option("--bins", bins, "comma-separated bin edges, e.g. 0,50,150")->required();
  stats->callback([&] { cmd_stats(data, bins, std::cout); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace vox2bev
