#pragma once

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vox2bev/geom.hpp"
#include "vox2bev/rng.hpp"

namespace vox2bev {

// 9 significant digits round-trips a double through decimal text
// idempotently (re-parsing and re-printing reproduces the same bytes).
inline std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct Frame {
  PointCloud cloud;
  Box3D box;
};

struct SceneSpec {
  std::string archetype = "cuboid-shell";  // or "ellipsoid-shell"
  std::string category = "object";
  double size[3] = {2.0, 1.2, 1.0};        // l, w, h
  double pose[4] = {0.0, 0.0, 0.0, 0.0};   // x, y, z, yaw
  double velocity[3] = {0.2, 0.1, 0.0};    // m/frame
  double yaw_rate = 0.02;                  // rad/frame
  int64_t points_band[2] = {60, 120};      // object points per frame
  int64_t clutter = 30;                    // background points per frame
  double occlusion_prob = 0.0;             // chance of an angular-sector dropout per frame
  double surface_jitter = 0.01;            // Gaussian sigma off the shell surface (m)
  double motion_jitter = 0.005;            // Gaussian sigma on the per-frame pose step (m / rad)
  int64_t frames = 20;
  uint64_t seed = 0;
};

struct Sequence {
  std::string id;
  std::string category;
  std::vector<Frame> frames;
  SceneSpec spec;
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace detail {

// Uniform point on the surface of the canonical (axis-aligned, centered)
// cuboid shell, faces weighted by area.
inline std::array<double, 3> sample_cuboid_shell(double l, double w, double h, Rng& rng) {
  const double a_xy = l * w, a_xz = l * h, a_yz = w * h;
  const double total = 2.0 * (a_xy + a_xz + a_yz);
  double u = rng.uniform() * total;
  const double x = rng.uniform(-l / 2, l / 2);
  const double y = rng.uniform(-w / 2, w / 2);
  const double z = rng.uniform(-h / 2, h / 2);
  if (u < a_xy) return {x, y, -h / 2};
  u -= a_xy;
  if (u < a_xy) return {x, y, h / 2};
  u -= a_xy;
  if (u < a_xz) return {x, -w / 2, z};
  u -= a_xz;
  if (u < a_xz) return {x, w / 2, z};
  u -= a_xz;
  if (u < a_yz) return {-l / 2, y, z};
  return {l / 2, y, z};
}

inline std::array<double, 3> sample_ellipsoid_shell(double l, double w, double h, Rng& rng) {
  double dx, dy, dz, n;
  do {
    dx = rng.gaussian();
    dy = rng.gaussian();
    dz = rng.gaussian();
    n = std::sqrt(dx * dx + dy * dy + dz * dz);
  } while (n < 1e-12);
  return {dx / n * l / 2, dy / n * w / 2, dz / n * h / 2};
}

}  // namespace detail

inline Sequence generate_sequence(const SceneSpec& spec, const std::string& id, const std::string& category) {
  if (spec.frames < 1) throw std::invalid_argument("generate_sequence: frame count must be >= 1");
  if (spec.points_band[0] < 1 || spec.points_band[1] < spec.points_band[0])
    throw std::invalid_argument("generate_sequence: invalid points band");
  if (spec.occlusion_prob < 0 || spec.occlusion_prob > 1) throw std::invalid_argument("generate_sequence: invalid occlusion probability");
  if (spec.archetype != "cuboid-shell" && spec.archetype != "ellipsoid-shell")
    throw std::invalid_argument("generate_sequence: unknown archetype " + spec.archetype);

  Rng rng(spec.seed);
  Sequence seq;
  seq.id = id;
  seq.category = category;
  seq.spec = spec;

  double px = spec.pose[0], py = spec.pose[1], pz = spec.pose[2], yaw = normalize_yaw(spec.pose[3]);
  const double l = spec.size[0], w = spec.size[1], h = spec.size[2];

  for (int64_t t = 0; t < spec.frames; ++t) {
    if (t > 0) {
      px += spec.velocity[0] + rng.gaussian(0.0, spec.motion_jitter);
      py += spec.velocity[1] + rng.gaussian(0.0, spec.motion_jitter);
      pz += spec.velocity[2] + rng.gaussian(0.0, spec.motion_jitter);
      yaw = normalize_yaw(yaw + spec.yaw_rate + rng.gaussian(0.0, spec.motion_jitter));
    }
    Box3D box(px, py, pz, l, w, h, yaw);

    const int64_t band = spec.points_band[1] - spec.points_band[0] + 1;
    const int64_t count = spec.points_band[0] + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(band)));
    std::vector<std::array<double, 3>> canon;
    canon.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      auto s = spec.archetype == "cuboid-shell" ? detail::sample_cuboid_shell(l, w, h, rng)
                                                : detail::sample_ellipsoid_shell(l, w, h, rng);
      for (int d = 0; d < 3; ++d) s[static_cast<size_t>(d)] += rng.gaussian(0.0, spec.surface_jitter);
      canon.push_back(s);
    }

    // Angular-sector dropout (quarter circle in the object's ground plane);
    // skipped if it would leave the frame with no object points.
    if (rng.uniform() < spec.occlusion_prob) {
      const double sector_lo = rng.uniform(0.0, 2.0 * M_PI);
      std::vector<std::array<double, 3>> kept;
      for (const auto& p : canon) {
        double a = std::atan2(p[1], p[0]);
        if (a < 0) a += 2.0 * M_PI;
        double rel = a - sector_lo;
        if (rel < 0) rel += 2.0 * M_PI;
        if (rel > M_PI / 2) kept.push_back(p);
      }
      if (!kept.empty()) canon = std::move(kept);
    }

    std::vector<std::array<double, 3>> world;
    world.reserve(canon.size() + static_cast<size_t>(spec.clutter));
    for (const auto& p : canon) world.push_back(box.from_canonical(p));

    // Background clutter near the target, never inside the GT box.
    const double margin = 4.0;
    for (int64_t i = 0; i < spec.clutter; ++i) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const std::array<double, 3> q = {rng.uniform(px - l / 2 - margin, px + l / 2 + margin),
                                         rng.uniform(py - w / 2 - margin, py + w / 2 + margin),
                                         rng.uniform(pz - 2.0, pz + 2.0)};
        if (!box.contains(q)) {
          world.push_back(q);
          break;
        }
      }
    }

    Tensor coords(Shape{static_cast<int64_t>(world.size()), 3});
    for (size_t i = 0; i < world.size(); ++i)
      for (int d = 0; d < 3; ++d) coords.data[i * 3 + static_cast<size_t>(d)] = world[i][static_cast<size_t>(d)];
    seq.frames.push_back(Frame{PointCloud(std::move(coords)), box});
  }
  return seq;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

namespace detail {

inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

inline void write_spec_json(std::ostream& os, const SceneSpec& s) {
  os << "{\"archetype\":\"" << json_escape(s.archetype) << "\""
     << ",\"category\":\"" << json_escape(s.category) << "\""
     << ",\"size\":[" << fmt_g9(s.size[0]) << "," << fmt_g9(s.size[1]) << "," << fmt_g9(s.size[2]) << "]"
     << ",\"pose\":[" << fmt_g9(s.pose[0]) << "," << fmt_g9(s.pose[1]) << "," << fmt_g9(s.pose[2]) << ","
     << fmt_g9(s.pose[3]) << "]"
     << ",\"velocity\":[" << fmt_g9(s.velocity[0]) << "," << fmt_g9(s.velocity[1]) << "," << fmt_g9(s.velocity[2]) << "]"
     << ",\"yaw_rate\":" << fmt_g9(s.yaw_rate) << ",\"points_band\":[" << s.points_band[0] << "," << s.points_band[1] << "]"
     << ",\"clutter\":" << s.clutter << ",\"occlusion_prob\":" << fmt_g9(s.occlusion_prob)
     << ",\"surface_jitter\":" << fmt_g9(s.surface_jitter) << ",\"motion_jitter\":" << fmt_g9(s.motion_jitter)
     << ",\"frames\":" << s.frames << ",\"seed\":" << s.seed << "}";
}

}  // namespace detail

inline void save_dataset(const std::vector<Sequence>& seqs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open dataset for writing: " + path);
  for (const auto& seq : seqs) {
    f << "{\"id\":\"" << detail::json_escape(seq.id) << "\",\"category\":\"" << detail::json_escape(seq.category)
      << "\",\"frames\":[";
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      const Frame& fr = seq.frames[t];
      if (t) f << ",";
      f << "{\"points\":[";
      for (int64_t i = 0; i < fr.cloud.size(); ++i) {
        if (i) f << ",";
        const auto p = fr.cloud.point(i);
        f << "[" << fmt_g9(p[0]) << "," << fmt_g9(p[1]) << "," << fmt_g9(p[2]) << "]";
      }
      f << "],\"box\":{\"c\":[" << fmt_g9(fr.box.cx) << "," << fmt_g9(fr.box.cy) << "," << fmt_g9(fr.box.cz)
        << "],\"s\":[" << fmt_g9(fr.box.l) << "," << fmt_g9(fr.box.w) << "," << fmt_g9(fr.box.h)
        << "],\"yaw\":" << fmt_g9(fr.box.yaw) << "}}";
    }
    f << "],\"spec\":";
    detail::write_spec_json(f, seq.spec);
    f << "}\n";
  }
  if (!f) throw std::runtime_error("short write to dataset: " + path);
}

namespace detail {

inline SceneSpec parse_spec_json(const nlohmann::json& j) {
  SceneSpec s;
  s.archetype = j.value("archetype", s.archetype);
  s.category = j.value("category", s.category);
  if (j.contains("size"))
    for (int d = 0; d < 3; ++d) s.size[d] = j.at("size").at(static_cast<size_t>(d)).get<double>();
  if (j.contains("pose"))
    for (int d = 0; d < 4; ++d) s.pose[d] = j.at("pose").at(static_cast<size_t>(d)).get<double>();
  if (j.contains("velocity"))
    for (int d = 0; d < 3; ++d) s.velocity[d] = j.at("velocity").at(static_cast<size_t>(d)).get<double>();
  s.yaw_rate = j.value("yaw_rate", s.yaw_rate);
  if (j.contains("points_band")) {
    s.points_band[0] = j.at("points_band").at(0).get<int64_t>();
    s.points_band[1] = j.at("points_band").at(1).get<int64_t>();
  }
  s.clutter = j.value("clutter", s.clutter);
  s.occlusion_prob = j.value("occlusion_prob", s.occlusion_prob);
  s.surface_jitter = j.value("surface_jitter", s.surface_jitter);
  s.motion_jitter = j.value("motion_jitter", s.motion_jitter);
  s.frames = j.value("frames", s.frames);
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace detail

inline SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scene spec: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("malformed scene spec " + path + ": " + e.what());
  }
  return detail::parse_spec_json(j);
}

inline std::vector<Sequence> load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open dataset: " + path);
  std::vector<Sequence> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    auto field_error = [&](const std::string& field, const std::string& why) {
      return std::runtime_error("dataset " + path + " line " + std::to_string(line_no) + ", field '" + field + "': " + why);
    };
    Sequence seq;
    try {
      seq.id = j.at("id").get<std::string>();
    } catch (const std::exception& e) {
      throw field_error("id", e.what());
    }
    try {
      seq.category = j.at("category").get<std::string>();
    } catch (const std::exception& e) {
      throw field_error("category", e.what());
    }
    if (!j.contains("frames") || !j.at("frames").is_array() || j.at("frames").empty())
      throw field_error("frames", "missing or empty frame list");
    for (const auto& jf : j.at("frames")) {
      Frame fr;
      try {
        const auto& pts = jf.at("points");
        Tensor coords(Shape{static_cast<int64_t>(pts.size()), 3});
        for (size_t i = 0; i < pts.size(); ++i)
          for (size_t d = 0; d < 3; ++d) coords.data[i * 3 + d] = pts.at(i).at(d).get<double>();
        fr.cloud = PointCloud(std::move(coords));
      } catch (const std::exception& e) {
        throw field_error("points", e.what());
      }
      try {
        const auto& jb = jf.at("box");
        fr.box = Box3D(jb.at("c").at(0).get<double>(), jb.at("c").at(1).get<double>(), jb.at("c").at(2).get<double>(),
                       jb.at("s").at(0).get<double>(), jb.at("s").at(1).get<double>(), jb.at("s").at(2).get<double>(),
                       jb.at("yaw").get<double>());
      } catch (const std::exception& e) {
        throw field_error("box", e.what());
      }
      seq.frames.push_back(std::move(fr));
    }
    if (j.contains("spec")) {
      try {
        seq.spec = detail::parse_spec_json(j.at("spec"));
      } catch (const std::exception& e) {
        throw field_error("spec", e.what());
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tracking-results CSV (sequence_id,frame,cx,cy,cz,l,w,h,yaw)
// ---------------------------------------------------------------------------

inline const char* kResultsHeader = "sequence_id,frame,cx,cy,cz,l,w,h,yaw";

inline void save_results(const std::map<std::string, std::vector<Box3D>>& results, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open results for writing: " + path);
  f << kResultsHeader << "\n";
  for (const auto& [id, boxes] : results) {
    for (size_t t = 0; t < boxes.size(); ++t) {
      const Box3D& b = boxes[t];
      f << id << "," << t << "," << fmt_g9(b.cx) << "," << fmt_g9(b.cy) << "," << fmt_g9(b.cz) << "," << fmt_g9(b.l) << ","
        << fmt_g9(b.w) << "," << fmt_g9(b.h) << "," << fmt_g9(b.yaw) << "\n";
    }
  }
  if (!f) throw std::runtime_error("short write to results: " + path);
}

// Boxes grouped by sequence id and ordered by frame index; every referenced
// sequence must be fully covered (frames 0..n-1 exactly once).
inline std::map<std::string, std::vector<Box3D>> import_results(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open results: " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("results " + path + ": empty file");
  if (line != kResultsHeader) throw std::runtime_error("results " + path + ": bad header '" + line + "'");
  std::map<std::string, std::map<int64_t, Box3D>> rows;
  int64_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 9)
      throw std::runtime_error("results " + path + " line " + std::to_string(line_no) + ": expected 9 columns, got " +
                               std::to_string(cols.size()));
    try {
      const std::string& id = cols[0];
      const int64_t frame = std::stoll(cols[1]);
      Box3D b(std::stod(cols[2]), std::stod(cols[3]), std::stod(cols[4]), std::stod(cols[5]), std::stod(cols[6]),
              std::stod(cols[7]), std::stod(cols[8]));
      if (rows[id].count(frame))
        throw std::runtime_error("duplicate frame " + std::to_string(frame) + " for sequence " + id);
      rows[id].emplace(frame, b);
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error("results " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::map<std::string, std::vector<Box3D>> out;
  for (const auto& [id, frames] : rows) {
    std::vector<Box3D> boxes;
    int64_t expect = 0;
    for (const auto& [frame, box] : frames) {
      if (frame != expect)
        throw std::runtime_error("results " + path + ": sequence " + id + " missing frame " + std::to_string(expect));
      boxes.push_back(box);
      ++expect;
    }
    out.emplace(id, std::move(boxes));
  }
  return out;
}

// Results must cover exactly the sequences and frame counts of the dataset.
inline void validate_results(const std::vector<Sequence>& dataset, const std::map<std::string, std::vector<Box3D>>& results) {
  std::map<std::string, size_t> expected;
  for (const auto& s : dataset) expected[s.id] = s.frames.size();
  for (const auto& [id, boxes] : results) {
    auto it = expected.find(id);
    if (it == expected.end()) throw std::runtime_error("results reference unknown sequence " + id);
    if (boxes.size() != it->second)
      throw std::runtime_error("results for sequence " + id + " have " + std::to_string(boxes.size()) + " frames, dataset has " +
                               std::to_string(it->second));
  }
  for (const auto& [id, n] : expected)
    if (!results.count(id)) throw std::runtime_error("results missing sequence " + id);
}

inline int64_t points_in_box(const Frame& fr) {
  int64_t n = 0;
  for (int64_t i = 0; i < fr.cloud.size(); ++i)
    if (fr.box.contains(fr.cloud.point(i))) ++n;
  return n;
}

}  // namespace vox2bev
