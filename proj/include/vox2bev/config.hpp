#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vox2bev {

// Every tunable in one place, defaulted to the reference settings so config
// files only need to override what an experiment changes.
struct PipelineConfig {
  struct Model {
    int64_t feature_dim = 32;
    int64_t max_samples = 16;
    double radius1 = 0.3, radius2 = 0.5, radius3 = 0.7;
  } model;

  struct ShapeCfg {
    int64_t points = 2048;
    int64_t edge_k = 8;
  } shape;

  struct Voxel {
    double size = 0.3;
    double z_half = 2.0;
  } voxel;

  struct Track {
    std::string scheme = "first_and_previous";
    int64_t template_budget = 512;
    int64_t search_budget = 1024;
    double margin = 2.0;
  } track;

  struct Loss {
    double alpha = 2.0, beta = 4.0;
    int64_t offset_radius = 2;
    double lambda1 = 1e-6, lambda2 = 1.0, lambda3 = 2.0;
  } loss;

  struct Train {
    double lr = 0.001;
    double lr_decay = 0.2;
    int64_t decay_every = 6;
    int64_t epochs = 20;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  } train;

  struct Augment {
    double xy = 0.3;       // uniform +- bound, meters
    double z = 0.1;        // uniform +- bound, meters
    double yaw_deg = 5.0;  // uniform +- bound, degrees
  } augment;

  void validate() const {
    auto req = [](bool ok, const std::string& what) {
      if (!ok) throw std::invalid_argument("config: " + what);
    };
    req(model.feature_dim >= 1, "model.feature_dim must be >= 1");
    req(model.max_samples >= 1, "model.max_samples must be >= 1");
    req(model.radius1 > 0 && model.radius2 > 0 && model.radius3 > 0, "model radii must be positive");
    req(shape.points >= 1, "shape.points must be >= 1");
    req(shape.edge_k >= 1, "shape.edge_k must be >= 1");
    req(voxel.size > 0, "voxel.size must be positive");
    req(voxel.z_half > 0, "voxel.z_half must be positive");
    req(track.template_budget >= 8 && track.search_budget >= 8, "track budgets must be >= 8");
    req(track.margin >= 0, "track.margin must be >= 0");
    req(track.scheme == "first_gt" || track.scheme == "previous_result" || track.scheme == "first_and_previous" ||
            track.scheme == "all_previous",
        "unknown track.scheme '" + track.scheme + "'");
    req(loss.offset_radius >= 0, "loss.offset_radius must be >= 0");
    req(train.lr > 0 && train.lr_decay > 0 && train.decay_every >= 1 && train.epochs >= 1, "invalid train schedule");
    req(shape.points % (track.search_budget / 2) == 0,
        "shape.points must be divisible by the encoded search count (search_budget/2)");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// Minimal section/key=value text format. '#' or ';' starts a comment;
// unknown sections or keys are errors so typos cannot silently fall back to
// defaults.
inline PipelineConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  PipelineConfig cfg;
  std::string line, section;
  int64_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument(origin + " line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "shape" && section != "voxel" && section != "track" && section != "loss" &&
          section != "train" && section != "augment")
        fail("unknown section [" + section + "]");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) fail("empty key or value");

    auto as_f64 = [&]() {
      try {
        size_t pos;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
      } catch (const std::exception&) {
        fail("cannot parse '" + value + "' as a number");
        return 0.0;
      }
    };
    auto as_i64 = [&]() {
      try {
        size_t pos;
        const int64_t v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
      } catch (const std::exception&) {
        fail("cannot parse '" + value + "' as an integer");
        return int64_t{0};
      }
    };

    bool known = true;
    if (section == "model") {
      if (key == "feature_dim") cfg.model.feature_dim = as_i64();
      else if (key == "max_samples") cfg.model.max_samples = as_i64();
      else if (key == "radius1") cfg.model.radius1 = as_f64();
      else if (key == "radius2") cfg.model.radius2 = as_f64();
      else if (key == "radius3") cfg.model.radius3 = as_f64();
      else known = false;
    } else if (section == "shape") {
      if (key == "points") cfg.shape.points = as_i64();
      else if (key == "edge_k") cfg.shape.edge_k = as_i64();
      else known = false;
    } else if (section == "voxel") {
      if (key == "size") cfg.voxel.size = as_f64();
      else if (key == "z_half") cfg.voxel.z_half = as_f64();
      else known = false;
    } else if (section == "track") {
      if (key == "scheme") cfg.track.scheme = value;
      else if (key == "template_budget") cfg.track.template_budget = as_i64();
      else if (key == "search_budget") cfg.track.search_budget = as_i64();
      else if (key == "margin") cfg.track.margin = as_f64();
      else known = false;
    } else if (section == "loss") {
      if (key == "alpha") cfg.loss.alpha = as_f64();
      else if (key == "beta") cfg.loss.beta = as_f64();
      else if (key == "offset_radius") cfg.loss.offset_radius = as_i64();
      else if (key == "lambda1") cfg.loss.lambda1 = as_f64();
      else if (key == "lambda2") cfg.loss.lambda2 = as_f64();
      else if (key == "lambda3") cfg.loss.lambda3 = as_f64();
      else known = false;
    } else if (section == "train") {
      if (key == "lr") cfg.train.lr = as_f64();
      else if (key == "lr_decay") cfg.train.lr_decay = as_f64();
      else if (key == "decay_every") cfg.train.decay_every = as_i64();
      else if (key == "epochs") cfg.train.epochs = as_i64();
      else if (key == "beta1") cfg.train.beta1 = as_f64();
      else if (key == "beta2") cfg.train.beta2 = as_f64();
      else if (key == "adam_eps") cfg.train.adam_eps = as_f64();
      else known = false;
    } else if (section == "augment") {
      if (key == "xy") cfg.augment.xy = as_f64();
      else if (key == "z") cfg.augment.z = as_f64();
      else if (key == "yaw_deg") cfg.augment.yaw_deg = as_f64();
      else known = false;
    } else {
      fail("key outside any section");
    }
    if (!known) fail("unknown key '" + key + "' in section [" + section + "]");
  }
  cfg.validate();
  return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  return parse_config(f, path);
}

// Textual echo that parses back to the same configuration.
inline std::string config_to_string(const PipelineConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n"
     << "feature_dim = " << c.model.feature_dim << "\n"
     << "max_samples = " << c.model.max_samples << "\n"
     << "radius1 = " << c.model.radius1 << "\n"
     << "radius2 = " << c.model.radius2 << "\n"
     << "radius3 = " << c.model.radius3 << "\n"
     << "\n[shape]\n"
     << "points = " << c.shape.points << "\n"
     << "edge_k = " << c.shape.edge_k << "\n"
     << "\n[voxel]\n"
     << "size = " << c.voxel.size << "\n"
     << "z_half = " << c.voxel.z_half << "\n"
     << "\n[track]\n"
     << "scheme = " << c.track.scheme << "\n"
     << "template_budget = " << c.track.template_budget << "\n"
     << "search_budget = " << c.track.search_budget << "\n"
     << "margin = " << c.track.margin << "\n"
     << "\n[loss]\n"
     << "alpha = " << c.loss.alpha << "\n"
     << "beta = " << c.loss.beta << "\n"
     << "offset_radius = " << c.loss.offset_radius << "\n"
     << "lambda1 = " << c.loss.lambda1 << "\n"
     << "lambda2 = " << c.loss.lambda2 << "\n"
     << "lambda3 = " << c.loss.lambda3 << "\n"
     << "\n[train]\n"
     << "lr = " << c.train.lr << "\n"
     << "lr_decay = " << c.train.lr_decay << "\n"
     << "decay_every = " << c.train.decay_every << "\n"
     << "epochs = " << c.train.epochs << "\n"
     << "beta1 = " << c.train.beta1 << "\n"
     << "beta2 = " << c.train.beta2 << "\n"
     << "adam_eps = " << c.train.adam_eps << "\n"
     << "\n[augment]\n"
     << "xy = " << c.augment.xy << "\n"
     << "z = " << c.augment.z << "\n"
     << "yaw_deg = " << c.augment.yaw_deg << "\n";
  return os.str();
}

}  // namespace vox2bev
