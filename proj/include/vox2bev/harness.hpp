#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vox2bev/backbone.hpp"
#include "vox2bev/config.hpp"
#include "vox2bev/dataset.hpp"
#include "vox2bev/embed.hpp"
#include "vox2bev/errors.hpp"
#include "vox2bev/geom.hpp"
#include "vox2bev/localize.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/shape_head.hpp"

namespace vox2bev {

enum class TemplateScheme { kFirstGt, kPreviousResult, kFirstAndPrevious, kAllPrevious };

inline TemplateScheme parse_scheme(const std::string& s) {
  if (s == "first_gt") return TemplateScheme::kFirstGt;
  if (s == "previous_result") return TemplateScheme::kPreviousResult;
  if (s == "first_and_previous") return TemplateScheme::kFirstAndPrevious;
  if (s == "all_previous") return TemplateScheme::kAllPrevious;
  throw std::invalid_argument("unknown template scheme '" + s + "'");
}

// Search volume in the reference box's canonical frame: the box footprint
// enlarged by the margin on each side in x/y, a fixed half-extent in z.
inline Region make_region(const Box3D& ref, double margin, double z_half, double v) {
  return Region(-ref.l / 2 - margin, ref.l / 2 + margin, -ref.w / 2 - margin, ref.w / 2 + margin, -z_half, z_half, v);
}

// Frame points inside the region, expressed in the reference box's frame.
inline PointCloud crop_to_region(const PointCloud& cloud, const Box3D& ref, const Region& region) {
  std::vector<std::array<double, 3>> keep;
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const auto q = ref.to_canonical(cloud.point(i));
    if (q[0] >= region.x_min && q[0] <= region.x_max && q[1] >= region.y_min && q[1] <= region.y_max &&
        q[2] >= region.z_min && q[2] <= region.z_max)
      keep.push_back(q);
  }
  Tensor coords(Shape{static_cast<int64_t>(keep.size()), 3});
  for (size_t i = 0; i < keep.size(); ++i)
    for (size_t d = 0; d < 3; ++d) coords.data[i * 3 + d] = keep[i][d];
  return PointCloud(std::move(coords));
}

// GT box re-expressed relative to the reference box.
inline Box3D box_in_frame(const Box3D& box, const Box3D& ref) {
  const auto c = ref.to_canonical({box.cx, box.cy, box.cz});
  return Box3D(c[0], c[1], c[2], box.l, box.w, box.h, normalize_yaw(box.yaw - ref.yaw));
}

inline Box3D box_to_world(const Box3D& canonical, const Box3D& ref) {
  const auto c = ref.from_canonical({canonical.cx, canonical.cy, canonical.cz});
  return Box3D(c[0], c[1], c[2], canonical.l, canonical.w, canonical.h, normalize_yaw(canonical.yaw + ref.yaw));
}

inline PointCloud merge_clouds(const std::vector<const PointCloud*>& parts) {
  int64_t total = 0;
  for (const PointCloud* p : parts) total += p->size();
  Tensor coords(Shape{total, 3});
  int64_t at = 0;
  for (const PointCloud* p : parts) {
    std::copy(p->coords.data.begin(), p->coords.data.end(), coords.data.begin() + at * 3);
    at += p->size();
  }
  return PointCloud(std::move(coords));
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

inline BackboneConfig backbone_config(const PipelineConfig& cfg) {
  BackboneConfig b;
  b.feature_dim = cfg.model.feature_dim;
  b.max_samples = cfg.model.max_samples;
  b.radius1 = cfg.model.radius1;
  b.radius2 = cfg.model.radius2;
  b.radius3 = cfg.model.radius3;
  return b;
}

inline ShapeConfig shape_config(const PipelineConfig& cfg) { return ShapeConfig{cfg.shape.points, cfg.shape.edge_k}; }

inline ParamStore init_model(const PipelineConfig& cfg, uint64_t seed) {
  ParamStore ps;
  Rng rng(seed);
  backbone_init(ps, backbone_config(cfg), rng);
  embed_init(ps, cfg.model.feature_dim, rng);
  shape_init(ps, cfg.model.feature_dim, cfg.track.search_budget / 2, shape_config(cfg), rng);
  BevConfig bev;
  bev.feature_dim = cfg.model.feature_dim;
  bev_init(ps, bev, rng);
  return ps;
}

// Shared inference path: encode both branches, embed, voxelize the enhanced
// search features, run the BEV network.
struct ForwardOut {
  EmbeddedSearch search;
  VoxelGrid grid;
  BevMaps maps;
};

inline ForwardOut model_forward(Tape& tape, ParamStore& ps, const PointCloud& tmpl, const PointCloud& search,
                                const Region& region, const PipelineConfig& cfg) {
  const BackboneConfig bc = backbone_config(cfg);
  PointCloud tmpl_enc = encode(tape, ps, tmpl, bc);
  PointCloud search_enc = encode(tape, ps, search, bc);
  ForwardOut out;
  out.search = embed_search(tape, ps, tmpl_enc, search_enc);
  out.grid = voxelize(tape, PointCloud(out.search.coords, out.search.F), region);
  out.maps = bev_forward(tape, ps, out.grid);
  return out;
}

// ---------------------------------------------------------------------------
// Training protocol
// ---------------------------------------------------------------------------

struct TrainSample {
  PointCloud tmpl;    // template_budget canonical points
  PointCloud search;  // search_budget canonical points
  Box3D gt;           // in the reference (region) frame
  Region region;
  Box3D ref;  // world-frame reference box (jittered current GT)
};

inline Box3D jitter_box(const Box3D& box, const PipelineConfig& cfg, Rng& rng) {
  const double dx = rng.uniform(-cfg.augment.xy, cfg.augment.xy);
  const double dy = rng.uniform(-cfg.augment.xy, cfg.augment.xy);
  const double dz = rng.uniform(-cfg.augment.z, cfg.augment.z);
  const double dyaw = rng.uniform(-cfg.augment.yaw_deg, cfg.augment.yaw_deg) * M_PI / 180.0;
  return Box3D(box.cx + dx, box.cy + dy, box.cz + dz, box.l, box.w, box.h, normalize_yaw(box.yaw + dyaw));
}

// Sample for frame t of a sequence: template from the first frame's GT crop
// united with a jittered crop of the previous frame (when distinct), search
// from the current GT box jittered and enlarged. Returns nothing when the
// crops leave no points to work with (the caller counts skips).
inline std::optional<TrainSample> make_train_sample(const Sequence& seq, int64_t t, const PipelineConfig& cfg, Rng& rng,
                                                    std::string* skip_reason = nullptr) {
  if (t < 1 || t >= static_cast<int64_t>(seq.frames.size()))
    throw std::invalid_argument("make_train_sample: frame index out of range");

  const Frame& first = seq.frames[0];
  auto [tmpl_first, n_first] = crop_and_center(first.cloud, first.box);
  std::vector<const PointCloud*> parts{&tmpl_first};
  PointCloud tmpl_prev;
  if (t - 1 > 0) {
    const Frame& prev = seq.frames[static_cast<size_t>(t - 1)];
    const Box3D prev_jittered = jitter_box(prev.box, cfg, rng);
    auto [cropped, n_prev] = crop_and_center(prev.cloud, prev_jittered);
    tmpl_prev = std::move(cropped);
    parts.push_back(&tmpl_prev);
  }
  PointCloud tmpl_union = merge_clouds(parts);
  if (tmpl_union.size() == 0) {
    if (skip_reason) *skip_reason = "empty template";
    return std::nullopt;
  }

  const Frame& cur = seq.frames[static_cast<size_t>(t)];
  const Box3D ref = jitter_box(cur.box, cfg, rng);
  const Region region = make_region(ref, cfg.track.margin, cfg.voxel.z_half, cfg.voxel.size);
  PointCloud search = crop_to_region(cur.cloud, ref, region);
  if (search.size() == 0) {
    if (skip_reason) *skip_reason = "empty search area";
    return std::nullopt;
  }
  const Box3D gt = box_in_frame(cur.box, ref);
  if (gt.cx < region.x_min || gt.cx > region.x_max || gt.cy < region.y_min || gt.cy > region.y_max) {
    if (skip_reason) *skip_reason = "jittered region excludes the GT center";
    return std::nullopt;
  }

  TrainSample s;
  s.tmpl = resample(tmpl_union, cfg.track.template_budget, rng);
  s.search = resample(search, cfg.track.search_budget, rng);
  s.gt = gt;
  s.region = region;
  s.ref = ref;
  return s;
}

struct LossParts {
  double shape = 0, center = 0, offset = 0, z = 0, total = 0;
};

// Step-decayed learning rate for a given epoch.
inline double lr_at(const PipelineConfig& cfg, int64_t epoch) {
  return cfg.train.lr * std::pow(cfg.train.lr_decay, static_cast<double>(epoch / cfg.train.decay_every));
}

struct TrainResult {
  ParamStore params;
  std::vector<double> loss_curve;  // total loss per processed sample
  std::vector<LossParts> parts_curve;
  int64_t skipped = 0;
};

inline void check_finite(const Tensor& t, const char* component) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value in ") + component);
}

// One optimization pass per (sequence, frame>=1) pair per epoch, in seeded
// shuffled order, following lr(epoch) = lr0 * decay^(epoch / every).
inline TrainResult train(const std::vector<Sequence>& dataset, const PipelineConfig& cfg, uint64_t seed,
                         int64_t max_iterations = -1) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult out;
  out.params = init_model(cfg, Rng(seed).fork(1).seed());
  Adam adam(cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);
  Rng rng = Rng(seed).fork(2);

  const ShapeConfig shape_cfg = shape_config(cfg);
  std::vector<Tensor> dense = {};
  for (const auto& seq : dataset) {
    Rng drng = Rng(seed).fork(1000 + dense.size());
    dense.push_back(dense_gt(seq, shape_cfg.points, drng));
  }

  std::vector<std::pair<size_t, int64_t>> samples;
  for (size_t s = 0; s < dataset.size(); ++s)
    for (int64_t t = 1; t < static_cast<int64_t>(dataset[s].frames.size()); ++t) samples.emplace_back(s, t);
  if (samples.empty()) throw std::invalid_argument("train: no trainable frames (all sequences length 1)");

  int64_t iter = 0;
  for (int64_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_at(cfg, epoch);
    // Seeded Fisher-Yates shuffle of the sample order.
    std::vector<std::pair<size_t, int64_t>> order = samples;
    for (size_t i = 0; i + 1 < order.size(); ++i) {
      const size_t j = i + static_cast<size_t>(rng.uniform_index(order.size() - i));
      std::swap(order[i], order[j]);
    }

    for (const auto& [si, t] : order) {
      if (max_iterations >= 0 && iter >= max_iterations) return out;
      std::string skip;
      auto sample = make_train_sample(dataset[si], t, cfg, rng, &skip);
      if (!sample) {
        ++out.skipped;
        continue;
      }

      Tape tape;
      auto node_of = out.params.watch_all(tape);
      ForwardOut fwd = model_forward(tape, out.params, sample->tmpl, sample->search, sample->region, cfg);

      Tensor gated = gate(tape, out.params, fwd.search.F);
      Tensor generated = generate_shape(tape, out.params, gated, shape_cfg);
      Tensor l_shape = chamfer(tape, generated, dense[si]);
      check_finite(l_shape, "shape loss");

      const LocalizationTargets targets = make_targets(sample->gt, sample->region, cfg.loss.offset_radius);
      Tensor l_center = focal_loss(tape, fwd.maps.heatmap, targets.heatmap, cfg.loss.alpha, cfg.loss.beta);
      check_finite(l_center, "center loss");
      Tensor l_off = offset_rot_loss(tape, fwd.maps.offrot, targets);
      check_finite(l_off, "offset loss");
      Tensor l_z = z_loss(tape, fwd.maps.zmap, targets);
      check_finite(l_z, "z loss");
      Tensor l_total = total_loss(tape, l_shape, l_center, l_off, l_z, cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3);
      check_finite(l_total, "total loss");

      Gradients grads = tape.backward(l_total);
      for (const auto& [name, node] : node_of)
        if (grads.has(node) && !grads.at(node).all_finite()) throw NumericError("non-finite gradient for " + name);
      adam.step(out.params, grads, node_of, lr);

      out.loss_curve.push_back(l_total.value());
      out.parts_curve.push_back(
          LossParts{l_shape.value(), l_center.value(), l_off.value(), l_z.value(), l_total.value()});
      ++iter;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tracking protocol
// ---------------------------------------------------------------------------

struct TrackResult {
  std::vector<Box3D> boxes;       // one per frame, world frame
  std::vector<uint8_t> fallback;  // 1 where the persistence fallback fired
  double seconds = 0;
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Frame 0 is initialized from GT; afterwards the template follows the
// configured scheme over previously tracked results and the search area
// follows the previous result enlarged by the margin. Frames whose search
// area (or template) comes up empty emit the previous box unchanged.
// The frame-0 GT crop counts as initialization, not a tracked result, so at
// frame 1 every scheme reduces to the first-GT template.
inline TrackResult track_sequence(ParamStore& ps, const Sequence& seq, const PipelineConfig& cfg, uint64_t seed) {
  if (seq.frames.empty()) throw std::invalid_argument("track_sequence: empty sequence");
  const TemplateScheme scheme = parse_scheme(cfg.track.scheme);
  const auto t0 = std::chrono::steady_clock::now();

  TrackResult out;
  Rng rng = Rng(seed).fork(fnv1a(seq.id));

  Box3D prev_box = seq.frames[0].box;
  out.boxes.push_back(prev_box);
  out.fallback.push_back(0);

  // Canonical point sets from previously tracked frames.
  PointCloud first_crop = crop_and_center(seq.frames[0].cloud, prev_box).first;
  PointCloud latest_crop;  // from the most recent tracked frame (t >= 1)
  std::vector<PointCloud> all_crops{first_crop};

  for (size_t t = 1; t < seq.frames.size(); ++t) {
    const Frame& fr = seq.frames[t];

    PointCloud tmpl_union;
    switch (scheme) {
      case TemplateScheme::kFirstGt:
        tmpl_union = first_crop;
        break;
      case TemplateScheme::kPreviousResult:
        tmpl_union = latest_crop.size() > 0 ? latest_crop : first_crop;
        break;
      case TemplateScheme::kFirstAndPrevious:
        tmpl_union = latest_crop.size() > 0 ? merge_clouds({&first_crop, &latest_crop}) : first_crop;
        break;
      case TemplateScheme::kAllPrevious: {
        std::vector<const PointCloud*> parts;
        for (const auto& c : all_crops) parts.push_back(&c);
        tmpl_union = merge_clouds(parts);
        break;
      }
    }

    const Region region = make_region(prev_box, cfg.track.margin, cfg.voxel.z_half, cfg.voxel.size);
    PointCloud search_raw = crop_to_region(fr.cloud, prev_box, region);

    Box3D emitted = prev_box;
    bool fell_back = true;
    if (tmpl_union.size() > 0 && search_raw.size() > 0) {
      PointCloud tmpl = resample(tmpl_union, cfg.track.template_budget, rng);
      PointCloud search = resample(search_raw, cfg.track.search_budget, rng);
      Tape tape;
      ForwardOut fwd = model_forward(tape, ps, tmpl, search, region, cfg);
      const Box3D canonical =
          decode(fwd.maps.heatmap, fwd.maps.offrot, fwd.maps.zmap, box_in_frame(prev_box, prev_box), region);
      emitted = box_to_world(canonical, prev_box);
      fell_back = false;
    }

    out.boxes.push_back(emitted);
    out.fallback.push_back(fell_back ? 1 : 0);

    PointCloud crop = crop_and_center(fr.cloud, emitted).first;
    if (crop.size() > 0) {
      latest_crop = crop;
      all_crops.push_back(std::move(crop));
    }
    prev_box = emitted;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// Frame-0 persistence baseline: the GT box of frame 0 for every frame.
inline std::vector<Box3D> persistence_baseline(const Sequence& seq) {
  return std::vector<Box3D>(seq.frames.size(), seq.frames.at(0).box);
}

}  // namespace vox2bev
