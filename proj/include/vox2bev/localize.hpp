#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vox2bev/geom.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

constexpr double kHeatmapEps = 1e-6;

// Axis-aligned search volume discretized at voxel size v. Grid extents use
// floor(range/v)+1 so the far boundary always lands inside the last cell.
struct Region {
  double x_min = 0, x_max = 1;
  double y_min = 0, y_max = 1;
  double z_min = 0, z_max = 1;
  double v = 0.3;

  Region() = default;
  Region(double x0, double x1, double y0, double y1, double z0, double z1, double voxel)
      : x_min(x0), x_max(x1), y_min(y0), y_max(y1), z_min(z0), z_max(z1), v(voxel) {
    if (!(x_max > x_min && y_max > y_min && z_max > z_min)) throw std::invalid_argument("Region: max must exceed min per axis");
    if (!(v > 0)) throw std::invalid_argument("Region: voxel size must be positive");
  }

  int64_t h() const { return static_cast<int64_t>(std::floor((x_max - x_min) / v)) + 1; }
  int64_t w() const { return static_cast<int64_t>(std::floor((y_max - y_min) / v)) + 1; }
  int64_t z() const { return static_cast<int64_t>(std::floor((z_max - z_min) / v)) + 1; }
};

struct VoxelGrid {
  Region region;
  Tensor features;  // [H,W,Z,C+3]: mean point features then mean coords
  Tensor counts;    // [H,W,Z] occupancy
};

// Per-voxel mean of member features, with the mean 3D coordinates appended
// as the last three channels; points outside the region are dropped and
// unoccupied voxels stay zero. Boundary points land in the last cell.
inline VoxelGrid voxelize(Tape& tape, const PointCloud& pts, const Region& region) {
  if (!pts.has_feats()) throw std::invalid_argument("voxelize: features required");
  const int64_t m = pts.size(), c = pts.feats.dim(1);
  const int64_t H = region.h(), W = region.w(), Z = region.z();
  const int64_t cells = H * W * Z, cw = c + 3;

  std::vector<std::vector<int64_t>> members(static_cast<size_t>(cells));
  for (int64_t i = 0; i < m; ++i) {
    const auto p = pts.point(i);
    if (p[0] < region.x_min || p[0] > region.x_max || p[1] < region.y_min || p[1] > region.y_max || p[2] < region.z_min ||
        p[2] > region.z_max)
      continue;
    const int64_t ix = std::min(static_cast<int64_t>(std::floor((p[0] - region.x_min) / region.v)), H - 1);
    const int64_t iy = std::min(static_cast<int64_t>(std::floor((p[1] - region.y_min) / region.v)), W - 1);
    const int64_t iz = std::min(static_cast<int64_t>(std::floor((p[2] - region.z_min) / region.v)), Z - 1);
    members[static_cast<size_t>((ix * W + iy) * Z + iz)].push_back(i);
  }

  VoxelGrid grid;
  grid.region = region;
  grid.features = Tensor(Shape{H, W, Z, cw});
  grid.counts = Tensor(Shape{H, W, Z});
  for (int64_t cell = 0; cell < cells; ++cell) {
    const auto& mem = members[static_cast<size_t>(cell)];
    if (mem.empty()) continue;
    grid.counts.data[static_cast<size_t>(cell)] = static_cast<double>(mem.size());
    const double inv = 1.0 / static_cast<double>(mem.size());
    double* out = grid.features.data.data() + cell * cw;
    for (int64_t i : mem) {
      for (int64_t ch = 0; ch < c; ++ch) out[ch] += pts.feats.data[static_cast<size_t>(i * c + ch)] * inv;
      for (int64_t d = 0; d < 3; ++d) out[c + d] += pts.coords.data[static_cast<size_t>(i * 3 + d)] * inv;
    }
  }

  const int nf = pts.feats.node;
  if (nf >= 0) {
    grid.features.node = tape.push([nf, members, m, c, cw](const Tensor& g, Tape& t) {
      Tensor gf(Shape{m, c});
      for (size_t cell = 0; cell < members.size(); ++cell) {
        const auto& mem = members[cell];
        if (mem.empty()) continue;
        const double inv = 1.0 / static_cast<double>(mem.size());
        const double* gcell = g.data.data() + static_cast<int64_t>(cell) * cw;
        for (int64_t i : mem)
          for (int64_t ch = 0; ch < c; ++ch) gf.data[static_cast<size_t>(i * c + ch)] += gcell[ch] * inv;
      }
      t.accumulate(nf, gf);
    });
    grid.features.requires_grad = true;
  }
  return grid;
}

// ---------------------------------------------------------------------------
// BEV network
// ---------------------------------------------------------------------------

struct BevConfig {
  int64_t feature_dim = 32;  // C; voxel input is C+3, trunk runs at 2C
};

struct BevMaps {
  Tensor heatmap;  // [H,W,1], clamped sigmoid
  Tensor offrot;   // [H,W,3]: x offset, y offset, rotation
  Tensor zmap;     // [H,W,1]
};

inline void bev_init(ParamStore& ps, const BevConfig& cfg, Rng& rng) {
  const int64_t c2 = 2 * cfg.feature_dim;
  const int64_t cin = cfg.feature_dim + 3;
  auto conv3 = [&](const std::string& name, int64_t ci, int64_t co) {
    ps.create_he("bev." + name + ".k", Shape{3, 3, 3, ci, co}, rng);
    ps.create_zeros("bev." + name + ".b", Shape{co});
  };
  auto conv2 = [&](const std::string& name, int64_t k, int64_t ci, int64_t co) {
    ps.create_he("bev." + name + ".k", Shape{k, k, ci, co}, rng);
    ps.create_zeros("bev." + name + ".b", Shape{co});
  };
  conv3("v1", cin, c2);
  conv3("v2", c2, c2);
  conv3("v3", c2, c2);
  conv3("v4", c2, c2);
  conv2("e1", 3, c2, c2);
  conv2("e2", 3, c2, c2);
  conv2("e3", 3, c2, c2);
  conv2("up", 2, c2, c2);
  conv2("fuse", 3, 2 * c2, c2);
  for (const char* head : {"hm", "off", "z"}) {
    conv2(std::string(head) + "1", 3, c2, c2);
  }
  conv2("hm2", 1, c2, 1);
  conv2("off2", 1, c2, 3);
  conv2("z2", 1, c2, 1);
}

namespace detail {

inline Tensor conv3d_block(Tape& tape, ParamStore& ps, const std::string& name, const Tensor& x, int64_t sz) {
  Tensor y = conv3d(tape, x, ps.at("bev." + name + ".k"), 1, 1, sz);
  return relu(tape, add_channels(tape, y, ps.at("bev." + name + ".b")));
}

inline Tensor conv2d_block(Tape& tape, ParamStore& ps, const std::string& name, const Tensor& x, int64_t stride) {
  Tensor y = conv2d(tape, x, ps.at("bev." + name + ".k"), stride);
  return relu(tape, add_channels(tape, y, ps.at("bev." + name + ".b")));
}

}  // namespace detail

// Voxel grid -> heatmap / offset+rotation / z maps. Four 3D convolutions
// (z strides 2,1,2,1) aggregate the volume, a z-axis max produces the BEV
// map, and a small encoder-decoder (strides 2,1,1, then a 2x2 transposed
// convolution back up, skip-concatenated) feeds three two-convolution heads.
inline BevMaps bev_forward(Tape& tape, ParamStore& ps, const VoxelGrid& grid) {
  const int64_t H = grid.features.dim(0), W = grid.features.dim(1), Z = grid.features.dim(2);
  if (Z < 4) throw std::invalid_argument("bev_forward: need Z >= 4, got " + std::to_string(Z));

  Tensor v = detail::conv3d_block(tape, ps, "v1", grid.features, 2);
  v = detail::conv3d_block(tape, ps, "v2", v, 1);
  v = detail::conv3d_block(tape, ps, "v3", v, 2);
  v = detail::conv3d_block(tape, ps, "v4", v, 1);

  Tensor bev = reduce_max(tape, v, 2);  // [H,W,2C]

  Tensor e1 = detail::conv2d_block(tape, ps, "e1", bev, 2);
  Tensor e2 = detail::conv2d_block(tape, ps, "e2", e1, 1);
  Tensor e3 = detail::conv2d_block(tape, ps, "e3", e2, 1);
  Tensor up = conv2d_transpose(tape, e3, ps.at("bev.up.k"), 2);
  up = relu(tape, add_channels(tape, up, ps.at("bev.up.b")));
  up = crop2d(tape, up, H, W);
  Tensor skip = concat(tape, 2, {&bev, &up});
  Tensor fused = detail::conv2d_block(tape, ps, "fuse", skip, 1);

  auto head = [&](const std::string& name) {
    Tensor h = detail::conv2d_block(tape, ps, name + "1", fused, 1);
    Tensor o = conv2d(tape, h, ps.at("bev." + name + "2.k"), 1);
    return add_channels(tape, o, ps.at("bev." + name + "2.b"));
  };
  BevMaps maps;
  maps.heatmap = clamp(tape, sigmoid(tape, head("hm")), kHeatmapEps, 1.0 - kHeatmapEps);
  maps.offrot = head("off");
  maps.zmap = head("z");
  return maps;
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

struct LocalizationTargets {
  Tensor heatmap;              // [H,W], values in [0,1], exactly one 1
  Tensor offrot;               // [H,W,3], valid only where mask is set
  std::vector<uint8_t> mask;   // [H*W] validity of offrot cells
  double z = 0;                // supervised at the discrete center only
  int64_t cix = 0, ciy = 0;    // discrete center
  double cx = 0, cy = 0;       // continuous center in cell units
};

// Heatmap 1 at the discrete center; 1/(d+1) at cells whose centers fall in
// the ground-plane GT rectangle; 0 elsewhere. Offsets cover the radius-r
// square around the discrete center (clipped), each cell holding the
// displacement to the continuous center plus the rotation channel.
inline LocalizationTargets make_targets(const Box3D& gt, const Region& region, int64_t r = 2) {
  if (gt.cx < region.x_min || gt.cx > region.x_max || gt.cy < region.y_min || gt.cy > region.y_max)
    throw std::invalid_argument("make_targets: box center outside region");
  const int64_t H = region.h(), W = region.w();

  LocalizationTargets t;
  t.cx = (gt.cx - region.x_min) / region.v;
  t.cy = (gt.cy - region.y_min) / region.v;
  t.cix = std::min(static_cast<int64_t>(std::floor(t.cx)), H - 1);
  t.ciy = std::min(static_cast<int64_t>(std::floor(t.cy)), W - 1);
  t.z = gt.cz;
  t.heatmap = Tensor(Shape{H, W});
  t.offrot = Tensor(Shape{H, W, 3});
  t.mask.assign(static_cast<size_t>(H * W), 0);

  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      if (i == t.cix && j == t.ciy) {
        t.heatmap.data[static_cast<size_t>(i * W + j)] = 1.0;
        continue;
      }
      const double px = region.x_min + (static_cast<double>(i) + 0.5) * region.v;
      const double py = region.y_min + (static_cast<double>(j) + 0.5) * region.v;
      if (gt.contains_bev(px, py)) {
        const double di = static_cast<double>(i - t.cix), dj = static_cast<double>(j - t.ciy);
        t.heatmap.data[static_cast<size_t>(i * W + j)] = 1.0 / (std::sqrt(di * di + dj * dj) + 1.0);
      }
    }

  for (int64_t di = -r; di <= r; ++di)
    for (int64_t dj = -r; dj <= r; ++dj) {
      const int64_t i = t.cix + di, j = t.ciy + dj;
      if (i < 0 || i >= H || j < 0 || j >= W) continue;
      t.mask[static_cast<size_t>(i * W + j)] = 1;
      t.offrot.data[static_cast<size_t>((i * W + j) * 3)] = t.cx - static_cast<double>(i);
      t.offrot.data[static_cast<size_t>((i * W + j) * 3 + 1)] = t.cy - static_cast<double>(j);
      t.offrot.data[static_cast<size_t>((i * W + j) * 3 + 2)] = gt.yaw;
    }
  return t;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Variant of the focal loss for a soft heatmap target: at the single cell
// where the target is 1 the term is (1-p)^alpha log p; elsewhere it is
// (1-target)^beta p^alpha log(1-p); summed, negated, unnormalized.
inline Tensor focal_loss(Tape& tape, const Tensor& pred, const Tensor& target, double alpha = 2.0, double beta = 4.0) {
  if (pred.numel() != target.numel()) throw std::invalid_argument("focal_loss: shape mismatch");
  const int64_t n = pred.numel();
  Tensor p = reshape(tape, pred, Shape{n});
  Tensor pos_w(Shape{n});
  Tensor neg_w(Shape{n});
  for (int64_t i = 0; i < n; ++i) {
    const double y = target.data[static_cast<size_t>(i)];
    if (y == 1.0)
      pos_w.data[static_cast<size_t>(i)] = 1.0;
    else
      neg_w.data[static_cast<size_t>(i)] = std::pow(1.0 - y, beta);
  }
  Tensor one(Shape{n}, 1.0);
  Tensor om = sub(tape, one, p);
  auto powi = [&](const Tensor& x) {  // x^alpha for integer alpha
    Tensor acc = x;
    for (int k = 1; k < static_cast<int>(alpha); ++k) acc = mul(tape, acc, x);
    return acc;
  };
  if (alpha != std::floor(alpha) || alpha < 1) throw std::invalid_argument("focal_loss: alpha must be a positive integer");
  Tensor pos_term = mul(tape, mul(tape, powi(om), log(tape, p)), pos_w);
  Tensor neg_term = mul(tape, mul(tape, powi(p), log(tape, om)), neg_w);
  return scale(tape, add(tape, sum(tape, pos_term), sum(tape, neg_term)), -1.0);
}

// L1 over the masked cells, three channels each, summed.
inline Tensor offset_rot_loss(Tape& tape, const Tensor& pred, const LocalizationTargets& t) {
  const int64_t HW = static_cast<int64_t>(t.mask.size());
  if (pred.numel() != HW * 3) throw std::invalid_argument("offset_rot_loss: shape mismatch");
  std::vector<int64_t> idx;
  std::vector<double> want;
  for (int64_t cell = 0; cell < HW; ++cell) {
    if (!t.mask[static_cast<size_t>(cell)]) continue;
    for (int64_t ch = 0; ch < 3; ++ch) {
      idx.push_back(cell * 3 + ch);
      want.push_back(t.offrot.data[static_cast<size_t>(cell * 3 + ch)]);
    }
  }
  if (idx.empty()) throw std::invalid_argument("offset_rot_loss: empty validity mask");
  Tensor taken = take(tape, pred, idx);
  Tensor target(Shape{static_cast<int64_t>(want.size())}, want);
  return sum(tape, abs(tape, sub(tape, taken, target)));
}

// L1 at the discrete-center cell only.
inline Tensor z_loss(Tape& tape, const Tensor& zmap, const LocalizationTargets& t) {
  const int64_t W = t.heatmap.dim(1);
  Tensor at = take(tape, zmap, {t.cix * W + t.ciy});
  Tensor want(Shape{1}, std::vector<double>{t.z});
  return sum(tape, abs(tape, sub(tape, at, want)));
}

inline Tensor total_loss(Tape& tape, const Tensor& l_shape, const Tensor& l_center, const Tensor& l_off, const Tensor& l_z,
                         double lambda1 = 1e-6, double lambda2 = 1.0, double lambda3 = 2.0) {
  Tensor center_off = scale(tape, add(tape, l_center, l_off), lambda2);
  Tensor shape_term = scale(tape, l_shape, lambda1);
  Tensor z_term = scale(tape, l_z, lambda3);
  return add(tape, add(tape, shape_term, center_off), z_term);
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// Highest-response cell (row-major ties take the smaller index), plus the
// predicted offsets, z and rotation there; the size is carried over from the
// template box. All in the region's frame.
inline Box3D decode(const Tensor& heatmap, const Tensor& offrot, const Tensor& zmap, const Box3D& template_box,
                    const Region& region) {
  const int64_t H = region.h(), W = region.w();
  if (heatmap.numel() != H * W || offrot.numel() != H * W * 3 || zmap.numel() != H * W)
    throw std::invalid_argument("decode: map shape mismatch");
  int64_t best = 0;
  for (int64_t i = 1; i < H * W; ++i)
    if (heatmap.data[static_cast<size_t>(i)] > heatmap.data[static_cast<size_t>(best)]) best = i;
  const int64_t bi = best / W, bj = best % W;
  const double tx = static_cast<double>(bi) + offrot.data[static_cast<size_t>(best * 3)];
  const double ty = static_cast<double>(bj) + offrot.data[static_cast<size_t>(best * 3 + 1)];
  const double yaw = offrot.data[static_cast<size_t>(best * 3 + 2)];
  return Box3D(region.x_min + tx * region.v, region.y_min + ty * region.v, zmap.data[static_cast<size_t>(best)],
               template_box.l, template_box.w, template_box.h, yaw);
}

}  // namespace vox2bev
