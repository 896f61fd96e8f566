#pragma once

#include <string>
#include <vector>

#include "vox2bev/geom.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

// Widths and grouping settings for one set-abstraction level.
struct SaSpec {
  double radius = 0.3;
  int64_t max_samples = 16;
  std::vector<int64_t> widths;
};

struct BackboneConfig {
  int64_t feature_dim = 32;  // C
  int64_t max_samples = 16;
  double radius1 = 0.3, radius2 = 0.5, radius3 = 0.7;

  std::vector<SaSpec> sa_specs() const {
    const int64_t c = feature_dim;
    return {{radius1, max_samples, {c, c}}, {radius2, max_samples, {2 * c, 2 * c}}, {radius3, max_samples, {2 * c, 2 * c}}};
  }
  // Interpolation + skip input widths are fixed by the SA schedule.
  std::vector<std::vector<int64_t>> fp_widths() const {
    const int64_t c = feature_dim;
    return {{2 * c, 2 * c}, {2 * c, 2 * c}, {c, c}};
  }
};

// Centers chosen by farthest-point sampling, neighborhoods by ball query;
// each group runs [relative coords | point features] through a shared MLP
// and keeps the channelwise max.
inline PointCloud sa_layer(Tape& tape, ParamStore& ps, const std::string& prefix, const PointCloud& in, int64_t out_count,
                           const SaSpec& spec) {
  if (out_count > in.size()) throw std::invalid_argument(prefix + ": out_count exceeds input size");
  const std::vector<int64_t> center_idx = farthest_point_sample(in.coords, out_count);
  Tensor centers(Shape{out_count, 3});
  for (int64_t s = 0; s < out_count; ++s)
    for (int64_t d = 0; d < 3; ++d)
      centers.data[static_cast<size_t>(s * 3 + d)] = in.coords.data[static_cast<size_t>(center_idx[static_cast<size_t>(s)] * 3 + d)];

  const auto groups = ball_query(centers, in.coords, spec.radius, spec.max_samples);
  const int64_t ns = spec.max_samples;
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(out_count * ns));
  for (const auto& g : groups) flat.insert(flat.end(), g.begin(), g.end());

  Tensor rel(Shape{out_count * ns, 3});
  for (int64_t s = 0; s < out_count; ++s)
    for (int64_t k = 0; k < ns; ++k)
      for (int64_t d = 0; d < 3; ++d)
        rel.data[static_cast<size_t>((s * ns + k) * 3 + d)] =
            in.coords.data[static_cast<size_t>(flat[static_cast<size_t>(s * ns + k)] * 3 + d)] -
            centers.data[static_cast<size_t>(s * 3 + d)];

  Tensor group_in;
  if (in.has_feats()) {
    Tensor gathered = take_rows(tape, in.feats, flat);
    group_in = concat_cols(tape, {&rel, &gathered});
  } else {
    group_in = rel;
  }
  Tensor h = mlp_apply(tape, ps, prefix, group_in, static_cast<int>(spec.widths.size()));
  const int64_t cout = spec.widths.back();
  Tensor pooled = reduce_max(tape, reshape(tape, h, Shape{out_count, ns, cout}), 1);
  return PointCloud(std::move(centers), std::move(pooled));
}

// Features carried from the sparse level to the dense coordinates by
// inverse-squared-distance interpolation over the 3 nearest sparse points
// (exact hits clamped at 1e-10), skip-concatenated with the dense level's
// own features, then a shared MLP.
inline PointCloud fp_layer(Tape& tape, ParamStore& ps, const std::string& prefix, const PointCloud& sparse,
                           const PointCloud& dense, int num_layers) {
  if (sparse.size() < 1) throw std::invalid_argument(prefix + ": empty sparse level");
  constexpr int64_t kNeighbors = 3;
  const auto nn = knn_rows(dense.coords, sparse.coords, kNeighbors);
  const int64_t nd = dense.size();
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(nd * kNeighbors));
  Tensor weights(Shape{nd * kNeighbors});
  for (int64_t j = 0; j < nd; ++j) {
    const auto pj = dense.point(j);
    double wsum = 0.0;
    double w[kNeighbors];
    for (int64_t k = 0; k < kNeighbors; ++k) {
      const int64_t i = nn[static_cast<size_t>(j)][static_cast<size_t>(k)];
      flat.push_back(i);
      const auto pi = sparse.point(i);
      const double dx = pj[0] - pi[0], dy = pj[1] - pi[1], dz = pj[2] - pi[2];
      const double d = std::max(std::sqrt(dx * dx + dy * dy + dz * dz), 1e-10);
      w[k] = 1.0 / (d * d);
      wsum += w[k];
    }
    for (int64_t k = 0; k < kNeighbors; ++k) weights.data[static_cast<size_t>(j * kNeighbors + k)] = w[k] / wsum;
  }
  Tensor gathered = take_rows(tape, sparse.feats, flat);
  Tensor weighted = scale_rows(tape, gathered, weights);
  const int64_t cs = sparse.feats.dim(1);
  Tensor interp = reduce_sum(tape, reshape(tape, weighted, Shape{nd, kNeighbors, cs}), 1);
  Tensor fused = dense.has_feats() ? concat_cols(tape, {&interp, &dense.feats}) : interp;
  Tensor h = mlp_apply(tape, ps, prefix, fused, num_layers);
  return PointCloud(dense.coords, std::move(h));
}

inline void backbone_init(ParamStore& ps, const BackboneConfig& cfg, Rng& rng) {
  const auto sa = cfg.sa_specs();
  const int64_t c = cfg.feature_dim;
  mlp_init(ps, "backbone.sa1", 3, sa[0].widths, rng);
  mlp_init(ps, "backbone.sa2", 3 + c, sa[1].widths, rng);
  mlp_init(ps, "backbone.sa3", 3 + 2 * c, sa[2].widths, rng);
  const auto fp = cfg.fp_widths();
  mlp_init(ps, "backbone.fp1", 2 * c + 2 * c, fp[0], rng);  // interp from level 3 + skip level 2
  mlp_init(ps, "backbone.fp2", 2 * c + c, fp[1], rng);      // interp from level 2 + skip level 1
  mlp_init(ps, "backbone.fp3", 2 * c + c, fp[2], rng);      // self-refinement at level 1
}

// Siamese encoder: three set-abstraction levels halving the point count,
// then three feature-propagation levels back up to the first level's
// resolution (the last one refines in place). Output: input/2 points x C.
inline PointCloud encode(Tape& tape, ParamStore& ps, const PointCloud& cloud, const BackboneConfig& cfg) {
  const int64_t n = cloud.size();
  if (n < 8) throw std::invalid_argument("encode: need at least 8 points, got " + std::to_string(n));
  const auto sa = cfg.sa_specs();
  PointCloud l1 = sa_layer(tape, ps, "backbone.sa1", cloud, n / 2, sa[0]);
  PointCloud l2 = sa_layer(tape, ps, "backbone.sa2", l1, n / 4, sa[1]);
  PointCloud l3 = sa_layer(tape, ps, "backbone.sa3", l2, n / 8, sa[2]);
  const auto fp = cfg.fp_widths();
  PointCloud u2 = fp_layer(tape, ps, "backbone.fp1", l3, l2, static_cast<int>(fp[0].size()));
  PointCloud u1 = fp_layer(tape, ps, "backbone.fp2", u2, l1, static_cast<int>(fp[1].size()));
  PointCloud refined(u1.coords, u1.feats);
  return fp_layer(tape, ps, "backbone.fp3", refined, l1, static_cast<int>(fp[2].size()));
}

}  // namespace vox2bev
