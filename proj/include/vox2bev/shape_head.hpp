#pragma once

#include <string>
#include <vector>

#include "vox2bev/dataset.hpp"
#include "vox2bev/geom.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

struct ShapeConfig {
  int64_t points = 2048;  // generated / dense-GT point count
  int64_t edge_k = 8;     // feature-space neighbors in the EdgeConv
};

inline void shape_init(ParamStore& ps, int64_t c, int64_t m, const ShapeConfig& cfg, Rng& rng) {
  if (cfg.points % m != 0)
    throw std::invalid_argument("shape_init: generated count " + std::to_string(cfg.points) + " not divisible by " +
                                std::to_string(m));
  const int64_t r = cfg.points / m;
  ps.create_he("shape.gate.w", Shape{1, c}, rng);
  ps.create_zeros("shape.gate.b", Shape{1});
  for (int64_t k = 0; k < r; ++k) mlp_init(ps, "shape.expand" + std::to_string(k), c, {c, c}, rng);
  mlp_init(ps, "shape.glob", c, {c, c}, rng);
  mlp_init(ps, "shape.edge", 2 * c, {c}, rng);
  mlp_init(ps, "shape.out", 2 * c, {c, 3}, rng);
}

// Per-point scalar gate g_j = sigmoid(F_j . W^T + b), broadcast over channels.
inline Tensor gate(Tape& tape, ParamStore& ps, const Tensor& f) {
  Tensor logits = add_channels(tape, matmul_nt(tape, f, ps.at("shape.gate.w")), ps.at("shape.gate.b"));
  Tensor g = sigmoid(tape, logits);
  return scale_rows(tape, f, g);
}

// Dense shape generation: the M gated features expand to points*C through
// r independent MLP branches stacked along the point axis; a max-pooled
// global descriptor (two FC layers) is broadcast back and concatenated with
// one EdgeConv pass (k nearest neighbors in feature space, self excluded,
// edge feature [h_j, h_n - h_j]); a final two-layer MLP emits coordinates.
inline Tensor generate_shape(Tape& tape, ParamStore& ps, const Tensor& f_gated, const ShapeConfig& cfg) {
  if (f_gated.rank() != 2) throw std::invalid_argument("generate_shape: expected [M,C] features");
  const int64_t m = f_gated.dim(0), c = f_gated.dim(1);
  if (cfg.points % m != 0) throw std::invalid_argument("generate_shape: point count not divisible by feature count");
  const int64_t r = cfg.points / m;

  std::vector<Tensor> branches;
  branches.reserve(static_cast<size_t>(r));
  for (int64_t k = 0; k < r; ++k) branches.push_back(mlp_apply(tape, ps, "shape.expand" + std::to_string(k), f_gated, 2));
  std::vector<const Tensor*> branch_ptrs;
  for (const Tensor& b : branches) branch_ptrs.push_back(&b);
  Tensor h = concat(tape, 0, branch_ptrs);  // [points, C]

  Tensor gmax = reshape(tape, reduce_max(tape, h, 0), Shape{1, c});
  Tensor gdesc = mlp_apply(tape, ps, "shape.glob", gmax, 2);
  Tensor gbroad = tile_rows(tape, gdesc, cfg.points);

  const auto nn = knn_rows(h, h, cfg.edge_k, /*exclude_self=*/true);
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(cfg.points * cfg.edge_k));
  for (const auto& g : nn) flat.insert(flat.end(), g.begin(), g.end());
  Tensor h_center = repeat_interleave_rows(tape, h, cfg.edge_k);
  Tensor h_nbr = take_rows(tape, h, flat);
  Tensor diff = sub(tape, h_nbr, h_center);
  Tensor edge_in = concat_cols(tape, {&h_center, &diff});
  Tensor edge = mlp_apply(tape, ps, "shape.edge", edge_in, 1);
  Tensor local = reduce_max(tape, reshape(tape, edge, Shape{cfg.points, cfg.edge_k, c}), 1);

  Tensor cat = concat_cols(tape, {&gbroad, &local});
  return mlp_apply(tape, ps, "shape.out", cat, 2, /*relu_last=*/false);  // [points, 3]
}

// Bidirectional sum of squared nearest-neighbor distances between two point
// sets (each term a sum, not a mean). Ties pick the smallest index; the
// backward pass routes each term's gradient through its chosen neighbor.
inline Tensor chamfer(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 3 || b.rank() != 2 || b.dim(1) != 3)
    throw std::invalid_argument("chamfer: expected [n,3] point sets");
  const int64_t n = a.dim(0), m = b.dim(0);
  if (n < 1 || m < 1) throw std::invalid_argument("chamfer: empty point set");

  auto nearest = [](const std::vector<double>& from, int64_t i, const std::vector<double>& to, int64_t count) {
    int64_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    const double x = from[static_cast<size_t>(3 * i)], y = from[static_cast<size_t>(3 * i + 1)], z = from[static_cast<size_t>(3 * i + 2)];
    for (int64_t j = 0; j < count; ++j) {
      const double dx = to[static_cast<size_t>(3 * j)] - x;
      const double dy = to[static_cast<size_t>(3 * j + 1)] - y;
      const double dz = to[static_cast<size_t>(3 * j + 2)] - z;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    return std::make_pair(best, best_d2);
  };

  std::vector<int64_t> nn_ab(static_cast<size_t>(n)), nn_ba(static_cast<size_t>(m));
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const auto [j, d2] = nearest(a.data, i, b.data, m);
    nn_ab[static_cast<size_t>(i)] = j;
    loss += d2;
  }
  for (int64_t j = 0; j < m; ++j) {
    const auto [i, d2] = nearest(b.data, j, a.data, n);
    nn_ba[static_cast<size_t>(j)] = i;
    loss += d2;
  }
  Tensor out = Tensor::scalar(loss);

  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb, av = a.data, bv = b.data, nn_ab, nn_ba, n, m](const Tensor& g, Tape& t) {
      const double gv = g.value();
      Tensor ga(Shape{n, 3});
      Tensor gb(Shape{m, 3});
      for (int64_t i = 0; i < n; ++i) {
        const int64_t j = nn_ab[static_cast<size_t>(i)];
        for (int64_t d = 0; d < 3; ++d) {
          const double diff = av[static_cast<size_t>(3 * i + d)] - bv[static_cast<size_t>(3 * j + d)];
          ga.data[static_cast<size_t>(3 * i + d)] += 2.0 * gv * diff;
          gb.data[static_cast<size_t>(3 * j + d)] -= 2.0 * gv * diff;
        }
      }
      for (int64_t j = 0; j < m; ++j) {
        const int64_t i = nn_ba[static_cast<size_t>(j)];
        for (int64_t d = 0; d < 3; ++d) {
          const double diff = bv[static_cast<size_t>(3 * j + d)] - av[static_cast<size_t>(3 * i + d)];
          gb.data[static_cast<size_t>(3 * j + d)] += 2.0 * gv * diff;
          ga.data[static_cast<size_t>(3 * i + d)] -= 2.0 * gv * diff;
        }
      }
      if (na >= 0) t.accumulate(na, ga);
      if (nb >= 0) t.accumulate(nb, gb);
    });
    out.requires_grad = true;
  }
  return out;
}

// Dense ground-truth shape for a tracked instance: all frames' in-box points
// in the box's canonical frame, concatenated and resampled to a fixed count.
inline Tensor dense_gt(const Sequence& seq, int64_t points, Rng& rng) {
  std::vector<std::array<double, 3>> all;
  for (const auto& fr : seq.frames) {
    const auto [cropped, count] = crop_and_center(fr.cloud, fr.box);
    for (int64_t i = 0; i < count; ++i) all.push_back(cropped.point(i));
  }
  if (all.empty()) throw std::runtime_error("dense_gt: no in-box points in any frame of sequence " + seq.id);
  Tensor coords(Shape{static_cast<int64_t>(all.size()), 3});
  for (size_t i = 0; i < all.size(); ++i)
    for (size_t d = 0; d < 3; ++d) coords.data[i * 3 + d] = all[i][d];
  return resample(PointCloud(std::move(coords)), points, rng).coords;
}

}  // namespace vox2bev
