#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "vox2bev/rng.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

inline double normalize_yaw(double t) {
  t = std::fmod(t, 2.0 * M_PI);
  if (t <= -M_PI) t += 2.0 * M_PI;
  if (t > M_PI) t -= 2.0 * M_PI;
  return t;
}

// Points (and optional per-point features) with row i of `feats` describing
// row i of `coords`.
struct PointCloud {
  Tensor coords;  // [K,3]
  Tensor feats;   // [K,C] or empty

  PointCloud() = default;
  explicit PointCloud(Tensor c) : coords(std::move(c)) { check(); }
  PointCloud(Tensor c, Tensor f) : coords(std::move(c)), feats(std::move(f)) { check(); }

  int64_t size() const { return coords.empty() ? 0 : coords.dim(0); }
  bool has_feats() const { return !feats.empty(); }

  std::array<double, 3> point(int64_t i) const {
    return {coords.data[static_cast<size_t>(3 * i)], coords.data[static_cast<size_t>(3 * i + 1)],
            coords.data[static_cast<size_t>(3 * i + 2)]};
  }

 private:
  void check() const {
    if (!coords.empty() && (coords.rank() != 2 || coords.dim(1) != 3))
      throw std::invalid_argument("PointCloud: coords must be [K,3], got " + shape_str(coords.shape));
    if (!feats.empty() && (feats.rank() != 2 || feats.dim(0) != coords.dim(0)))
      throw std::invalid_argument("PointCloud: features not row-aligned with coords");
  }
};

// Oriented box: center, size (length along local x, width along local y,
// height along z), yaw about the vertical axis.
struct Box3D {
  double cx = 0, cy = 0, cz = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;

  Box3D() = default;
  Box3D(double cx_, double cy_, double cz_, double l_, double w_, double h_, double yaw_)
      : cx(cx_), cy(cy_), cz(cz_), l(l_), w(w_), h(h_), yaw(normalize_yaw(yaw_)) {
    if (l <= 0 || w <= 0 || h <= 0) throw std::invalid_argument("Box3D: sizes must be positive");
  }

  double volume() const { return l * w * h; }

  // World -> box frame (translate by -center, rotate by -yaw).
  std::array<double, 3> to_canonical(const std::array<double, 3>& p) const {
    const double dx = p[0] - cx, dy = p[1] - cy, dz = p[2] - cz;
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * dx + s * dy, -s * dx + c * dy, dz};
  }

  // Box frame -> world.
  std::array<double, 3> from_canonical(const std::array<double, 3>& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {cx + c * p[0] - s * p[1], cy + s * p[0] + c * p[1], cz + p[2]};
  }

  // Closed-region membership test.
  bool contains(const std::array<double, 3>& p) const {
    const auto q = to_canonical(p);
    return std::fabs(q[0]) <= l / 2 && std::fabs(q[1]) <= w / 2 && std::fabs(q[2]) <= h / 2;
  }

  bool contains_bev(double x, double y) const {
    const auto q = to_canonical({x, y, cz});
    return std::fabs(q[0]) <= l / 2 && std::fabs(q[1]) <= w / 2;
  }

  // Ground-plane corners, counter-clockwise for yaw 0.
  std::array<std::array<double, 2>, 4> bev_corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hx = l / 2, hy = w / 2;
    std::array<std::array<double, 2>, 4> out{};
    const double lx[4] = {hx, -hx, -hx, hx};
    const double ly[4] = {hy, hy, -hy, -hy};
    for (int i = 0; i < 4; ++i) out[static_cast<size_t>(i)] = {cx + c * lx[i] - s * ly[i], cy + s * lx[i] + c * ly[i]};
    return out;
  }
};

// ---------------------------------------------------------------------------
// Sampling and grouping
// ---------------------------------------------------------------------------

// Greedy max-min selection starting from index 0; distance ties keep the
// smallest candidate index.
inline std::vector<int64_t> farthest_point_sample(const Tensor& coords, int64_t k) {
  if (coords.rank() != 2 || coords.dim(1) != 3) throw std::invalid_argument("farthest_point_sample: coords must be [K,3]");
  const int64_t n = coords.dim(0);
  if (n < 1) throw std::invalid_argument("farthest_point_sample: empty cloud");
  if (k > n) throw std::invalid_argument("farthest_point_sample: k exceeds cloud size");
  std::vector<int64_t> picked;
  picked.reserve(static_cast<size_t>(k));
  std::vector<double> min_d2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  int64_t cur = 0;
  for (int64_t step = 0; step < k; ++step) {
    picked.push_back(cur);
    const double px = coords.data[static_cast<size_t>(3 * cur)];
    const double py = coords.data[static_cast<size_t>(3 * cur + 1)];
    const double pz = coords.data[static_cast<size_t>(3 * cur + 2)];
    int64_t next = -1;
    double best = -1.0;
    for (int64_t i = 0; i < n; ++i) {
      const double dx = coords.data[static_cast<size_t>(3 * i)] - px;
      const double dy = coords.data[static_cast<size_t>(3 * i + 1)] - py;
      const double dz = coords.data[static_cast<size_t>(3 * i + 2)] - pz;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < min_d2[static_cast<size_t>(i)]) min_d2[static_cast<size_t>(i)] = d2;
      if (min_d2[static_cast<size_t>(i)] > best) {
        best = min_d2[static_cast<size_t>(i)];
        next = i;
      }
    }
    cur = next;
  }
  return picked;
}

// Per center: up to max_samples in-radius indices in ascending order, padded
// by repeating the first found; centers with no in-radius point fall back to
// the globally nearest point.
inline std::vector<std::vector<int64_t>> ball_query(const Tensor& centers, const Tensor& cloud, double radius,
                                                    int64_t max_samples) {
  if (centers.rank() != 2 || centers.dim(1) != 3 || cloud.rank() != 2 || cloud.dim(1) != 3)
    throw std::invalid_argument("ball_query: inputs must be [*,3]");
  if (radius <= 0) throw std::invalid_argument("ball_query: radius must be positive");
  if (max_samples < 1) throw std::invalid_argument("ball_query: max_samples must be >= 1");
  const int64_t s = centers.dim(0), n = cloud.dim(0);
  if (n < 1) throw std::invalid_argument("ball_query: empty cloud");
  const double r2 = radius * radius;
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(s));
  for (int64_t c = 0; c < s; ++c) {
    const double px = centers.data[static_cast<size_t>(3 * c)];
    const double py = centers.data[static_cast<size_t>(3 * c + 1)];
    const double pz = centers.data[static_cast<size_t>(3 * c + 2)];
    auto& g = groups[static_cast<size_t>(c)];
    g.reserve(static_cast<size_t>(max_samples));
    int64_t nearest = 0;
    double nearest_d2 = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < n; ++i) {
      const double dx = cloud.data[static_cast<size_t>(3 * i)] - px;
      const double dy = cloud.data[static_cast<size_t>(3 * i + 1)] - py;
      const double dz = cloud.data[static_cast<size_t>(3 * i + 2)] - pz;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < nearest_d2) {
        nearest_d2 = d2;
        nearest = i;
      }
      if (d2 <= r2 && static_cast<int64_t>(g.size()) < max_samples) g.push_back(i);
    }
    if (g.empty()) g.push_back(nearest);
    while (static_cast<int64_t>(g.size()) < max_samples) g.push_back(g[0]);
  }
  return groups;
}

// k nearest rows of `ref` for each row of `query` by squared L2 over D-dim
// rows; ties keep the smaller index. With exclude_self, ref row j is skipped
// for query row j (the matrices must then be the same object conceptually).
// Short candidate lists are padded by repeating the nearest found.
inline std::vector<std::vector<int64_t>> knn_rows(const Tensor& query, const Tensor& ref, int64_t k,
                                                  bool exclude_self = false) {
  if (query.rank() != 2 || ref.rank() != 2 || query.dim(1) != ref.dim(1))
    throw std::invalid_argument("knn_rows: incompatible shapes");
  const int64_t nq = query.dim(0), nr = ref.dim(0), d = query.dim(1);
  if (nr < 1) throw std::invalid_argument("knn_rows: empty reference");
  std::vector<std::vector<int64_t>> out(static_cast<size_t>(nq));
  std::vector<std::pair<double, int64_t>> cand;
  for (int64_t q = 0; q < nq; ++q) {
    cand.clear();
    for (int64_t r = 0; r < nr; ++r) {
      if (exclude_self && r == q) continue;
      double d2 = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = query.data[static_cast<size_t>(q * d + j)] - ref.data[static_cast<size_t>(r * d + j)];
        d2 += diff * diff;
      }
      cand.emplace_back(d2, r);
    }
    if (cand.empty()) throw std::invalid_argument("knn_rows: no candidates (single row with exclude_self)");
    const size_t take = std::min<size_t>(static_cast<size_t>(k), cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
    auto& g = out[static_cast<size_t>(q)];
    for (size_t i = 0; i < take; ++i) g.push_back(cand[i].second);
    while (static_cast<int64_t>(g.size()) < k) g.push_back(g[0]);
  }
  return out;
}

// Exactly n points drawn from the input support: a uniform subset when the
// cloud is at least n (n = K gives a random permutation), otherwise all
// points plus uniformly chosen duplicates.
inline PointCloud resample(const PointCloud& cloud, int64_t n, Rng& rng) {
  const int64_t k = cloud.size();
  if (k < 1) throw std::invalid_argument("resample: empty cloud");
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(n));
  if (k >= n) {
    std::vector<int64_t> pool(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) pool[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(k - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
      idx.push_back(pool[static_cast<size_t>(i)]);
    }
  } else {
    for (int64_t i = 0; i < k; ++i) idx.push_back(i);
    for (int64_t i = k; i < n; ++i) idx.push_back(static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(k))));
  }
  Tensor coords(Shape{n, 3});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t d = 0; d < 3; ++d) coords.data[static_cast<size_t>(i * 3 + d)] = cloud.coords.data[static_cast<size_t>(idx[static_cast<size_t>(i)] * 3 + d)];
  if (!cloud.has_feats()) return PointCloud(std::move(coords));
  const int64_t c = cloud.feats.dim(1);
  Tensor feats(Shape{n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t d = 0; d < c; ++d) feats.data[static_cast<size_t>(i * c + d)] = cloud.feats.data[static_cast<size_t>(idx[static_cast<size_t>(i)] * c + d)];
  return PointCloud(std::move(coords), std::move(feats));
}

// Points inside the (closed) oriented box, expressed in its canonical frame.
inline std::pair<PointCloud, int64_t> crop_and_center(const PointCloud& cloud, const Box3D& box) {
  std::vector<int64_t> keep;
  std::vector<std::array<double, 3>> canon;
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const auto q = box.to_canonical(cloud.point(i));
    if (std::fabs(q[0]) <= box.l / 2 && std::fabs(q[1]) <= box.w / 2 && std::fabs(q[2]) <= box.h / 2) {
      keep.push_back(i);
      canon.push_back(q);
    }
  }
  const int64_t m = static_cast<int64_t>(keep.size());
  Tensor coords(Shape{m, 3});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t d = 0; d < 3; ++d) coords.data[static_cast<size_t>(i * 3 + d)] = canon[static_cast<size_t>(i)][static_cast<size_t>(d)];
  if (!cloud.has_feats()) return {PointCloud(std::move(coords)), m};
  const int64_t c = cloud.feats.dim(1);
  Tensor feats(Shape{m, c});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t d = 0; d < c; ++d) feats.data[static_cast<size_t>(i * c + d)] = cloud.feats.data[static_cast<size_t>(keep[static_cast<size_t>(i)] * c + d)];
  return {PointCloud(std::move(coords), std::move(feats)), m};
}

// ---------------------------------------------------------------------------
// Rotated-box IoU via convex polygon clipping in the ground plane
// ---------------------------------------------------------------------------

namespace detail {

using Poly = std::vector<std::array<double, 2>>;

inline double polygon_area(const Poly& p) {
  if (p.size() < 3) return 0.0;
  double a = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return std::fabs(a) / 2.0;
}

// Sutherland-Hodgman: clip `subject` against the half-plane left of edge
// (a -> b) of a counter-clockwise clip polygon.
inline Poly clip_edge(const Poly& subject, const std::array<double, 2>& a, const std::array<double, 2>& b) {
  Poly out;
  const double ex = b[0] - a[0], ey = b[1] - a[1];
  auto side = [&](const std::array<double, 2>& p) { return ex * (p[1] - a[1]) - ey * (p[0] - a[0]); };
  for (size_t i = 0; i < subject.size(); ++i) {
    const auto& cur = subject[i];
    const auto& prev = subject[(i + subject.size() - 1) % subject.size()];
    const double sc = side(cur), sp = side(prev);
    if (sc >= 0) {
      if (sp < 0) {
        const double t = sp / (sp - sc);
        out.push_back({prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])});
      }
      out.push_back(cur);
    } else if (sp >= 0) {
      const double t = sp / (sp - sc);
      out.push_back({prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])});
    }
  }
  return out;
}

inline double rect_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  Poly poly(ca.begin(), ca.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i) poly = clip_edge(poly, cb[static_cast<size_t>(i)], cb[static_cast<size_t>((i + 1) % 4)]);
  return polygon_area(poly);
}

}  // namespace detail

inline double iou3d(const Box3D& a, const Box3D& b) {
  // Equal boxes overlap themselves exactly; skip the clipping so the result
  // is 1 to the last bit rather than 1 minus polygon round-off.
  if (a.cx == b.cx && a.cy == b.cy && a.cz == b.cz && a.l == b.l && a.w == b.w && a.h == b.h && a.yaw == b.yaw &&
      a.volume() > 0.0)
    return 1.0;
  const double inter_area = detail::rect_intersection_area(a, b);
  const double z_lo = std::max(a.cz - a.h / 2, b.cz - b.h / 2);
  const double z_hi = std::min(a.cz + a.h / 2, b.cz + b.h / 2);
  const double inter_h = std::max(0.0, z_hi - z_lo);
  const double inter = inter_area * inter_h;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  return std::min(1.0, std::max(0.0, inter / uni));
}

inline double center_distance(const Box3D& a, const Box3D& b) {
  const double dx = a.cx - b.cx, dy = a.cy - b.cy, dz = a.cz - b.cz;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace vox2bev
