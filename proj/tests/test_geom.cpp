#include "vox2bev/geom.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "vox2bev/rng.hpp"

using namespace vox2bev;

namespace {

Tensor random_coords(Rng& rng, int64_t n, double lo = -3.0, double hi = 3.0) {
  Tensor t(Shape{n, 3});
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Independent greedy max-min reference: recomputes min-distance-to-selected
// from scratch each round instead of maintaining a running array.
std::vector<int64_t> fps_reference(const Tensor& coords, int64_t k) {
  const int64_t n = coords.dim(0);
  std::vector<int64_t> sel{0};
  while (static_cast<int64_t>(sel.size()) < k) {
    int64_t best_i = -1;
    double best_d = -1.0;
    for (int64_t i = 0; i < n; ++i) {
      double dmin = std::numeric_limits<double>::infinity();
      for (int64_t s : sel) {
        double d2 = 0;
        for (int64_t c = 0; c < 3; ++c) {
          const double diff = coords.data[static_cast<size_t>(3 * i + c)] - coords.data[static_cast<size_t>(3 * s + c)];
          d2 += diff * diff;
        }
        dmin = std::min(dmin, d2);
      }
      if (dmin > best_d) {
        best_d = dmin;
        best_i = i;
      }
    }
    sel.push_back(best_i);
  }
  return sel;
}

// Monte-Carlo IoU over the joint axis-aligned bounding volume.
double iou_monte_carlo(const Box3D& a, const Box3D& b, int64_t samples, Rng& rng) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300, zmin = 1e300, zmax = -1e300;
  for (const Box3D* box : {&a, &b}) {
    for (const auto& c : box->bev_corners()) {
      xmin = std::min(xmin, c[0]);
      xmax = std::max(xmax, c[0]);
      ymin = std::min(ymin, c[1]);
      ymax = std::max(ymax, c[1]);
    }
    zmin = std::min(zmin, box->cz - box->h / 2);
    zmax = std::max(zmax, box->cz + box->h / 2);
  }
  int64_t in_both = 0;
  for (int64_t i = 0; i < samples; ++i) {
    const std::array<double, 3> p{rng.uniform(xmin, xmax), rng.uniform(ymin, ymax), rng.uniform(zmin, zmax)};
    if (a.contains(p) && b.contains(p)) ++in_both;
  }
  const double vol = (xmax - xmin) * (ymax - ymin) * (zmax - zmin);
  const double inter = vol * static_cast<double>(in_both) / static_cast<double>(samples);
  const double uni = a.volume() + b.volume() - inter;
  return inter / uni;
}

}  // namespace

// ---------------------------------------------------------------------------
// Yaw normalization and boxes
// ---------------------------------------------------------------------------

TEST(Yaw, NormalizeRangeAndIdentity) {
  EXPECT_DOUBLE_EQ(normalize_yaw(0.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(M_PI), M_PI);
  EXPECT_DOUBLE_EQ(normalize_yaw(-M_PI), M_PI);
  EXPECT_NEAR(normalize_yaw(3 * M_PI), M_PI, 1e-12);
  EXPECT_NEAR(normalize_yaw(2 * M_PI), 0.0, 1e-12);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double t = rng.uniform(-20.0, 20.0);
    const double n = normalize_yaw(t);
    EXPECT_GT(n, -M_PI);
    EXPECT_LE(n, M_PI);
    EXPECT_NEAR(std::cos(n), std::cos(t), 1e-12);
    EXPECT_NEAR(std::sin(n), std::sin(t), 1e-12);
  }
}

TEST(Box, ConstructorValidatesAndNormalizes) {
  EXPECT_THROW(Box3D(0, 0, 0, -1, 1, 1, 0), std::invalid_argument);
  EXPECT_THROW(Box3D(0, 0, 0, 1, 0, 1, 0), std::invalid_argument);
  Box3D b(1, 2, 3, 4, 2, 1, 2 * M_PI + 0.25);
  EXPECT_NEAR(b.yaw, 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(b.volume(), 8.0);
}

TEST(Box, CanonicalRoundTrip) {
  Rng rng(2);
  Box3D b(0.4, -1.2, 0.7, 3.0, 1.4, 1.1, 0.9);
  for (int i = 0; i < 100; ++i) {
    const std::array<double, 3> p{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    const auto q = b.from_canonical(b.to_canonical(p));
    EXPECT_NEAR(q[0], p[0], 1e-12);
    EXPECT_NEAR(q[1], p[1], 1e-12);
    EXPECT_NEAR(q[2], p[2], 1e-12);
  }
}

TEST(Box, ContainsIsClosed) {
  Box3D b(0, 0, 0, 2, 2, 2, 0);
  EXPECT_TRUE(b.contains({1.0, 1.0, 1.0}));   // corner
  EXPECT_TRUE(b.contains({1.0, 0.0, 0.0}));   // face
  EXPECT_FALSE(b.contains({1.0 + 1e-9, 0.0, 0.0}));
  EXPECT_TRUE(b.contains_bev(1.0, 1.0));
  EXPECT_FALSE(b.contains_bev(1.0 + 1e-9, 0.0));
}

TEST(Box, BevCornersCcwAtZeroYaw) {
  Box3D b(1, 2, 0, 4, 2, 1, 0);
  const auto c = b.bev_corners();
  EXPECT_DOUBLE_EQ(c[0][0], 3);
  EXPECT_DOUBLE_EQ(c[0][1], 3);
  EXPECT_DOUBLE_EQ(c[1][0], -1);
  EXPECT_DOUBLE_EQ(c[1][1], 3);
  EXPECT_DOUBLE_EQ(c[2][0], -1);
  EXPECT_DOUBLE_EQ(c[2][1], 1);
  EXPECT_DOUBLE_EQ(c[3][0], 3);
  EXPECT_DOUBLE_EQ(c[3][1], 1);
  double area2 = 0;  // shoelace, positive for counter-clockwise
  for (int i = 0; i < 4; ++i) {
    const auto& u = c[static_cast<size_t>(i)];
    const auto& v = c[static_cast<size_t>((i + 1) % 4)];
    area2 += u[0] * v[1] - v[0] * u[1];
  }
  EXPECT_DOUBLE_EQ(area2, 16.0);
}

// ---------------------------------------------------------------------------
// Farthest point sampling
// ---------------------------------------------------------------------------

TEST(Fps, MatchesGreedyReference) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = 8 + static_cast<int64_t>(rng.uniform_index(56));
    const int64_t k = 1 + static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n)));
    Tensor coords = random_coords(rng, n);
    EXPECT_EQ(farthest_point_sample(coords, k), fps_reference(coords, k)) << "trial " << trial;
  }
}

TEST(Fps, StartsAtZeroDistinctAndValidates) {
  Rng rng(4);
  Tensor coords = random_coords(rng, 32);
  auto sel = farthest_point_sample(coords, 16);
  EXPECT_EQ(sel[0], 0);
  std::set<int64_t> uniq(sel.begin(), sel.end());
  EXPECT_EQ(uniq.size(), 16u);
  auto all = farthest_point_sample(coords, 32);
  std::set<int64_t> all_set(all.begin(), all.end());
  EXPECT_EQ(all_set.size(), 32u);
  EXPECT_THROW(farthest_point_sample(coords, 33), std::invalid_argument);
  EXPECT_THROW(farthest_point_sample(Tensor(Shape{0, 3}), 1), std::invalid_argument);
}

TEST(Fps, TieKeepsSmallestIndex) {
  // Points 1 and 2 are both at distance 1 from point 0.
  Tensor coords(Shape{3, 3}, std::vector<double>{0, 0, 0, 1, 0, 0, -1, 0, 0});
  EXPECT_EQ(farthest_point_sample(coords, 2), (std::vector<int64_t>{0, 1}));
}

// ---------------------------------------------------------------------------
// Ball query and kNN
// ---------------------------------------------------------------------------

TEST(BallQuery, AscendingTruncatePadAndFallback) {
  Tensor cloud(Shape{5, 3}, std::vector<double>{0, 0, 0, 0.1, 0, 0, 0.2, 0, 0, 5, 0, 0, 5.1, 0, 0});
  Tensor centers(Shape{2, 3}, std::vector<double>{0, 0, 0, 10, 0, 0});
  auto groups = ball_query(centers, cloud, 0.25, 2);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0], (std::vector<int64_t>{0, 1}));  // ascending, truncated at max_samples
  EXPECT_EQ(groups[1], (std::vector<int64_t>{4, 4}));  // empty ball -> globally nearest, padded

  auto wide = ball_query(centers, cloud, 0.25, 4);
  EXPECT_EQ(wide[0], (std::vector<int64_t>{0, 1, 2, 0}));  // pad repeats first member

  EXPECT_THROW(ball_query(centers, cloud, 0.0, 2), std::invalid_argument);
  EXPECT_THROW(ball_query(centers, Tensor(Shape{0, 3}), 1.0, 2), std::invalid_argument);
}

TEST(Knn, OrderingTiesAndSelfExclusion) {
  Tensor ref(Shape{4, 2}, std::vector<double>{0, 0, 1, 0, -1, 0, 3, 0});
  Tensor query(Shape{1, 2}, std::vector<double>{0, 0});
  auto nn = knn_rows(query, ref, 3);
  EXPECT_EQ(nn[0], (std::vector<int64_t>{0, 1, 2}));  // tie between 1 and 2 keeps index 1 first

  auto self = knn_rows(ref, ref, 2, /*exclude_self=*/true);
  EXPECT_EQ(self[0], (std::vector<int64_t>{1, 2}));
  EXPECT_EQ(self[3], (std::vector<int64_t>{1, 0}));

  auto padded = knn_rows(query, Tensor(Shape{1, 2}, std::vector<double>{2, 2}), 3);
  EXPECT_EQ(padded[0], (std::vector<int64_t>{0, 0, 0}));  // short list repeats nearest
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

TEST(Resample, SubsetWhenEnoughPoints) {
  Rng rng(5);
  Tensor coords(Shape{10, 3});
  for (int64_t i = 0; i < 10; ++i) coords.data[static_cast<size_t>(3 * i)] = static_cast<double>(i);  // distinct x ids
  PointCloud cloud(coords);
  PointCloud out = resample(cloud, 6, rng);
  ASSERT_EQ(out.size(), 6);
  std::set<double> seen;
  for (int64_t i = 0; i < 6; ++i) {
    const double id = out.point(i)[0];
    EXPECT_TRUE(id >= 0 && id <= 9 && id == std::floor(id));
    EXPECT_TRUE(seen.insert(id).second) << "duplicate row in subset mode";
  }
}

TEST(Resample, ExactSizeIsPermutation) {
  Rng rng(6);
  Tensor coords(Shape{7, 3});
  for (int64_t i = 0; i < 7; ++i) coords.data[static_cast<size_t>(3 * i)] = static_cast<double>(i);
  PointCloud out = resample(PointCloud(coords), 7, rng);
  std::multiset<double> ids;
  for (int64_t i = 0; i < 7; ++i) ids.insert(out.point(i)[0]);
  EXPECT_EQ(ids, (std::multiset<double>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(Resample, UpsamplingKeepsAllPlusDuplicates) {
  Rng rng(7);
  Tensor coords(Shape{3, 3});
  for (int64_t i = 0; i < 3; ++i) coords.data[static_cast<size_t>(3 * i)] = static_cast<double>(i);
  Tensor feats(Shape{3, 2});
  for (int64_t i = 0; i < 3; ++i) feats.data[static_cast<size_t>(2 * i)] = 10.0 + static_cast<double>(i);
  PointCloud out = resample(PointCloud(coords, feats), 9, rng);
  ASSERT_EQ(out.size(), 9);
  ASSERT_TRUE(out.has_feats());
  std::multiset<double> ids;
  for (int64_t i = 0; i < 9; ++i) {
    const double id = out.point(i)[0];
    ids.insert(id);
    EXPECT_TRUE(id == 0 || id == 1 || id == 2);
    EXPECT_DOUBLE_EQ(out.feats.data[static_cast<size_t>(2 * i)], 10.0 + id);  // features travel with points
  }
  EXPECT_GE(ids.count(0), 1u);
  EXPECT_GE(ids.count(1), 1u);
  EXPECT_GE(ids.count(2), 1u);
  // first three rows are the originals in order
  EXPECT_DOUBLE_EQ(out.point(0)[0], 0);
  EXPECT_DOUBLE_EQ(out.point(1)[0], 1);
  EXPECT_DOUBLE_EQ(out.point(2)[0], 2);
}

TEST(Resample, DeterministicUnderSeed) {
  Rng gen(8);
  Tensor coords = random_coords(gen, 20);
  Rng r1(42), r2(42);
  PointCloud a = resample(PointCloud(coords), 12, r1);
  PointCloud b = resample(PointCloud(coords), 12, r2);
  EXPECT_EQ(a.coords.data, b.coords.data);
  EXPECT_THROW(resample(PointCloud(Tensor(Shape{0, 3})), 4, r1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

TEST(Crop, CanonicalRoundTripAndCount) {
  Rng rng(9);
  Box3D box(1.0, -0.5, 0.3, 2.0, 1.2, 1.0, 0.6);
  Tensor coords = random_coords(rng, 400, -3, 3);
  PointCloud cloud(coords);
  int64_t expect_count = 0;
  for (int64_t i = 0; i < cloud.size(); ++i)
    if (box.contains(cloud.point(i))) ++expect_count;
  auto [cropped, n] = crop_and_center(cloud, box);
  EXPECT_EQ(n, expect_count);
  EXPECT_EQ(cropped.size(), expect_count);
  // every cropped point, mapped back to world, is an original in-box point
  std::multiset<double> orig_x;
  for (int64_t i = 0; i < cloud.size(); ++i)
    if (box.contains(cloud.point(i))) orig_x.insert(cloud.point(i)[0]);
  for (int64_t i = 0; i < cropped.size(); ++i) {
    const auto p = cropped.point(i);
    EXPECT_LE(std::fabs(p[0]), box.l / 2 + 1e-12);
    EXPECT_LE(std::fabs(p[1]), box.w / 2 + 1e-12);
    EXPECT_LE(std::fabs(p[2]), box.h / 2 + 1e-12);
    const auto world = box.from_canonical(p);
    bool found = false;
    for (double x : orig_x)
      if (std::fabs(x - world[0]) <= 1e-12) found = true;
    EXPECT_TRUE(found);
  }
}

TEST(Crop, BoundaryPointKept) {
  Box3D box(0, 0, 0, 2, 2, 2, 0);
  Tensor coords(Shape{2, 3}, std::vector<double>{1.0, 0.0, 0.0, 1.0000001, 0.0, 0.0});
  auto [cropped, n] = crop_and_center(PointCloud(coords), box);
  EXPECT_EQ(n, 1);
  EXPECT_DOUBLE_EQ(cropped.point(0)[0], 1.0);
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

TEST(Iou, ExactPins) {
  Box3D unit(0, 0, 0, 1, 1, 1, 0);
  EXPECT_DOUBLE_EQ(iou3d(unit, unit), 1.0);
  Box3D far(10, 0, 0, 1, 1, 1, 0);
  EXPECT_DOUBLE_EQ(iou3d(unit, far), 0.0);
  Box3D above(0, 0, 5, 1, 1, 1, 0);  // overlapping footprint, disjoint height
  EXPECT_DOUBLE_EQ(iou3d(unit, above), 0.0);
  Box3D shifted(0.5, 0, 0, 1, 1, 1, 0);
  EXPECT_NEAR(iou3d(unit, shifted), 1.0 / 3.0, 1e-12);
  Box3D rot(0, 0, 0, 1, 1, 1, M_PI / 2);  // square is rotation-symmetric
  EXPECT_NEAR(iou3d(unit, rot), 1.0, 1e-9);
}

TEST(Iou, NestedAndHalfHeight) {
  Box3D outer(0, 0, 0, 4, 4, 4, 0);
  Box3D inner(0.3, -0.2, 0.1, 1, 1, 1, 0.7);
  EXPECT_NEAR(iou3d(outer, inner), 1.0 / 64.0, 1e-12);
  Box3D tall(0, 0, 0, 1, 1, 2, 0);
  Box3D half(0, 0, 1, 1, 1, 2, 0);  // overlap height 1 -> inter 1, union 3
  EXPECT_NEAR(iou3d(tall, half), 1.0 / 3.0, 1e-12);
}

TEST(Iou, SymmetricBoundedAndRigidInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    Box3D a(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3), rng.uniform(0.5, 3),
            rng.uniform(0.5, 3), rng.uniform(-3, 3));
    Box3D b(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3), rng.uniform(0.5, 3),
            rng.uniform(0.5, 3), rng.uniform(-3, 3));
    const double ab = iou3d(a, b);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_NEAR(ab, iou3d(b, a), 1e-12);
    // rigid motion applied to both boxes leaves IoU unchanged
    const double phi = rng.uniform(-M_PI, M_PI), tx = rng.uniform(-5, 5), ty = rng.uniform(-5, 5), tz = rng.uniform(-2, 2);
    auto moved = [&](const Box3D& x) {
      const double c = std::cos(phi), s = std::sin(phi);
      return Box3D(c * x.cx - s * x.cy + tx, s * x.cx + c * x.cy + ty, x.cz + tz, x.l, x.w, x.h, x.yaw + phi);
    };
    EXPECT_NEAR(iou3d(moved(a), moved(b)), ab, 1e-9) << "trial " << trial;
  }
}

TEST(Iou, MatchesMonteCarloOracle) {
  Rng rng(11);
  Rng mc(12);
  for (int trial = 0; trial < 5; ++trial) {
    Box3D a(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2), rng.uniform(0.8, 2.5),
            rng.uniform(0.8, 2.5), rng.uniform(0.8, 2.5), rng.uniform(-M_PI, M_PI));
    Box3D b(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2), rng.uniform(0.8, 2.5),
            rng.uniform(0.8, 2.5), rng.uniform(0.8, 2.5), rng.uniform(-M_PI, M_PI));
    const double exact = iou3d(a, b);
    const double approx = iou_monte_carlo(a, b, 100000, mc);
    EXPECT_NEAR(exact, approx, 0.01) << "trial " << trial;
  }
}

TEST(Iou, CenterDistance) {
  Box3D a(0, 0, 0, 1, 1, 1, 0.3);
  Box3D b(3, 4, 0, 2, 2, 2, -0.7);
  EXPECT_DOUBLE_EQ(center_distance(a, b), 5.0);
}
