#include "vox2bev/shape_head.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "vox2bev/dataset.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/rng.hpp"
#include "vox2bev/tensor.hpp"

using namespace vox2bev;

namespace {

Tensor randt(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Independent Chamfer reference: same term order as the contract (all a-side
// sums first, then all b-side sums) so the result is bit-identical.
double chamfer_reference(const Tensor& a, const Tensor& b) {
  const int64_t n = a.dim(0), m = b.dim(0);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < m; ++j) {
      double d2 = 0;
      for (int64_t d = 0; d < 3; ++d) {
        const double diff = a.data[static_cast<size_t>(3 * i + d)] - b.data[static_cast<size_t>(3 * j + d)];
        d2 += diff * diff;
      }
      best = std::min(best, d2);
    }
    total += best;
  }
  for (int64_t j = 0; j < m; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < n; ++i) {
      double d2 = 0;
      for (int64_t d = 0; d < 3; ++d) {
        const double diff = b.data[static_cast<size_t>(3 * j + d)] - a.data[static_cast<size_t>(3 * i + d)];
        d2 += diff * diff;
      }
      best = std::min(best, d2);
    }
    total += best;
  }
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

TEST(Chamfer, MatchesReferenceBitExact) {
  Rng rng(1);
  Tape tape;
  for (int trial = 0; trial < 25; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform_index(12));
    const int64_t m = 1 + static_cast<int64_t>(rng.uniform_index(12));
    Tensor a = randt(rng, {n, 3}, -2, 2);
    Tensor b = randt(rng, {m, 3}, -2, 2);
    EXPECT_EQ(chamfer(tape, a, b).value(), chamfer_reference(a, b)) << "trial " << trial;
  }
}

TEST(Chamfer, KnownValues) {
  Tape tape;
  Tensor a(Shape{1, 3}, std::vector<double>{0, 0, 0});
  Tensor b(Shape{2, 3}, std::vector<double>{1, 0, 0, 2, 0, 0});
  EXPECT_DOUBLE_EQ(chamfer(tape, a, b).value(), 1.0 + 1.0 + 4.0);  // a->b: 1; b->a: 1 + 4
  Tensor p(Shape{1, 3}, std::vector<double>{0.3, -0.2, 0.7});
  Tensor q(Shape{1, 3}, std::vector<double>{0.3, -0.2, 1.2});
  EXPECT_NEAR(chamfer(tape, p, q).value(), 2 * 0.25, 1e-15);  // two points distance d: 2*d^2
  Tensor same(Shape{3, 3}, std::vector<double>{1, 2, 3, -1, 0, 1, 5, 5, 5});
  EXPECT_EQ(chamfer(tape, same, same).value(), 0.0);
  EXPECT_THROW(chamfer(tape, Tensor(Shape{0, 3}), b), std::invalid_argument);
}

TEST(Chamfer, SymmetricUpToRounding) {
  Rng rng(2);
  Tape tape;
  Tensor a = randt(rng, {6, 3});
  Tensor b = randt(rng, {9, 3});
  EXPECT_NEAR(chamfer(tape, a, b).value(), chamfer(tape, b, a).value(), 1e-12);
}

TEST(Chamfer, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  const Tensor a0 = randt(rng, {5, 3}, -1.5, 1.5);
  const Tensor b0 = randt(rng, {7, 3}, -1.5, 1.5);
  Tape tape;
  Tensor a = a0, b = b0;
  tape.watch(a);
  tape.watch(b);
  Tensor loss = chamfer(tape, a, b);
  Gradients g = tape.backward(loss);
  const double h = 1e-5, tol = 1e-4;
  for (int which = 0; which < 2; ++which) {
    const Tensor& base = which == 0 ? a0 : b0;
    for (int64_t e = 0; e < base.numel(); ++e) {
      auto eval = [&](double delta) {
        Tensor a2 = a0, b2 = b0;
        (which == 0 ? a2 : b2).data[static_cast<size_t>(e)] += delta;
        Tape t2;
        return chamfer(t2, a2, b2).value();
      };
      const double num = (eval(h) - eval(-h)) / (2 * h);
      const double ana = g.at(which == 0 ? a : b).data[static_cast<size_t>(e)];
      const double denom = std::max({1.0, std::fabs(num), std::fabs(ana)});
      EXPECT_NEAR(ana, num, tol * denom) << "set " << which << " elem " << e;
    }
  }
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

TEST(Gate, ZeroWeightsHalveFeatures) {
  ParamStore ps;
  ps.create("shape.gate.w", Shape{1, 3});
  ps.create("shape.gate.b", Shape{1});
  Rng rng(4);
  Tensor f = randt(rng, {5, 3});
  Tape tape;
  Tensor out = gate(tape, ps, f);
  ASSERT_EQ(out.shape, f.shape);
  for (size_t i = 0; i < f.data.size(); ++i) EXPECT_NEAR(out.data[i], 0.5 * f.data[i], 1e-15);
}

TEST(Gate, LargeBiasSaturatesToIdentity) {
  ParamStore ps;
  ps.create("shape.gate.w", Shape{1, 3});
  ps.create("shape.gate.b", Shape{1}) = Tensor(Shape{1}, std::vector<double>{50.0});
  Rng rng(5);
  Tensor f = randt(rng, {4, 3});
  Tape tape;
  Tensor out = gate(tape, ps, f);
  for (size_t i = 0; i < f.data.size(); ++i) EXPECT_NEAR(out.data[i], f.data[i], 1e-15);
}

TEST(Gate, PerRowScalarBroadcast) {
  // Gate must scale whole rows: within a row, the ratio out/in is constant.
  ParamStore ps;
  Rng rng(6);
  ShapeConfig cfg{8, 2};
  shape_init(ps, 4, 4, cfg, rng);
  Tensor f = randt(rng, {6, 4}, 0.5, 2.0);  // positive entries: ratios well-defined
  Tape tape;
  Tensor out = gate(tape, ps, f);
  for (int64_t i = 0; i < 6; ++i) {
    const double ratio = out.data[static_cast<size_t>(4 * i)] / f.data[static_cast<size_t>(4 * i)];
    EXPECT_GT(ratio, 0.0);
    EXPECT_LT(ratio, 1.0);
    for (int64_t j = 1; j < 4; ++j)
      EXPECT_NEAR(out.data[static_cast<size_t>(4 * i + j)] / f.data[static_cast<size_t>(4 * i + j)], ratio, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Shape generation
// ---------------------------------------------------------------------------

TEST(GenerateShape, OutputShapeAndFiniteness) {
  const int64_t c = 4, m = 4;
  ShapeConfig cfg{16, 3};  // r = 4 branches
  ParamStore ps;
  Rng rng(7);
  shape_init(ps, c, m, cfg, rng);
  Tensor f = randt(rng, {m, c});
  Tape tape;
  Tensor pts = generate_shape(tape, ps, gate(tape, ps, f), cfg);
  EXPECT_EQ(pts.shape, (Shape{16, 3}));
  EXPECT_TRUE(pts.all_finite());
  // wrong divisibility
  Tensor f5 = randt(rng, {5, c});
  EXPECT_THROW(generate_shape(tape, ps, f5, cfg), std::invalid_argument);
  EXPECT_THROW(shape_init(ps, c, 5, cfg, rng), std::invalid_argument);
}

TEST(GenerateShape, BranchStackingOrder) {
  // With every branch an identity-like map (one distinguishing bias), the
  // first M output rows come from branch 0, the next M from branch 1.
  const int64_t c = 2, m = 2;
  ShapeConfig cfg{4, 1};  // r = 2
  ParamStore ps;
  Rng rng(8);
  shape_init(ps, c, m, cfg, rng);
  // overwrite the expansion branches: w0 = w1 = I, biases distinguish branches
  for (int64_t k = 0; k < 2; ++k) {
    const std::string p = "shape.expand" + std::to_string(k);
    ps.at(p + ".w0") = Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    ps.at(p + ".w1") = Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    ps.at(p + ".b0") = Tensor(Shape{2}, std::vector<double>{static_cast<double>(k) + 1.0, 0});
    ps.at(p + ".b1") = Tensor(Shape{2});
  }
  Tensor f(Shape{m, c}, std::vector<double>{1, 2, 3, 4});
  // rebuild just the expansion concat: h rows must be [f0+b(0), f1+b(0), f0+b(1), f1+b(1)]
  Tape tape;
  std::vector<Tensor> branches;
  for (int64_t k = 0; k < 2; ++k) branches.push_back(mlp_apply(tape, ps, "shape.expand" + std::to_string(k), f, 2));
  Tensor h = concat(tape, 0, {&branches[0], &branches[1]});
  ASSERT_EQ(h.shape, (Shape{4, 2}));
  EXPECT_DOUBLE_EQ(h.data[0], 2.0);  // f00 + 1
  EXPECT_DOUBLE_EQ(h.data[2], 4.0);  // f10 + 1
  EXPECT_DOUBLE_EQ(h.data[4], 3.0);  // f00 + 2
  EXPECT_DOUBLE_EQ(h.data[6], 5.0);  // f10 + 2
}

TEST(GenerateShape, DeterministicAcrossTapes) {
  const int64_t c = 3, m = 4;
  ShapeConfig cfg{8, 2};
  ParamStore ps;
  Rng rng(9);
  shape_init(ps, c, m, cfg, rng);
  Tensor f = randt(rng, {m, c});
  Tape t1, t2;
  Tensor a = generate_shape(t1, ps, f, cfg);
  Tensor b = generate_shape(t2, ps, f, cfg);
  EXPECT_EQ(a.data, b.data);
}

TEST(GenerateShape, GradientsMatchFiniteDifferences) {
  const int64_t c = 3, m = 4;
  ShapeConfig cfg{8, 2};
  ParamStore init;
  Rng rng(10);
  shape_init(init, c, m, cfg, rng);
  // Differentiate at a generic point: freshly zeroed biases can park relu
  // pre-activations exactly on the kink, where central differences and the
  // one-sided derivative disagree.
  Rng jitter(15);
  for (const auto& name : init.names())
    for (double& v : init.at(name).data) v += jitter.uniform(-0.05, 0.05);
  const Tensor f0 = randt(rng, {m, c});
  Tensor target = randt(rng, {6, 3}, -0.5, 0.5);

  auto run = [&](ParamStore& ps, const Tensor& f, Tape& tape) {
    Tensor pts = generate_shape(tape, ps, gate(tape, ps, f), cfg);
    return chamfer(tape, pts, target);
  };

  ParamStore ps;
  for (const auto& name : init.names()) ps.create(name, init.at(name).shape) = init.at(name);
  Tape tape;
  auto nodes = ps.watch_all(tape);
  Tensor f = f0;
  tape.watch(f);
  Tensor loss = run(ps, f, tape);
  Gradients g = tape.backward(loss);

  const double h = 1e-5, tol = 1e-4;
  Rng pick(11);
  auto eval = [&](const std::string& pname, int64_t e, double delta, bool feature) {
    ParamStore ps2;
    for (const auto& name : init.names()) ps2.create(name, init.at(name).shape) = init.at(name);
    Tensor f2 = f0;
    if (feature)
      f2.data[static_cast<size_t>(e)] += delta;
    else
      ps2.at(pname).data[static_cast<size_t>(e)] += delta;
    Tape t2;
    return run(ps2, f2, t2).value();
  };
  for (const auto& name : init.names()) {
    for (int rep = 0; rep < 2; ++rep) {
      const int64_t e = static_cast<int64_t>(pick.uniform_index(static_cast<uint64_t>(init.at(name).numel())));
      const double num = (eval(name, e, h, false) - eval(name, e, -h, false)) / (2 * h);
      const double ana = g.has(nodes.at(name)) ? g.at(nodes.at(name)).data[static_cast<size_t>(e)] : 0.0;
      const double denom = std::max({1.0, std::fabs(num), std::fabs(ana)});
      EXPECT_NEAR(ana, num, tol * denom) << name << "[" << e << "]";
    }
  }
  for (int64_t e = 0; e < f0.numel(); ++e) {
    const double num = (eval("", e, h, true) - eval("", e, -h, true)) / (2 * h);
    const double ana = g.at(f).data[static_cast<size_t>(e)];
    const double denom = std::max({1.0, std::fabs(num), std::fabs(ana)});
    EXPECT_NEAR(ana, num, tol * denom) << "feature " << e;
  }
}

// ---------------------------------------------------------------------------
// Dense ground truth aggregation
// ---------------------------------------------------------------------------

TEST(DenseGt, SinglePointRepeats) {
  Sequence seq;
  seq.id = "test";
  Frame fr;
  fr.box = Box3D(1, 2, 3, 2, 2, 2, 0);
  fr.cloud = PointCloud(Tensor(Shape{2, 3}, std::vector<double>{1.5, 2, 3, 50, 50, 50}));  // one in-box point
  seq.frames.push_back(fr);
  Rng rng(12);
  Tensor pts = dense_gt(seq, 16, rng);
  ASSERT_EQ(pts.shape, (Shape{16, 3}));
  for (int64_t i = 0; i < 16; ++i) {
    EXPECT_DOUBLE_EQ(pts.data[static_cast<size_t>(3 * i)], 0.5);  // canonical frame of the box
    EXPECT_DOUBLE_EQ(pts.data[static_cast<size_t>(3 * i + 1)], 0.0);
    EXPECT_DOUBLE_EQ(pts.data[static_cast<size_t>(3 * i + 2)], 0.0);
  }
}

TEST(DenseGt, AggregatesAcrossFramesInCanonicalFrame) {
  Sequence seq;
  seq.id = "agg";
  for (int t = 0; t < 3; ++t) {
    Frame fr;
    const double cx = static_cast<double>(t);
    fr.box = Box3D(cx, 0, 0, 2, 2, 2, 0);
    // one point at box center + (0.25,0,0), one clutter point far away
    fr.cloud = PointCloud(Tensor(Shape{2, 3}, std::vector<double>{cx + 0.25, 0, 0, 99, 99, 99}));
    seq.frames.push_back(fr);
  }
  Rng rng(13);
  Tensor pts = dense_gt(seq, 9, rng);
  ASSERT_EQ(pts.shape, (Shape{9, 3}));
  for (int64_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(pts.data[static_cast<size_t>(3 * i)], 0.25);
}

TEST(DenseGt, ThrowsWhenNoPointsEverInBox) {
  Sequence seq;
  seq.id = "empty";
  Frame fr;
  fr.box = Box3D(0, 0, 0, 1, 1, 1, 0);
  fr.cloud = PointCloud(Tensor(Shape{1, 3}, std::vector<double>{10, 10, 10}));
  seq.frames.push_back(fr);
  Rng rng(14);
  EXPECT_THROW(dense_gt(seq, 8, rng), std::runtime_error);
}
