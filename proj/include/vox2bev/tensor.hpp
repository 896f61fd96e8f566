#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vox2bev {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major 64-bit float tensor. `node` is the handle of the tape
// node that produced it (-1 when the value is a plain constant).
class Tensor {
 public:
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  int node = -1;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
    for (int64_t d : shape)
      if (d < 0) throw std::invalid_argument("Tensor: negative extent in " + shape_str(shape));
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
  }

  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool empty() const { return data.empty(); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  double value() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " + shape_str(shape));
    return data[0];
  }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct Gradients {
  std::vector<Tensor> by_node;

  bool has(int node) const {
    return node >= 0 && node < static_cast<int>(by_node.size()) && !by_node[static_cast<size_t>(node)].empty();
  }
  bool has(const Tensor& t) const { return has(t.node); }

  const Tensor& at(int node) const {
    if (!has(node)) throw std::invalid_argument("Gradients::at: no gradient for node " + std::to_string(node));
    return by_node[static_cast<size_t>(node)];
  }
  const Tensor& at(const Tensor& t) const {
    if (t.node < 0) throw std::invalid_argument("Gradients::at: tensor is not on the tape");
    return at(t.node);
  }
};

// Records one forward pass. Nodes are appended in execution order, so the
// record is topologically sorted by construction; backward() walks it once
// in reverse, accumulating gradients across fan-out.
class Tape {
 public:
  using BackFn = std::function<void(const Tensor& grad_out, Tape&)>;

  // Registers a leaf the caller wants gradients for.
  int watch(Tensor& t) {
    t.node = push(nullptr);
    t.requires_grad = true;
    return t.node;
  }

  int push(BackFn fn) {
    nodes_.push_back(Node{std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  size_t size() const { return nodes_.size(); }

  void accumulate(int node, const Tensor& g) {
    Tensor& slot = grads_[static_cast<size_t>(node)];
    if (slot.empty()) {
      slot = g;
    } else {
      if (slot.shape != g.shape)
        throw std::logic_error("Tape::accumulate: gradient shape mismatch at node " + std::to_string(node));
      for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
    }
  }

  Gradients backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    if (loss.node < 0 || loss.node >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("backward: loss is not on this tape");
    grads_.assign(nodes_.size(), Tensor{});
    grads_[static_cast<size_t>(loss.node)] = Tensor::scalar(1.0);
    for (int i = loss.node; i >= 0; --i) {
      const Tensor& g = grads_[static_cast<size_t>(i)];
      if (!g.empty() && nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(g, *this);
    }
    Gradients out;
    out.by_node = std::move(grads_);
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    BackFn back;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline int record_unary(Tape& tape, Tensor& out, int in_node, std::function<Tensor(const Tensor&)> back) {
  if (in_node < 0) return -1;
  out.node = tape.push([in_node, back = std::move(back)](const Tensor& g, Tape& t) { t.accumulate(in_node, back(g)); });
  out.requires_grad = true;
  return out.node;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb](const Tensor& g, Tape& t) {
      if (na >= 0) t.accumulate(na, g);
      if (nb >= 0) t.accumulate(nb, g);
    });
    out.requires_grad = true;
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb](const Tensor& g, Tape& t) {
      if (na >= 0) t.accumulate(na, g);
      if (nb >= 0) {
        Tensor gb(g.shape);
        for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] = -g.data[i];
        t.accumulate(nb, gb);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb, av = a.data, bv = b.data, sh = a.shape](const Tensor& g, Tape& t) {
      if (na >= 0) {
        Tensor ga(sh);
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = g.data[i] * bv[i];
        t.accumulate(na, ga);
      }
      if (nb >= 0) {
        Tensor gb(sh);
        for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] = g.data[i] * av[i];
        t.accumulate(nb, gb);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * c;
  detail::record_unary(tape, out, a.node, [c](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = g.data[i] * c;
    return ga;
  });
  return out;
}

inline Tensor add_const(Tape& tape, const Tensor& a, double c) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + c;
  detail::record_unary(tape, out, a.node, [](const Tensor& g) { return g; });
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
  detail::record_unary(tape, out, a.node, [av = a.data](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = av[i] > 0.0 ? g.data[i] : 0.0;
    return ga;
  });
  return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-a.data[i]));
  detail::record_unary(tape, out, a.node, [ov = out.data](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = g.data[i] * ov[i] * (1.0 - ov[i]);
    return ga;
  });
  return out;
}

// Natural log; callers clamp their inputs away from zero first.
inline Tensor log(Tape& tape, const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(a.data[i]);
  detail::record_unary(tape, out, a.node, [av = a.data](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = g.data[i] / av[i];
    return ga;
  });
  return out;
}

// |x| with subgradient 0 at the kink.
inline Tensor abs(Tape& tape, const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::fabs(a.data[i]);
  detail::record_unary(tape, out, a.node, [av = a.data](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i)
      ga.data[i] = av[i] > 0.0 ? g.data[i] : (av[i] < 0.0 ? -g.data[i] : 0.0);
    return ga;
  });
  return out;
}

// Gradient passes only through the unclamped interior.
inline Tensor clamp(Tape& tape, const Tensor& a, double lo, double hi) {
  Tensor out(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(hi, std::max(lo, a.data[i]));
  detail::record_unary(tape, out, a.node, [av = a.data, lo, hi](const Tensor& g) {
    Tensor ga(g.shape);
    for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = (av[i] > lo && av[i] < hi) ? g.data[i] : 0.0;
    return ga;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape) + " -> " + shape_str(new_shape));
  Tensor out(std::move(new_shape), a.data);
  detail::record_unary(tape, out, a.node, [sh = a.shape](const Tensor& g) { return Tensor(sh, g.data); });
  return out;
}

inline Tensor concat(Tape& tape, int axis, const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& base = parts[0]->shape;
  const int rank = parts[0]->rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
  Shape out_shape = base;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p->shape[static_cast<size_t>(d)] != base[static_cast<size_t>(d)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p->shape) + " vs " + shape_str(base));
    out_shape[static_cast<size_t>(axis)] += p->shape[static_cast<size_t>(axis)];
  }

  // outer = product of dims before axis, inner = product after.
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= base[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= base[static_cast<size_t>(d)];

  Tensor out(out_shape);
  const int64_t out_axis = out_shape[static_cast<size_t>(axis)];
  std::vector<int64_t> axis_sizes, axis_offsets;
  int64_t off = 0;
  for (const Tensor* p : parts) {
    axis_sizes.push_back(p->shape[static_cast<size_t>(axis)]);
    axis_offsets.push_back(off);
    off += axis_sizes.back();
  }
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& p = *parts[pi];
    const int64_t pa = axis_sizes[pi];
    for (int64_t o = 0; o < outer; ++o)
      std::copy(p.data.begin() + o * pa * inner, p.data.begin() + (o + 1) * pa * inner,
                out.data.begin() + (o * out_axis + axis_offsets[pi]) * inner);
  }

  std::vector<int> in_nodes;
  bool any = false;
  for (const Tensor* p : parts) {
    in_nodes.push_back(p->node);
    any = any || p->node >= 0;
  }
  if (any) {
    std::vector<Shape> in_shapes;
    for (const Tensor* p : parts) in_shapes.push_back(p->shape);
    out.node = tape.push([in_nodes, in_shapes, axis_sizes, axis_offsets, outer, inner, out_axis](const Tensor& g, Tape& t) {
      for (size_t pi = 0; pi < in_nodes.size(); ++pi) {
        if (in_nodes[pi] < 0) continue;
        Tensor gp(in_shapes[pi]);
        const int64_t pa = axis_sizes[pi];
        for (int64_t o = 0; o < outer; ++o)
          std::copy(g.data.begin() + (o * out_axis + axis_offsets[pi]) * inner,
                    g.data.begin() + (o * out_axis + axis_offsets[pi] + pa) * inner, gp.data.begin() + o * pa * inner);
        t.accumulate(in_nodes[pi], gp);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<const Tensor*>& parts) { return concat(tape, 1, parts); }

// First-axis gather: out row r = x row idx[r]. Backward scatter-adds.
inline Tensor take_rows(Tape& tape, const Tensor& x, const std::vector<int64_t>& idx) {
  if (x.rank() < 1) throw std::invalid_argument("take_rows: rank-0 input");
  const int64_t n = x.dim(0);
  const int64_t inner = n ? x.numel() / n : 0;
  Shape out_shape = x.shape;
  out_shape[0] = static_cast<int64_t>(idx.size());
  Tensor out(out_shape);
  for (size_t r = 0; r < idx.size(); ++r) {
    const int64_t i = idx[r];
    if (i < 0 || i >= n) throw std::invalid_argument("take_rows: index out of range");
    std::copy(x.data.begin() + i * inner, x.data.begin() + (i + 1) * inner, out.data.begin() + static_cast<int64_t>(r) * inner);
  }
  detail::record_unary(tape, out, x.node, [idx, sh = x.shape, inner](const Tensor& g) {
    Tensor gx(sh);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int64_t c = 0; c < inner; ++c) gx.data[static_cast<size_t>(idx[r] * inner + c)] += g.data[static_cast<size_t>(static_cast<int64_t>(r) * inner + c)];
    return gx;
  });
  return out;
}

// Flat-index gather: out[r] = x.data[idx[r]].
inline Tensor take(Tape& tape, const Tensor& x, const std::vector<int64_t>& idx) {
  Tensor out(Shape{static_cast<int64_t>(idx.size())});
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= x.numel()) throw std::invalid_argument("take: index out of range");
    out.data[r] = x.data[static_cast<size_t>(idx[r])];
  }
  detail::record_unary(tape, out, x.node, [idx, sh = x.shape](const Tensor& g) {
    Tensor gx(sh);
    for (size_t r = 0; r < idx.size(); ++r) gx.data[static_cast<size_t>(idx[r])] += g.data[r];
    return gx;
  });
  return out;
}

// Row r of x becomes rows r*t .. r*t+t-1 of the output.
inline Tensor repeat_interleave_rows(Tape& tape, const Tensor& x, int64_t t) {
  if (x.rank() != 2) throw std::invalid_argument("repeat_interleave_rows: expected rank-2 input");
  const int64_t n = x.dim(0), c = x.dim(1);
  Tensor out(Shape{n * t, c});
  for (int64_t r = 0; r < n; ++r)
    for (int64_t k = 0; k < t; ++k)
      std::copy(x.data.begin() + r * c, x.data.begin() + (r + 1) * c, out.data.begin() + (r * t + k) * c);
  detail::record_unary(tape, out, x.node, [n, c, t](const Tensor& g) {
    Tensor gx(Shape{n, c});
    for (int64_t r = 0; r < n; ++r)
      for (int64_t k = 0; k < t; ++k)
        for (int64_t j = 0; j < c; ++j) gx.data[static_cast<size_t>(r * c + j)] += g.data[static_cast<size_t>((r * t + k) * c + j)];
    return gx;
  });
  return out;
}

// Whole matrix stacked t times.
inline Tensor tile_rows(Tape& tape, const Tensor& x, int64_t t) {
  if (x.rank() != 2) throw std::invalid_argument("tile_rows: expected rank-2 input");
  const int64_t n = x.dim(0), c = x.dim(1);
  Tensor out(Shape{n * t, c});
  for (int64_t k = 0; k < t; ++k) std::copy(x.data.begin(), x.data.end(), out.data.begin() + k * n * c);
  detail::record_unary(tape, out, x.node, [n, c, t](const Tensor& g) {
    Tensor gx(Shape{n, c});
    for (int64_t k = 0; k < t; ++k)
      for (int64_t i = 0; i < n * c; ++i) gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(k * n * c + i)];
    return gx;
  });
  return out;
}

// Top-left spatial crop of an [H,W,C] map.
inline Tensor crop2d(Tape& tape, const Tensor& x, int64_t h, int64_t w) {
  if (x.rank() != 3) throw std::invalid_argument("crop2d: expected [H,W,C]");
  const int64_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (h > H || w > W) throw std::invalid_argument("crop2d: crop larger than input");
  Tensor out(Shape{h, w, C});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      std::copy(x.data.begin() + (i * W + j) * C, x.data.begin() + (i * W + j + 1) * C, out.data.begin() + (i * w + j) * C);
  detail::record_unary(tape, out, x.node, [H, W, C, h, w](const Tensor& g) {
    Tensor gx(Shape{H, W, C});
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        for (int64_t c = 0; c < C; ++c) gx.data[static_cast<size_t>((i * W + j) * C + c)] = g.data[static_cast<size_t>((i * w + j) * C + c)];
    return gx;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record_unary(tape, out, a.node, [sh = a.shape](const Tensor& g) {
    Tensor ga(sh, g.value());
    return ga;
  });
  return out;
}

namespace detail {

inline void reduce_geometry(const Shape& shape, int axis, int64_t& outer, int64_t& mid, int64_t& inner, Shape& out_shape) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0 || axis >= rank) throw std::invalid_argument("reduce: bad axis");
  outer = 1;
  inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[static_cast<size_t>(d)];
  mid = shape[static_cast<size_t>(axis)];
  if (mid == 0) throw std::invalid_argument("reduce: empty axis");
  out_shape.clear();
  for (int d = 0; d < rank; ++d)
    if (d != axis) out_shape.push_back(shape[static_cast<size_t>(d)]);
}

}  // namespace detail

inline Tensor reduce_sum(Tape& tape, const Tensor& a, int axis) {
  int64_t outer, mid, inner;
  Shape out_shape;
  detail::reduce_geometry(a.shape, axis, outer, mid, inner, out_shape);
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      for (int64_t i = 0; i < inner; ++i) out.data[static_cast<size_t>(o * inner + i)] += a.data[static_cast<size_t>((o * mid + m) * inner + i)];
  detail::record_unary(tape, out, a.node, [sh = a.shape, outer, mid, inner](const Tensor& g) {
    Tensor ga(sh);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t m = 0; m < mid; ++m)
        for (int64_t i = 0; i < inner; ++i) ga.data[static_cast<size_t>((o * mid + m) * inner + i)] = g.data[static_cast<size_t>(o * inner + i)];
    return ga;
  });
  return out;
}

// Max over one axis. Ties go to the smallest index along the axis and the
// gradient routes only there. `argmax`, when given, receives one index per
// output slot.
inline Tensor reduce_max(Tape& tape, const Tensor& a, int axis, std::vector<int64_t>* argmax = nullptr) {
  int64_t outer, mid, inner;
  Shape out_shape;
  detail::reduce_geometry(a.shape, axis, outer, mid, inner, out_shape);
  Tensor out(out_shape);
  std::vector<int64_t> arg(static_cast<size_t>(outer * inner), 0);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double best = a.data[static_cast<size_t>(o * mid * inner + i)];
      int64_t best_m = 0;
      for (int64_t m = 1; m < mid; ++m) {
        const double v = a.data[static_cast<size_t>((o * mid + m) * inner + i)];
        if (v > best) {
          best = v;
          best_m = m;
        }
      }
      out.data[static_cast<size_t>(o * inner + i)] = best;
      arg[static_cast<size_t>(o * inner + i)] = best_m;
    }
  if (argmax) *argmax = arg;
  detail::record_unary(tape, out, a.node, [sh = a.shape, arg, outer, mid, inner](const Tensor& g) {
    Tensor ga(sh);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i)
        ga.data[static_cast<size_t>((o * mid + arg[static_cast<size_t>(o * inner + i)]) * inner + i)] = g.data[static_cast<size_t>(o * inner + i)];
    return ga;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out(Shape{n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const double av = a.data[static_cast<size_t>(i * k + p)];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + p * m;
      double* orow = out.data.data() + i * m;
      for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb, av = a.data, bv = b.data, n, k, m](const Tensor& g, Tape& t) {
      if (na >= 0) {
        Tensor ga(Shape{n, k});
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < m; ++j) {
            const double gv = g.data[static_cast<size_t>(i * m + j)];
            if (gv == 0.0) continue;
            for (int64_t p = 0; p < k; ++p) ga.data[static_cast<size_t>(i * k + p)] += gv * bv[static_cast<size_t>(p * m + j)];
          }
        t.accumulate(na, ga);
      }
      if (nb >= 0) {
        Tensor gb(Shape{k, m});
        for (int64_t i = 0; i < n; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const double a_ip = av[static_cast<size_t>(i * k + p)];
            if (a_ip == 0.0) continue;
            for (int64_t j = 0; j < m; ++j) gb.data[static_cast<size_t>(p * m + j)] += a_ip * g.data[static_cast<size_t>(i * m + j)];
          }
        t.accumulate(nb, gb);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

// a [n,k] x b [m,k] -> [n,m], i.e. a * b^T without materializing the transpose.
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  Tensor out(Shape{n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double s = 0.0;
      const double* ar = a.data.data() + i * k;
      const double* br = b.data.data() + j * k;
      for (int64_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out.data[static_cast<size_t>(i * m + j)] = s;
    }
  const int na = a.node, nb = b.node;
  if (na >= 0 || nb >= 0) {
    out.node = tape.push([na, nb, av = a.data, bv = b.data, n, k, m](const Tensor& g, Tape& t) {
      if (na >= 0) {
        Tensor ga(Shape{n, k});
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < m; ++j) {
            const double gv = g.data[static_cast<size_t>(i * m + j)];
            if (gv == 0.0) continue;
            for (int64_t p = 0; p < k; ++p) ga.data[static_cast<size_t>(i * k + p)] += gv * bv[static_cast<size_t>(j * k + p)];
          }
        t.accumulate(na, ga);
      }
      if (nb >= 0) {
        Tensor gb(Shape{m, k});
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < m; ++j) {
            const double gv = g.data[static_cast<size_t>(i * m + j)];
            if (gv == 0.0) continue;
            for (int64_t p = 0; p < k; ++p) gb.data[static_cast<size_t>(j * k + p)] += gv * av[static_cast<size_t>(i * k + p)];
          }
        t.accumulate(nb, gb);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

// Broadcast-add b[c] over the last axis of x[..., c].
inline Tensor add_channels(Tape& tape, const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.shape.back() != b.dim(0))
    throw std::invalid_argument("add_channels: bias shape " + shape_str(b.shape) + " does not match " + shape_str(x.shape));
  const int64_t c = b.dim(0);
  const int64_t rows = c ? x.numel() / c : 0;
  Tensor out(x.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(r * c + j)] = x.data[static_cast<size_t>(r * c + j)] + b.data[static_cast<size_t>(j)];
  const int nx = x.node, nb = b.node;
  if (nx >= 0 || nb >= 0) {
    out.node = tape.push([nx, nb, rows, c](const Tensor& g, Tape& t) {
      if (nx >= 0) t.accumulate(nx, g);
      if (nb >= 0) {
        Tensor gb(Shape{c});
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * c + j)];
        t.accumulate(nb, gb);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

// Scale row r of x[n,c] by g[r]; g has shape [n] or [n,1].
inline Tensor scale_rows(Tape& tape, const Tensor& x, const Tensor& s) {
  if (x.rank() != 2) throw std::invalid_argument("scale_rows: expected rank-2 input");
  const int64_t n = x.dim(0), c = x.dim(1);
  if (s.numel() != n) throw std::invalid_argument("scale_rows: scale length mismatch");
  Tensor out(x.shape);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(r * c + j)] = x.data[static_cast<size_t>(r * c + j)] * s.data[static_cast<size_t>(r)];
  const int nx = x.node, ns = s.node;
  if (nx >= 0 || ns >= 0) {
    out.node = tape.push([nx, ns, xv = x.data, sv = s.data, ssh = s.shape, n, c](const Tensor& g, Tape& t) {
      if (nx >= 0) {
        Tensor gx(Shape{n, c});
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < c; ++j) gx.data[static_cast<size_t>(r * c + j)] = g.data[static_cast<size_t>(r * c + j)] * sv[static_cast<size_t>(r)];
        t.accumulate(nx, gx);
      }
      if (ns >= 0) {
        Tensor gs(ssh);
        for (int64_t r = 0; r < n; ++r) {
          double acc = 0.0;
          for (int64_t j = 0; j < c; ++j) acc += g.data[static_cast<size_t>(r * c + j)] * xv[static_cast<size_t>(r * c + j)];
          gs.data[static_cast<size_t>(r)] = acc;
        }
        t.accumulate(ns, gs);
      }
    });
    out.requires_grad = true;
  }
  return out;
}

// Rows rescaled to unit L2 norm; rows with norm <= eps are scaled by 1/eps
// and treated as locally constant in the backward pass.
inline Tensor rownormalize(Tape& tape, const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw std::invalid_argument("rownormalize: expected rank-2 input");
  const int64_t n = x.dim(0), c = x.dim(1);
  Tensor out(x.shape);
  std::vector<double> norms(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += x.data[static_cast<size_t>(r * c + j)] * x.data[static_cast<size_t>(r * c + j)];
    const double nrm = std::sqrt(s);
    norms[static_cast<size_t>(r)] = nrm;
    const double div = std::max(nrm, eps);
    for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(r * c + j)] = x.data[static_cast<size_t>(r * c + j)] / div;
  }
  detail::record_unary(tape, out, x.node, [ov = out.data, norms, eps, n, c](const Tensor& g) {
    Tensor gx(Shape{n, c});
    for (int64_t r = 0; r < n; ++r) {
      const double nrm = norms[static_cast<size_t>(r)];
      if (nrm <= eps) continue;  // degenerate row: no gradient
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += g.data[static_cast<size_t>(r * c + j)] * ov[static_cast<size_t>(r * c + j)];
      for (int64_t j = 0; j < c; ++j)
        gx.data[static_cast<size_t>(r * c + j)] = (g.data[static_cast<size_t>(r * c + j)] - ov[static_cast<size_t>(r * c + j)] * dot) / nrm;
    }
    return gx;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions ("same" zero padding on spatial axes, odd kernels)
// ---------------------------------------------------------------------------

// x [H,W,Z,Cin], kernel [k,k,k,Cin,Cout], per-axis strides.
inline Tensor conv3d(Tape& tape, const Tensor& x, const Tensor& kernel, int64_t sx = 1, int64_t sy = 1, int64_t sz = 1) {
  if (x.rank() != 4) throw std::invalid_argument("conv3d: expected [H,W,Z,Cin] input");
  if (kernel.rank() != 5 || kernel.dim(0) != kernel.dim(1) || kernel.dim(1) != kernel.dim(2))
    throw std::invalid_argument("conv3d: expected cubic [k,k,k,Cin,Cout] kernel");
  const int64_t H = x.dim(0), W = x.dim(1), Z = x.dim(2), Ci = x.dim(3);
  const int64_t k = kernel.dim(0), Co = kernel.dim(4);
  if (kernel.dim(3) != Ci)
    throw std::invalid_argument("conv3d: channel mismatch, input " + shape_str(x.shape) + " kernel " + shape_str(kernel.shape));
  if (H == 0 || W == 0 || Z == 0) throw std::invalid_argument("conv3d: zero-extent input");
  if (k % 2 == 0) throw std::invalid_argument("conv3d: kernel size must be odd");
  if (sx < 1 || sy < 1 || sz < 1) throw std::invalid_argument("conv3d: strides must be >= 1");
  const int64_t p = k / 2;
  const int64_t Ho = (H - 1) / sx + 1, Wo = (W - 1) / sy + 1, Zo = (Z - 1) / sz + 1;

  Tensor out(Shape{Ho, Wo, Zo, Co});
  const double* xd = x.data.data();
  const double* kd = kernel.data.data();
  double* od = out.data.data();
  for (int64_t oh = 0; oh < Ho; ++oh)
    for (int64_t ow = 0; ow < Wo; ++ow)
      for (int64_t oz = 0; oz < Zo; ++oz) {
        double* ocell = od + ((oh * Wo + ow) * Zo + oz) * Co;
        for (int64_t kh = 0; kh < k; ++kh) {
          const int64_t ih = oh * sx + kh - p;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kw = 0; kw < k; ++kw) {
            const int64_t iw = ow * sy + kw - p;
            if (iw < 0 || iw >= W) continue;
            for (int64_t kz = 0; kz < k; ++kz) {
              const int64_t iz = oz * sz + kz - p;
              if (iz < 0 || iz >= Z) continue;
              const double* xcell = xd + ((ih * W + iw) * Z + iz) * Ci;
              const double* kcell = kd + ((kh * k + kw) * k + kz) * Ci * Co;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const double xv = xcell[ci];
                if (xv == 0.0) continue;
                const double* krow = kcell + ci * Co;
                for (int64_t co = 0; co < Co; ++co) ocell[co] += xv * krow[co];
              }
            }
          }
        }
      }

  const int nx = x.node, nk = kernel.node;
  if (nx >= 0 || nk >= 0) {
    out.node = tape.push([nx, nk, xv = x.data, kv = kernel.data, H, W, Z, Ci, k, Co, p, sx, sy, sz, Ho, Wo, Zo](const Tensor& g, Tape& t) {
      Tensor gx(Shape{H, W, Z, Ci});
      Tensor gk(Shape{k, k, k, Ci, Co});
      const double* gd = g.data.data();
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow)
          for (int64_t oz = 0; oz < Zo; ++oz) {
            const double* gcell = gd + ((oh * Wo + ow) * Zo + oz) * Co;
            for (int64_t kh = 0; kh < k; ++kh) {
              const int64_t ih = oh * sx + kh - p;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < k; ++kw) {
                const int64_t iw = ow * sy + kw - p;
                if (iw < 0 || iw >= W) continue;
                for (int64_t kz = 0; kz < k; ++kz) {
                  const int64_t iz = oz * sz + kz - p;
                  if (iz < 0 || iz >= Z) continue;
                  const int64_t xbase = ((ih * W + iw) * Z + iz) * Ci;
                  const int64_t kbase = ((kh * k + kw) * k + kz) * Ci * Co;
                  for (int64_t ci = 0; ci < Ci; ++ci) {
                    const double xcur = xv[static_cast<size_t>(xbase + ci)];
                    double gxacc = 0.0;
                    for (int64_t co = 0; co < Co; ++co) {
                      const double gv = gcell[co];
                      gxacc += gv * kv[static_cast<size_t>(kbase + ci * Co + co)];
                      gk.data[static_cast<size_t>(kbase + ci * Co + co)] += gv * xcur;
                    }
                    gx.data[static_cast<size_t>(xbase + ci)] += gxacc;
                  }
                }
              }
            }
          }
      if (nx >= 0) t.accumulate(nx, gx);
      if (nk >= 0) t.accumulate(nk, gk);
    });
    out.requires_grad = true;
  }
  return out;
}

// x [H,W,Cin], kernel [k,k,Cin,Cout], one stride for both spatial axes.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, int64_t stride = 1) {
  if (x.rank() != 3) throw std::invalid_argument("conv2d: expected [H,W,Cin] input");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) throw std::invalid_argument("conv2d: expected square [k,k,Cin,Cout] kernel");
  const int64_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  const int64_t k = kernel.dim(0), Co = kernel.dim(3);
  if (kernel.dim(2) != Ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (H == 0 || W == 0) throw std::invalid_argument("conv2d: zero-extent input");
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int64_t p = k / 2;
  const int64_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;

  Tensor out(Shape{Ho, Wo, Co});
  for (int64_t oh = 0; oh < Ho; ++oh)
    for (int64_t ow = 0; ow < Wo; ++ow) {
      double* ocell = out.data.data() + (oh * Wo + ow) * Co;
      for (int64_t kh = 0; kh < k; ++kh) {
        const int64_t ih = oh * stride + kh - p;
        if (ih < 0 || ih >= H) continue;
        for (int64_t kw = 0; kw < k; ++kw) {
          const int64_t iw = ow * stride + kw - p;
          if (iw < 0 || iw >= W) continue;
          const double* xcell = x.data.data() + (ih * W + iw) * Ci;
          const double* kcell = kernel.data.data() + (kh * k + kw) * Ci * Co;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const double xv = xcell[ci];
            if (xv == 0.0) continue;
            const double* krow = kcell + ci * Co;
            for (int64_t co = 0; co < Co; ++co) ocell[co] += xv * krow[co];
          }
        }
      }
    }

  const int nx = x.node, nk = kernel.node;
  if (nx >= 0 || nk >= 0) {
    out.node = tape.push([nx, nk, xv = x.data, kv = kernel.data, H, W, Ci, k, Co, p, stride, Ho, Wo](const Tensor& g, Tape& t) {
      Tensor gx(Shape{H, W, Ci});
      Tensor gk(Shape{k, k, Ci, Co});
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const double* gcell = g.data.data() + (oh * Wo + ow) * Co;
          for (int64_t kh = 0; kh < k; ++kh) {
            const int64_t ih = oh * stride + kh - p;
            if (ih < 0 || ih >= H) continue;
            for (int64_t kw = 0; kw < k; ++kw) {
              const int64_t iw = ow * stride + kw - p;
              if (iw < 0 || iw >= W) continue;
              const int64_t xbase = (ih * W + iw) * Ci;
              const int64_t kbase = (kh * k + kw) * Ci * Co;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const double xcur = xv[static_cast<size_t>(xbase + ci)];
                double gxacc = 0.0;
                for (int64_t co = 0; co < Co; ++co) {
                  const double gv = gcell[co];
                  gxacc += gv * kv[static_cast<size_t>(kbase + ci * Co + co)];
                  gk.data[static_cast<size_t>(kbase + ci * Co + co)] += gv * xcur;
                }
                gx.data[static_cast<size_t>(xbase + ci)] += gxacc;
              }
            }
          }
        }
      if (nx >= 0) t.accumulate(nx, gx);
      if (nk >= 0) t.accumulate(nk, gk);
    });
    out.requires_grad = true;
  }
  return out;
}

// Fractionally-strided (transposed) convolution, no padding:
// out[(ih*s+kh),(iw*s+kw)] += x[ih,iw] * K[kh,kw]; output (H-1)*s+k per axis.
inline Tensor conv2d_transpose(Tape& tape, const Tensor& x, const Tensor& kernel, int64_t stride) {
  if (x.rank() != 3) throw std::invalid_argument("conv2d_transpose: expected [H,W,Cin] input");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1))
    throw std::invalid_argument("conv2d_transpose: expected square [k,k,Cin,Cout] kernel");
  const int64_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  const int64_t k = kernel.dim(0), Co = kernel.dim(3);
  if (kernel.dim(2) != Ci) throw std::invalid_argument("conv2d_transpose: channel mismatch");
  if (stride < 1) throw std::invalid_argument("conv2d_transpose: stride must be >= 1");
  const int64_t Ho = (H - 1) * stride + k, Wo = (W - 1) * stride + k;

  Tensor out(Shape{Ho, Wo, Co});
  for (int64_t ih = 0; ih < H; ++ih)
    for (int64_t iw = 0; iw < W; ++iw) {
      const double* xcell = x.data.data() + (ih * W + iw) * Ci;
      for (int64_t kh = 0; kh < k; ++kh)
        for (int64_t kw = 0; kw < k; ++kw) {
          double* ocell = out.data.data() + ((ih * stride + kh) * Wo + (iw * stride + kw)) * Co;
          const double* kcell = kernel.data.data() + (kh * k + kw) * Ci * Co;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const double xv = xcell[ci];
            if (xv == 0.0) continue;
            const double* krow = kcell + ci * Co;
            for (int64_t co = 0; co < Co; ++co) ocell[co] += xv * krow[co];
          }
        }
    }

  const int nx = x.node, nk = kernel.node;
  if (nx >= 0 || nk >= 0) {
    out.node = tape.push([nx, nk, xv = x.data, kv = kernel.data, H, W, Ci, k, Co, stride, Wo](const Tensor& g, Tape& t) {
      Tensor gx(Shape{H, W, Ci});
      Tensor gk(Shape{k, k, Ci, Co});
      for (int64_t ih = 0; ih < H; ++ih)
        for (int64_t iw = 0; iw < W; ++iw) {
          const int64_t xbase = (ih * W + iw) * Ci;
          for (int64_t kh = 0; kh < k; ++kh)
            for (int64_t kw = 0; kw < k; ++kw) {
              const double* gcell = g.data.data() + ((ih * stride + kh) * Wo + (iw * stride + kw)) * Co;
              const int64_t kbase = (kh * k + kw) * Ci * Co;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const double xcur = xv[static_cast<size_t>(xbase + ci)];
                double gxacc = 0.0;
                for (int64_t co = 0; co < Co; ++co) {
                  const double gv = gcell[co];
                  gxacc += gv * kv[static_cast<size_t>(kbase + ci * Co + co)];
                  gk.data[static_cast<size_t>(kbase + ci * Co + co)] += gv * xcur;
                }
                gx.data[static_cast<size_t>(xbase + ci)] += gxacc;
              }
            }
        }
      if (nx >= 0) t.accumulate(nx, gx);
      if (nk >= 0) t.accumulate(nk, gk);
    });
    out.requires_grad = true;
  }
  return out;
}

}  // namespace vox2bev
