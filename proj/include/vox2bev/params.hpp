#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vox2bev/rng.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

// Named parameter registry. Parameters live here between steps; each forward
// pass re-registers them on a fresh tape via watch_all().
class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    order_.push_back(name);
    return params_[name] = Tensor(std::move(shape));
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name).numel();
    return n;
  }

  // Registers every parameter on the tape; the returned map feeds the
  // optimizer after backward().
  std::map<std::string, int> watch_all(Tape& tape) {
    std::map<std::string, int> node_of;
    for (const auto& name : order_) node_of[name] = tape.watch(params_.at(name));
    return node_of;
  }

  // Kaiming-style init for ReLU nets: N(0, sqrt(2/fan_in)) weights. fan_in is
  // the product of all extents except the last (the output channel axis).
  Tensor& create_he(const std::string& name, Shape shape, Rng& rng) {
    Tensor& t = create(name, std::move(shape));
    int64_t fan_in = 1;
    for (size_t d = 0; d + 1 < t.shape.size(); ++d) fan_in *= t.shape[d];
    if (fan_in < 1) fan_in = 1;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.gaussian(0.0, stddev);
    return t;
  }

  Tensor& create_zeros(const std::string& name, Shape shape) { return create(name, std::move(shape)); }

  // ---- checkpoint serialization (little-endian, fixed layout) ----
  //   magic "V2BP" | u32 version=1
  //   then records until EOF: u32 name_len | name bytes | u32 rank | u64 extents[rank] | f64 values[numel]
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write("V2BP", 4);
    write_u32(f, 1);
    for (const auto& name : order_) {
      const Tensor& t = params_.at(name);
      write_u32(f, static_cast<uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(f, static_cast<uint32_t>(t.rank()));
      for (int64_t d : t.shape) write_u64(f, static_cast<uint64_t>(d));
      static_assert(sizeof(double) == 8);
      f.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    }
    if (!f) throw std::runtime_error("short write to checkpoint: " + path);
  }

  static ParamStore load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "V2BP", 4) != 0) throw std::runtime_error("bad checkpoint magic in " + path);
    const uint32_t version = read_u32(f, path);
    if (version != 1) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    ParamStore ps;
    while (f.peek() != std::ifstream::traits_type::eof()) {
      const uint32_t name_len = read_u32(f, path);
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      const uint32_t rank = read_u32(f, path);
      Shape shape(rank);
      for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(read_u64(f, path));
      if (!f) throw std::runtime_error("truncated checkpoint: " + path);
      Tensor t(shape);
      f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
      if (!f) throw std::runtime_error("truncated checkpoint: " + path);
      ps.create(name, t.shape) = std::move(t);
    }
    return ps;
  }

 private:
  static void write_u32(std::ofstream& f, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 4);
  }
  static void write_u64(std::ofstream& f, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
  }
  static uint32_t read_u32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
  }
  static uint64_t read_u64(std::ifstream& f, const std::string& path) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// Shared pointwise MLP helpers. A "linear" layer is y = x W^T + b with
// W [out,in] and b [out]; an MLP is linear+ReLU per hidden spec entry.
// ---------------------------------------------------------------------------

inline void mlp_init(ParamStore& ps, const std::string& prefix, int64_t in_dim, const std::vector<int64_t>& widths, Rng& rng) {
  int64_t cur = in_dim;
  for (size_t i = 0; i < widths.size(); ++i) {
    ps.create_he(prefix + ".w" + std::to_string(i), Shape{widths[i], cur}, rng);
    ps.create_zeros(prefix + ".b" + std::to_string(i), Shape{widths[i]});
    cur = widths[i];
  }
}

inline Tensor linear(Tape& tape, ParamStore& ps, const std::string& prefix, int layer, const Tensor& x) {
  const Tensor& w = ps.at(prefix + ".w" + std::to_string(layer));
  const Tensor& b = ps.at(prefix + ".b" + std::to_string(layer));
  return add_channels(tape, matmul_nt(tape, x, w), b);
}

// Applies every layer with ReLU; pass relu_last=false to leave the final
// layer linear (regression heads).
inline Tensor mlp_apply(Tape& tape, ParamStore& ps, const std::string& prefix, const Tensor& x, int num_layers,
                        bool relu_last = true) {
  Tensor h = x;
  for (int i = 0; i < num_layers; ++i) {
    h = linear(tape, ps, prefix, i, h);
    if (relu_last || i + 1 < num_layers) h = relu(tape, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adam with bias correction, applied in parameter registration order.
// ---------------------------------------------------------------------------

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // `node_of` maps parameter name -> tape node for the pass that produced
  // `grads`. Parameters without a gradient this step are left untouched
  // (their moment estimates do not advance).
  void step(ParamStore& ps, const Gradients& grads, const std::map<std::string, int>& node_of, double lr) {
    for (const auto& name : ps.names()) {
      auto it = node_of.find(name);
      if (it == node_of.end() || !grads.has(it->second)) continue;
      const Tensor& g = grads.at(it->second);
      Tensor& p = ps.at(name);
      if (g.shape != p.shape) throw std::logic_error("Adam: gradient shape mismatch for " + name);
      State& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.data.size(), 0.0);
        st.v.assign(p.data.size(), 0.0);
      }
      st.t += 1;
      const double bc1 = 1.0 - std::pow(beta1_, st.t);
      const double bc2 = 1.0 - std::pow(beta2_, st.t);
      for (size_t i = 0; i < p.data.size(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g.data[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
    int64_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::map<std::string, State> state_;
};

}  // namespace vox2bev
