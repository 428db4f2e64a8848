#pragma once

// Minimal reverse-mode autodiff over dense double tensors.
//
// Backward rules are written in terms of recorded ops, so gradients can be
// differentiated again (create_graph = true). The toy detector relies on
// this to train through gradient-weighted heat maps.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace odamkit::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

struct Node;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const std::vector<double>& value() const;
  std::vector<double>& mutable_value();
  const Shape& shape() const;
  std::size_t numel() const;
  double item() const;
  bool requires_grad() const;
  Node* get() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
  std::vector<double> value;
  Shape shape;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
};

inline const std::vector<double>& Var::value() const { return node_->value; }
inline std::vector<double>& Var::mutable_value() { return node_->value; }
inline const Shape& Var::shape() const { return node_->shape; }
inline std::size_t Var::numel() const { return node_->value.size(); }
inline double Var::item() const {
  if (node_->value.size() != 1) throw std::logic_error("item() on a non-scalar tensor");
  return node_->value[0];
}
inline bool Var::requires_grad() const { return node_ && node_->requires_grad; }

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  explicit EnableGradGuard(bool on) : prev_(grad_enabled()) { grad_enabled() = on; }
  ~EnableGradGuard() { grad_enabled() = prev_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

inline Var tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
  if (values.size() != numel(shape)) throw std::invalid_argument("tensor value count does not match shape");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

inline Var constant(Shape shape, std::vector<double> values) { return tensor(std::move(shape), std::move(values)); }
inline Var zeros(Shape shape) {
  const auto n = numel(shape);
  return tensor(std::move(shape), std::vector<double>(n, 0.0));
}
inline Var scalar(double v) { return tensor({1}, {v}); }
inline Var parameter(Shape shape, std::vector<double> values) {
  return tensor(std::move(shape), std::move(values), true);
}

namespace detail {

inline Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (grad_enabled() && any) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise ops

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var mul_const(const Var& a, double c);
Var add_const(const Var& a, double c);
Var sum(const Var& a);
Var broadcast_to(const Var& s, const Shape& shape);
Var scale_by(const Var& a, const Var& s);

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b, "add");
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [](const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a, b, "mul");
  std::vector<double> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var(), b.requires_grad() ? mul(g, a) : Var()};
  });
}

inline Var neg(const Var& a) { return mul_const(a, -1.0); }

inline Var mul_const(const Var& a, double c) {
  std::vector<double> out(a.value());
  for (double& v : out) v *= c;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [c](const Var& g) { return std::vector<Var>{mul_const(g, c)}; });
}

inline Var add_const(const Var& a, double c) {
  std::vector<double> out(a.value());
  for (double& v : out) v += c;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](const Var& g) { return std::vector<Var>{g}; });
}

/// a * s where s holds a single value.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be a scalar");
  std::vector<double> out(a.value());
  const double sv = s.value()[0];
  for (double& v : out) v *= sv;
  return detail::make_result(a.shape(), std::move(out), {a, s}, [a, s](const Var& g) {
    return std::vector<Var>{scale_by(g, s), sum(mul(g, a))};
  });
}

inline Var constant_mask_mul(const Var& g, std::shared_ptr<const std::vector<double>> mask) {
  std::vector<double> out(g.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return detail::make_result(g.shape(), std::move(out), {g}, [mask](const Var& gg) {
    return std::vector<Var>{constant_mask_mul(gg, mask)};
  });
}

inline Var relu(const Var& a) {
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  std::vector<double> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = out[i] > 0 ? 1.0 : 0.0;
    if (!(out[i] > 0)) out[i] = 0.0;
  }
  std::shared_ptr<const std::vector<double>> m = mask;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [m](const Var& g) { return std::vector<Var>{constant_mask_mul(g, m)}; });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  std::vector<double> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool inside = out[i] >= lo && out[i] <= hi;
    (*mask)[i] = inside ? 1.0 : 0.0;
    out[i] = std::min(std::max(out[i], lo), hi);
  }
  std::shared_ptr<const std::vector<double>> m = mask;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [m](const Var& g) { return std::vector<Var>{constant_mask_mul(g, m)}; });
}

inline Var sigmoid(const Var& a) {
  std::vector<double> out(a.value());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return detail::make_result(a.shape(), std::move(out), {a}, [a](const Var& g) {
    Var s = sigmoid(a);
    return std::vector<Var>{mul(g, mul(s, add_const(neg(s), 1.0)))};
  });
}

inline Var exp(const Var& a) {
  std::vector<double> out(a.value());
  for (double& v : out) v = std::exp(v);
  return detail::make_result(a.shape(), std::move(out), {a},
                             [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

inline Var reciprocal(const Var& a) {
  std::vector<double> out(a.value());
  for (double& v : out) v = 1.0 / v;
  return detail::make_result(a.shape(), std::move(out), {a}, [a](const Var& g) {
    Var r = reciprocal(a);
    return std::vector<Var>{neg(mul(g, mul(r, r)))};
  });
}

inline Var log(const Var& a) {
  std::vector<double> out(a.value());
  for (double& v : out) v = std::log(v);
  return detail::make_result(a.shape(), std::move(out), {a},
                             [a](const Var& g) { return std::vector<Var>{mul(g, reciprocal(a))}; });
}

inline Var sqrt(const Var& a) {
  std::vector<double> out(a.value());
  for (double& v : out) v = std::sqrt(v);
  return detail::make_result(a.shape(), std::move(out), {a}, [a](const Var& g) {
    return std::vector<Var>{mul(g, mul_const(reciprocal(sqrt(a)), 0.5))};
  });
}

inline Var div(const Var& a, const Var& b) { return mul(a, reciprocal(b)); }

// ---------------------------------------------------------------------------
// Reductions, indexing, reshaping

inline Var sum(const Var& a) {
  double s = 0;
  for (double v : a.value()) s += v;
  Shape shape = a.shape();
  return detail::make_result({1}, {s}, {a},
                             [shape](const Var& g) { return std::vector<Var>{broadcast_to(g, shape)}; });
}

inline Var broadcast_to(const Var& s, const Shape& shape) {
  if (s.numel() != 1) throw std::invalid_argument("broadcast_to: source must be a scalar");
  return detail::make_result(shape, std::vector<double>(numel(shape), s.value()[0]), {s},
                             [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var scatter(const Var& s, std::size_t index, const Shape& shape);

inline Var select(const Var& a, std::size_t index) {
  if (index >= a.numel()) throw std::out_of_range("select: index out of range");
  Shape shape = a.shape();
  return detail::make_result({1}, {a.value()[index]}, {a}, [index, shape](const Var& g) {
    return std::vector<Var>{scatter(g, index, shape)};
  });
}

inline Var scatter(const Var& s, std::size_t index, const Shape& shape) {
  std::vector<double> out(numel(shape), 0.0);
  out.at(index) = s.value()[0];
  return detail::make_result(shape, std::move(out), {s},
                             [index](const Var& g) { return std::vector<Var>{select(g, index)}; });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.numel()) throw std::invalid_argument("reshape: element count mismatch");
  Shape orig = a.shape();
  return detail::make_result(std::move(shape), a.value(), {a},
                             [orig](const Var& g) { return std::vector<Var>{reshape(g, orig)}; });
}

Var pad_channels(const Var& a, int c0, int total);

/// Channels [c0, c1) of a C x H x W tensor.
inline Var slice_channels(const Var& a, int c0, int c1) {
  const auto& s = a.shape();
  if (s.size() != 3 || c0 < 0 || c1 > s[0] || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<double> out(a.value().begin() + c0 * plane, a.value().begin() + c1 * plane);
  const int total = s[0];
  return detail::make_result({c1 - c0, s[1], s[2]}, std::move(out), {a}, [c0, total](const Var& g) {
    return std::vector<Var>{pad_channels(g, c0, total)};
  });
}

inline Var pad_channels(const Var& a, int c0, int total) {
  const auto& s = a.shape();
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<double> out(plane * total, 0.0);
  std::copy(a.value().begin(), a.value().end(), out.begin() + c0 * plane);
  const int c1 = c0 + s[0];
  return detail::make_result({total, s[1], s[2]}, std::move(out), {a}, [c0, c1](const Var& g) {
    return std::vector<Var>{slice_channels(g, c0, c1)};
  });
}

Var expand_channels(const Var& a, int channels);

/// Sum over channels: C x H x W -> 1 x H x W.
inline Var reduce_channels(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 3) throw std::invalid_argument("reduce_channels: expected C x H x W");
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<double> out(plane, 0.0);
  for (int c = 0; c < s[0]; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[i] += a.value()[c * plane + i];
  const int channels = s[0];
  return detail::make_result({1, s[1], s[2]}, std::move(out), {a}, [channels](const Var& g) {
    return std::vector<Var>{expand_channels(g, channels)};
  });
}

inline Var expand_channels(const Var& a, int channels) {
  const auto& s = a.shape();
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<double> out(plane * channels);
  for (int c = 0; c < channels; ++c) std::copy(a.value().begin(), a.value().end(), out.begin() + c * plane);
  return detail::make_result({channels, s[1], s[2]}, std::move(out), {a},
                             [](const Var& g) { return std::vector<Var>{reduce_channels(g)}; });
}

Var channel_broadcast(const Var& b, const Shape& shape);

/// Per-channel sum: C x H x W -> C.
inline Var channel_sum(const Var& a) {
  const auto& s = a.shape();
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  std::vector<double> out(s[0], 0.0);
  for (int c = 0; c < s[0]; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c] += a.value()[c * plane + i];
  Shape shape = s;
  return detail::make_result({s[0]}, std::move(out), {a},
                             [shape](const Var& g) { return std::vector<Var>{channel_broadcast(g, shape)}; });
}

inline Var channel_broadcast(const Var& b, const Shape& shape) {
  const std::size_t plane = static_cast<std::size_t>(shape[1]) * shape[2];
  std::vector<double> out(numel(shape));
  for (int c = 0; c < shape[0]; ++c)
    std::fill(out.begin() + c * plane, out.begin() + (c + 1) * plane, b.value()[c]);
  return detail::make_result(shape, std::move(out), {b},
                             [](const Var& g) { return std::vector<Var>{channel_sum(g)}; });
}

inline Var bias_add(const Var& y, const Var& b) { return add(y, channel_broadcast(b, y.shape())); }

// ---------------------------------------------------------------------------
// Fixed sparse linear maps over the spatial plane (resize, smoothing).

struct LinearMap {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  // rows[o] = (input index, weight) pairs
  std::vector<std::vector<std::pair<int, double>>> rows;

  LinearMap transposed() const {
    LinearMap t;
    t.in_h = out_h;
    t.in_w = out_w;
    t.out_h = in_h;
    t.out_w = in_w;
    t.rows.resize(static_cast<std::size_t>(in_h) * in_w);
    for (std::size_t o = 0; o < rows.size(); ++o)
      for (auto [i, w] : rows[o]) t.rows[i].push_back({static_cast<int>(o), w});
    return t;
  }

  void apply(const double* in, double* out) const {
    for (std::size_t o = 0; o < rows.size(); ++o) {
      double s = 0;
      for (auto [i, w] : rows[o]) s += w * in[i];
      out[o] = s;
    }
  }
};

struct LinearMapPair {
  LinearMap fwd, bwd;
  explicit LinearMapPair(LinearMap m) : fwd(std::move(m)), bwd(fwd.transposed()) {}
};

namespace detail {
inline Var spatial_map_impl(const Var& a, std::shared_ptr<const LinearMapPair> maps, bool forward) {
  const LinearMap& m = forward ? maps->fwd : maps->bwd;
  const auto& s = a.shape();
  if (s.size() != 3 || s[1] != m.in_h || s[2] != m.in_w) throw std::invalid_argument("spatial_map: shape mismatch");
  const std::size_t in_plane = static_cast<std::size_t>(m.in_h) * m.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(m.out_h) * m.out_w;
  std::vector<double> out(out_plane * s[0]);
  for (int c = 0; c < s[0]; ++c) m.apply(a.value().data() + c * in_plane, out.data() + c * out_plane);
  return make_result({s[0], m.out_h, m.out_w}, std::move(out), {a}, [maps, forward](const Var& g) {
    return std::vector<Var>{spatial_map_impl(g, maps, !forward)};
  });
}
}  // namespace detail

/// Applies the same spatial linear map to every channel of a C x H x W tensor.
inline Var spatial_map(const Var& a, std::shared_ptr<const LinearMapPair> maps) {
  return detail::spatial_map_impl(a, std::move(maps), true);
}

// ---------------------------------------------------------------------------
// 2-D convolution, square kernels. x: C x H x W, w: O x C x k x k.

struct ConvGeom {
  int stride = 1, pad = 0;
};

inline int conv_out_size(int in, int k, ConvGeom g) { return (in + 2 * g.pad - k) / g.stride + 1; }

namespace kernels {

// Valid output index range [lo, hi) for a tap offset so that the input index stays inside [0, in).
inline std::pair<int, int> valid_range(int out, int in, int tap, ConvGeom g) {
  // input = stride * o + tap - pad
  int lo = 0;
  const int first = g.pad - tap;
  if (first > 0) lo = (first + g.stride - 1) / g.stride;
  int hi = out;
  // need stride*o + tap - pad <= in - 1
  const int lim = in - 1 - tap + g.pad;
  if (lim < 0) return {0, 0};
  hi = std::min(hi, lim / g.stride + 1);
  return {lo, std::max(lo, hi)};
}

inline void conv_forward(const double* x, int C, int H, int W, const double* w, int O, int k, ConvGeom g,
                         double* y, int Ho, int Wo) {
  std::fill(y, y + static_cast<std::size_t>(O) * Ho * Wo, 0.0);
  for (int o = 0; o < O; ++o) {
    double* yo = y + static_cast<std::size_t>(o) * Ho * Wo;
    for (int c = 0; c < C; ++c) {
      const double* xc = x + static_cast<std::size_t>(c) * H * W;
      for (int di = 0; di < k; ++di) {
        auto [i0, i1] = valid_range(Ho, H, di, g);
        for (int dj = 0; dj < k; ++dj) {
          const double wv = w[((static_cast<std::size_t>(o) * C + c) * k + di) * k + dj];
          if (wv == 0.0) continue;
          auto [j0, j1] = valid_range(Wo, W, dj, g);
          for (int i = i0; i < i1; ++i) {
            const double* xr = xc + static_cast<std::size_t>(g.stride * i + di - g.pad) * W + (dj - g.pad);
            double* yr = yo + static_cast<std::size_t>(i) * Wo;
            if (g.stride == 1) {
              for (int j = j0; j < j1; ++j) yr[j] += wv * xr[j];
            } else {
              for (int j = j0; j < j1; ++j) yr[j] += wv * xr[g.stride * j];
            }
          }
        }
      }
    }
  }
}

inline std::size_t count_nonzero(const double* p, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < n; ++i) c += p[i] != 0.0;
  return c;
}

inline void conv_input_grad(const double* gy, int O, int Ho, int Wo, const double* w, int C, int k, ConvGeom g,
                            double* gx, int H, int W) {
  std::fill(gx, gx + static_cast<std::size_t>(C) * H * W, 0.0);
  const std::size_t ny = static_cast<std::size_t>(O) * Ho * Wo;
  if (count_nonzero(gy, ny) * 8 < ny) {
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const double gv = gy[(static_cast<std::size_t>(o) * Ho + i) * Wo + j];
          if (gv == 0.0) continue;
          for (int c = 0; c < C; ++c)
            for (int di = 0; di < k; ++di) {
              const int xi = g.stride * i + di - g.pad;
              if (xi < 0 || xi >= H) continue;
              for (int dj = 0; dj < k; ++dj) {
                const int xj = g.stride * j + dj - g.pad;
                if (xj < 0 || xj >= W) continue;
                gx[(static_cast<std::size_t>(c) * H + xi) * W + xj] +=
                    gv * w[((static_cast<std::size_t>(o) * C + c) * k + di) * k + dj];
              }
            }
        }
    return;
  }
  for (int o = 0; o < O; ++o) {
    const double* go = gy + static_cast<std::size_t>(o) * Ho * Wo;
    for (int c = 0; c < C; ++c) {
      double* gxc = gx + static_cast<std::size_t>(c) * H * W;
      for (int di = 0; di < k; ++di) {
        auto [i0, i1] = valid_range(Ho, H, di, g);
        for (int dj = 0; dj < k; ++dj) {
          const double wv = w[((static_cast<std::size_t>(o) * C + c) * k + di) * k + dj];
          if (wv == 0.0) continue;
          auto [j0, j1] = valid_range(Wo, W, dj, g);
          for (int i = i0; i < i1; ++i) {
            double* xr = gxc + static_cast<std::size_t>(g.stride * i + di - g.pad) * W + (dj - g.pad);
            const double* gr = go + static_cast<std::size_t>(i) * Wo;
            if (g.stride == 1) {
              for (int j = j0; j < j1; ++j) xr[j] += wv * gr[j];
            } else {
              for (int j = j0; j < j1; ++j) xr[g.stride * j] += wv * gr[j];
            }
          }
        }
      }
    }
  }
}

inline void conv_weight_grad(const double* x, int C, int H, int W, const double* gy, int O, int Ho, int Wo, int k,
                             ConvGeom g, double* gw) {
  std::fill(gw, gw + static_cast<std::size_t>(O) * C * k * k, 0.0);
  const std::size_t ny = static_cast<std::size_t>(O) * Ho * Wo;
  if (count_nonzero(gy, ny) * 8 < ny) {
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const double gv = gy[(static_cast<std::size_t>(o) * Ho + i) * Wo + j];
          if (gv == 0.0) continue;
          for (int c = 0; c < C; ++c)
            for (int di = 0; di < k; ++di) {
              const int xi = g.stride * i + di - g.pad;
              if (xi < 0 || xi >= H) continue;
              for (int dj = 0; dj < k; ++dj) {
                const int xj = g.stride * j + dj - g.pad;
                if (xj < 0 || xj >= W) continue;
                gw[((static_cast<std::size_t>(o) * C + c) * k + di) * k + dj] +=
                    gv * x[(static_cast<std::size_t>(c) * H + xi) * W + xj];
              }
            }
        }
    return;
  }
  for (int o = 0; o < O; ++o) {
    const double* go = gy + static_cast<std::size_t>(o) * Ho * Wo;
    for (int c = 0; c < C; ++c) {
      const double* xc = x + static_cast<std::size_t>(c) * H * W;
      for (int di = 0; di < k; ++di) {
        auto [i0, i1] = valid_range(Ho, H, di, g);
        for (int dj = 0; dj < k; ++dj) {
          auto [j0, j1] = valid_range(Wo, W, dj, g);
          double acc = 0;
          for (int i = i0; i < i1; ++i) {
            const double* xr = xc + static_cast<std::size_t>(g.stride * i + di - g.pad) * W + (dj - g.pad);
            const double* gr = go + static_cast<std::size_t>(i) * Wo;
            if (g.stride == 1) {
              for (int j = j0; j < j1; ++j) acc += gr[j] * xr[j];
            } else {
              for (int j = j0; j < j1; ++j) acc += gr[j] * xr[g.stride * j];
            }
          }
          gw[((static_cast<std::size_t>(o) * C + c) * k + di) * k + dj] = acc;
        }
      }
    }
  }
}

}  // namespace kernels

Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, ConvGeom g);
Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, ConvGeom g);

inline Var conv2d(const Var& x, const Var& w, ConvGeom g) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3])
    throw std::invalid_argument("conv2d: incompatible shapes");
  const int k = ws[2];
  const int Ho = conv_out_size(xs[1], k, g), Wo = conv_out_size(xs[2], k, g);
  std::vector<double> out(static_cast<std::size_t>(ws[0]) * Ho * Wo);
  kernels::conv_forward(x.value().data(), xs[0], xs[1], xs[2], w.value().data(), ws[0], k, g, out.data(), Ho, Wo);
  Shape x_shape = xs, w_shape = ws;
  return detail::make_result({ws[0], Ho, Wo}, std::move(out), {x, w}, [x, w, x_shape, w_shape, g](const Var& gy) {
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, w, x_shape, g) : Var(),
                            w.requires_grad() ? conv2d_weight_grad(x, gy, w_shape, g) : Var()};
  });
}

inline Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, ConvGeom g) {
  const auto& ys = gy.shape();
  const auto& ws = w.shape();
  const int k = ws[2];
  std::vector<double> out(numel(x_shape));
  kernels::conv_input_grad(gy.value().data(), ys[0], ys[1], ys[2], w.value().data(), ws[1], k,
                           g, out.data(), x_shape[1], x_shape[2]);
  Shape w_shape = ws;
  return detail::make_result(x_shape, std::move(out), {gy, w}, [gy, w, w_shape, g](const Var& gg) {
    // d<gg, B(gy, w)>/dgy = conv(gg, w);  d/dw = weight_grad(gg, gy)
    return std::vector<Var>{gy.requires_grad() ? conv2d(gg, w, g) : Var(),
                            w.requires_grad() ? conv2d_weight_grad(gg, gy, w_shape, g) : Var()};
  });
}

inline Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, ConvGeom g) {
  const auto& xs = x.shape();
  const auto& ys = gy.shape();
  std::vector<double> out(numel(w_shape));
  kernels::conv_weight_grad(x.value().data(), xs[0], xs[1], xs[2], gy.value().data(), ys[0], ys[1], ys[2],
                            w_shape[2], g, out.data());
  Shape x_shape = xs;
  return detail::make_result(w_shape, std::move(out), {x, gy}, [x, gy, x_shape, g](const Var& gg) {
    // d<gg, W(x, gy)>/dx = input_grad(gy, gg);  d/dgy = conv(x, gg)
    return std::vector<Var>{x.requires_grad() ? conv2d_input_grad(gy, gg, x_shape, g) : Var(),
                            gy.requires_grad() ? conv2d(x, gg, g) : Var()};
  });
}

// ---------------------------------------------------------------------------
// Gradient computation

/// Gradients of a scalar `y` w.r.t. `xs`. With create_graph the returned
/// gradients are themselves differentiable. Propagation stops at the nodes in
/// `xs`; none of them may be an ancestor of another.
inline std::vector<Var> grad(const Var& y, const std::vector<Var>& xs, bool create_graph = false) {
  if (y.numel() != 1) throw std::invalid_argument("grad: output must be a scalar");
  EnableGradGuard mode(create_graph);
  std::unordered_set<Node*> stop;
  for (const auto& x : xs) stop.insert(x.get());

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (y.requires_grad()) {
    stack.push_back({y.get(), 0});
    seen.insert(y.get());
  }
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size() && !stop.count(n)) {
      Node* child = n->inputs[idx++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> grads;
  if (y.requires_grad()) grads[y.get()] = tensor(y.shape(), {1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto gi = grads.find(n);
    if (gi == grads.end() || !n->backward || stop.count(n)) continue;
    const Var g = gi->second;
    std::vector<Var> in_grads = n->backward(g);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const Var& in = n->inputs[i];
      if (!in.requires_grad() || !in_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(in.get(), in_grads[i]);
      if (!inserted) slot->second = add(slot->second, in_grads[i]);
    }
    grads.erase(n);
  }

  std::vector<Var> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    auto it = grads.find(x.get());
    out.push_back(it != grads.end() ? it->second : zeros(x.shape()));
  }
  return out;
}

}  // namespace odamkit::ad
