#pragma once

// Geometry and heat-map primitives shared by every odamkit module.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace odamkit {

/// Axis-aligned box in image pixel coordinates, (x1, y1) top-left.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 1, y2 = 1;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 < x2 && y1 < y2;
  }

  /// Pixel (row, col) belongs to the box when its center does.
  bool contains_pixel(int row, int col) const {
    const double px = col + 0.5, py = row + 0.5;
    return px >= x1 && px <= x2 && py >= y1 && py <= y2;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline BBox make_box(double x1, double y1, double x2, double y2) {
  BBox b{x1, y1, x2, y2};
  if (!b.valid()) throw std::invalid_argument("invalid box: need finite x1<x2, y1<y2");
  return b;
}

struct Detection {
  BBox bbox;
  int class_id = 0;
  double score = 0;
  std::int64_t id = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

enum class Space { feature, image };

inline const char* to_string(Space s) { return s == Space::feature ? "feature" : "image"; }

inline Space space_from_string(const std::string& s) {
  if (s == "feature") return Space::feature;
  if (s == "image") return Space::image;
  throw std::invalid_argument("unknown heat-map space: " + s);
}

/// Dense row-major 2-D importance grid.
class HeatMap {
 public:
  HeatMap() = default;
  HeatMap(int height, int width, Space space = Space::feature, double fill = 0.0)
      : h_(height), w_(width), space_(space) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("heat map dimensions must be positive");
    v_.assign(static_cast<std::size_t>(height) * width, fill);
  }
  HeatMap(int height, int width, std::vector<double> values, Space space = Space::feature)
      : h_(height), w_(width), space_(space), v_(std::move(values)) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("heat map dimensions must be positive");
    if (v_.size() != static_cast<std::size_t>(height) * width)
      throw std::invalid_argument("heat map value count does not match shape");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return v_.size(); }
  Space space() const { return space_; }
  void set_space(Space s) { space_ = s; }

  double operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * w_ + c]; }
  double& operator()(int r, int c) { return v_[static_cast<std::size_t>(r) * w_ + c]; }

  std::span<const double> values() const { return v_; }
  std::span<double> values() { return v_; }

  double max() const { return v_.empty() ? 0.0 : *std::max_element(v_.begin(), v_.end()); }
  double min() const { return v_.empty() ? 0.0 : *std::min_element(v_.begin(), v_.end()); }
  double sum() const {
    double s = 0;
    for (double x : v_) s += x;
    return s;
  }

  bool same_shape(const HeatMap& o) const { return h_ == o.h_ && w_ == o.w_; }

  friend bool operator==(const HeatMap&, const HeatMap&) = default;

 private:
  int h_ = 0, w_ = 0;
  Space space_ = Space::feature;
  std::vector<double> v_;
};

/// Binary mask at image resolution, row-major.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width) : h_(height), w_(width), v_(static_cast<std::size_t>(height) * width, 0) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("mask dimensions must be positive");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  bool operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * w_ + c] != 0; }
  void set(int r, int c, bool on = true) { v_[static_cast<std::size_t>(r) * w_ + c] = on ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(v_.begin(), v_.end(), 1)); }
  std::span<const std::uint8_t> data() const { return v_; }

  /// Tight bounding box of set pixels in pixel-edge coordinates; nullopt when empty.
  std::optional<BBox> bounding_box() const {
    int r0 = h_, r1 = -1, c0 = w_, c1 = -1;
    for (int r = 0; r < h_; ++r)
      for (int c = 0; c < w_; ++c)
        if ((*this)(r, c)) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
    if (r1 < 0) return std::nullopt;
    return BBox{double(c0), double(r0), double(c1 + 1), double(r1 + 1)};
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> v_;
};

struct GroundTruthObject {
  BBox bbox;
  std::optional<Mask> mask;
  int class_id = 0;
  std::int64_t object_id = 0;
};

struct ImageAnnotations {
  std::int64_t image_id = 0;
  int width = 0, height = 0;
  std::vector<GroundTruthObject> objects;

  /// Checks boxes lie inside the image and masks are image-sized and non-empty.
  void validate() const {
    for (const auto& o : objects) {
      if (!o.bbox.valid()) throw std::invalid_argument("annotation has an invalid box");
      if (o.bbox.x1 < 0 || o.bbox.y1 < 0 || o.bbox.x2 > width || o.bbox.y2 > height)
        throw std::invalid_argument("annotation box outside image bounds");
      if (o.mask) {
        if (o.mask->height() != height || o.mask->width() != width)
          throw std::invalid_argument("mask dimensions differ from image");
        if (o.mask->count() == 0) throw std::invalid_argument("mask has no set pixel");
      }
    }
  }
};

/// Planar RGB image with values in [0, 1].
struct Image {
  int width = 0, height = 0, channels = 3;
  std::vector<double> data;  // channels x height x width

  Image() = default;
  Image(int w, int h, int c = 3, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int ch, int r, int c) { return data[(static_cast<std::size_t>(ch) * height + r) * width + c]; }
  double at(int ch, int r, int c) const { return data[(static_cast<std::size_t>(ch) * height + r) * width + c]; }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }

  friend bool operator==(const Image&, const Image&) = default;
};

// ---------------------------------------------------------------------------

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

namespace detail {

// Half-pixel-center source coordinate with edge clamping.
struct LinearTap {
  int i0, i1;
  double w1;  // weight on i1; i0 gets 1 - w1
};

inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    int i0 = static_cast<int>(std::floor(src));
    int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize (half-pixel centers, clamped edges). Preserves space tag.
inline HeatMap resize_heatmap(const HeatMap& h, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize target must be at least 1x1");
  if (out_h == h.height() && out_w == h.width()) return h;
  const auto ry = detail::linear_taps(h.height(), out_h);
  const auto rx = detail::linear_taps(h.width(), out_w);
  HeatMap out(out_h, out_w, h.space());
  for (int r = 0; r < out_h; ++r) {
    const auto& ty = ry[r];
    for (int c = 0; c < out_w; ++c) {
      const auto& tx = rx[c];
      const double top = h(ty.i0, tx.i0) * (1 - tx.w1) + h(ty.i0, tx.i1) * tx.w1;
      const double bot = h(ty.i1, tx.i0) * (1 - tx.w1) + h(ty.i1, tx.i1) * tx.w1;
      out(r, c) = top * (1 - ty.w1) + bot * ty.w1;
    }
  }
  return out;
}

inline HeatMap normalize_heatmap(const HeatMap& h) {
  const double m = h.max();
  if (!(m > 0)) return h;
  HeatMap out = h;
  for (double& v : out.values()) v /= m;
  return out;
}

inline std::vector<double> vectorize(const HeatMap& h) {
  return {h.values().begin(), h.values().end()};
}

inline HeatMap reshape(std::span<const double> v, int height, int width, Space space = Space::feature) {
  return HeatMap(height, width, std::vector<double>(v.begin(), v.end()), space);
}

/// Cosine similarity of raw vectors; 0 when either norm is 0.
inline double normalized_correlation(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("correlation of vectors with different lengths");
  if (u.empty()) throw std::invalid_argument("correlation of empty vectors");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0 || nv == 0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

/// Membership test used by the localization metrics: either a box or a mask.
class Region {
 public:
  explicit Region(BBox box) : box_(box) {}
  explicit Region(const Mask& mask) : mask_(&mask) {}

  bool contains(int row, int col) const {
    if (mask_) return (*mask_)(row, col);
    return box_.contains_pixel(row, col);
  }

 private:
  BBox box_{};
  const Mask* mask_ = nullptr;
};

}  // namespace odamkit
