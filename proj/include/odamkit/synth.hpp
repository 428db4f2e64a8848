#pragma once

// Synthetic crowded-shapes dataset: circles, squares and triangles blended
// over a noisy background, with exact per-object masks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "odamkit/core.hpp"

namespace odamkit {

/// Portable random source: mt19937_64 bits with fixed conversions, so
/// datasets are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }
  std::uint64_t next() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0;
  bool has_spare_ = false;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
inline constexpr int kNumShapeClasses = 3;

struct SynthConfig {
  int image_w = 128, image_h = 128;
  int min_shapes = 3, max_shapes = 6;
  double min_size = 24, max_size = 44;
  double overlap_factor = 0.3;
  double noise_std = 0.03;
  double same_class_fraction = 0.5;  // images forced to hold >= 2 instances of one class
  double alpha = 0.75;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_w <= 0 || image_h <= 0) throw std::invalid_argument("image size must be positive");
    if (min_shapes < 1 || max_shapes < min_shapes) throw std::invalid_argument("shape counts must be positive");
    if (!(overlap_factor >= 0 && overlap_factor <= 1)) throw std::invalid_argument("overlap_factor must lie in [0,1]");
    if (!(min_size > 2 && max_size >= min_size)) throw std::invalid_argument("bad shape size range");
    if (max_size >= std::min(image_w, image_h)) throw std::invalid_argument("shapes larger than the image");
    if (noise_std < 0) throw std::invalid_argument("noise_std must be non-negative");
  }
};

struct Sample {
  Image image;
  ImageAnnotations annotations;
};

namespace detail {

struct ShapeSpec {
  ShapeKind kind;
  double cx, cy, size;
  std::array<double, 3> color;
};

inline bool shape_contains(const ShapeSpec& s, double px, double py) {
  const double h = s.size / 2;
  switch (s.kind) {
    case ShapeKind::circle: {
      const double dx = px - s.cx, dy = py - s.cy;
      return dx * dx + dy * dy <= h * h;
    }
    case ShapeKind::square:
      return std::abs(px - s.cx) <= h && std::abs(py - s.cy) <= h;
    case ShapeKind::triangle: {
      // apex up, base at the bottom
      const double top = s.cy - h, bottom = s.cy + h;
      if (py < top || py > bottom) return false;
      const double half = h * (py - top) / s.size;
      return std::abs(px - s.cx) <= half;
    }
  }
  return false;
}

inline BBox nominal_box(const ShapeSpec& s) {
  const double h = s.size / 2;
  return {s.cx - h, s.cy - h, s.cx + h, s.cy + h};
}

/// Tight box of the rasterized shape (pixel centers), in pixel-edge coordinates.
inline std::optional<BBox> raster_box(const ShapeSpec& s, int w, int h) {
  const BBox nb = nominal_box(s);
  int r0 = h, r1 = -1, c0 = w, c1 = -1;
  for (int r = std::max(0, int(nb.y1) - 1); r < std::min(h, int(nb.y2) + 2); ++r)
    for (int c = std::max(0, int(nb.x1) - 1); c < std::min(w, int(nb.x2) + 2); ++c)
      if (shape_contains(s, c + 0.5, r + 0.5)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return std::nullopt;
  return BBox{double(c0), double(r0), double(c1 + 1), double(r1 + 1)};
}

}  // namespace detail

/// One image, fully determined by (cfg, index).
inline Sample generate_sample(const SynthConfig& cfg, std::int64_t index) {
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const int n = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);

  std::vector<int> classes(n);
  for (int& c : classes) c = rng.uniform_int(0, kNumShapeClasses - 1);
  if (n >= 2 && rng.uniform() < cfg.same_class_fraction) {
    const int c = rng.uniform_int(0, kNumShapeClasses - 1);
    classes[0] = classes[1] = c;
  }

  const double bg = rng.uniform(0.05, 0.95);
  std::vector<detail::ShapeSpec> shapes;
  std::vector<BBox> boxes;
  for (int s = 0; s < n; ++s) {
    detail::ShapeSpec spec{static_cast<ShapeKind>(classes[s]), 0, 0, 0, {0, 0, 0}};
    bool placed = false;
    const bool crowd = !shapes.empty() && rng.uniform() < cfg.overlap_factor;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      if (crowd && attempt < 100) {
        const auto& partner = shapes[rng.uniform_int(0, static_cast<int>(shapes.size()) - 1)];
        spec.size = std::clamp(partner.size * rng.uniform(0.9, 1.1), cfg.min_size, cfg.max_size);
        const double f = rng.uniform(0.08, 0.18) * spec.size;
        spec.cx = partner.cx + (rng.uniform() < 0.5 ? -f : f);
        spec.cy = partner.cy + (rng.uniform() < 0.5 ? -f : f);
      } else {
        spec.size = rng.uniform(cfg.min_size, cfg.max_size);
        spec.cx = rng.uniform(spec.size / 2 + 1, cfg.image_w - spec.size / 2 - 1);
        spec.cy = rng.uniform(spec.size / 2 + 1, cfg.image_h - spec.size / 2 - 1);
      }
      const BBox nb = detail::nominal_box(spec);
      if (nb.x1 < 1 || nb.y1 < 1 || nb.x2 > cfg.image_w - 1 || nb.y2 > cfg.image_h - 1) continue;
      const auto b = detail::raster_box(spec, cfg.image_w, cfg.image_h);
      if (!b) continue;
      bool ok = true;
      for (std::size_t k = 0; k < shapes.size(); ++k) {
        const auto& o = shapes[k];
        const double v = iou(*b, boxes[k]);
        // crowd partners may overlap heavily, everything else stays apart
        if ((!crowd || attempt >= 100) && v >= 0.1) ok = false;
        if (v > 0.8) ok = false;
        if (std::abs(o.cx - spec.cx) < 2 && std::abs(o.cy - spec.cy) < 2) ok = false;
      }
      placed = ok;
    }
    if (!placed) continue;
    boxes.push_back(*detail::raster_box(spec, cfg.image_w, cfg.image_h));
    // color far enough from the background
    for (int tries = 0; tries < 50; ++tries) {
      for (double& ch : spec.color) ch = rng.uniform();
      const double lum = (spec.color[0] + spec.color[1] + spec.color[2]) / 3;
      if (std::abs(lum - bg) > 0.25) break;
    }
    shapes.push_back(spec);
  }

  Sample out;
  out.image = Image(cfg.image_w, cfg.image_h, 3, 0.0);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < cfg.image_h; ++r)
      for (int c = 0; c < cfg.image_w; ++c) out.image.at(ch, r, c) = bg;

  out.annotations.image_id = index;
  out.annotations.width = cfg.image_w;
  out.annotations.height = cfg.image_h;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    const auto& spec = shapes[s];
    Mask m(cfg.image_h, cfg.image_w);
    for (int r = 0; r < cfg.image_h; ++r)
      for (int c = 0; c < cfg.image_w; ++c)
        if (detail::shape_contains(spec, c + 0.5, r + 0.5)) {
          m.set(r, c);
          for (int ch = 0; ch < 3; ++ch) {
            double& px = out.image.at(ch, r, c);
            px = (1 - cfg.alpha) * px + cfg.alpha * spec.color[ch];
          }
        }
    auto box = m.bounding_box();
    if (!box) continue;
    GroundTruthObject obj;
    obj.bbox = *box;
    obj.mask = std::move(m);
    obj.class_id = static_cast<int>(spec.kind);
    obj.object_id = static_cast<std::int64_t>(s);
    out.annotations.objects.push_back(std::move(obj));
  }

  if (cfg.noise_std > 0)
    for (double& v : out.image.data) v = std::clamp(v + cfg.noise_std * rng.normal(), 0.0, 1.0);
  return out;
}

inline std::vector<Sample> generate_dataset(const SynthConfig& cfg, int n_images, std::int64_t first_index = 0) {
  cfg.validate();
  if (n_images < 0) throw std::invalid_argument("n_images must be non-negative");
  std::vector<Sample> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) out.push_back(generate_sample(cfg, first_index + i));
  return out;
}

}  // namespace odamkit
