#pragma once

// Instance-specific heat maps from activation/gradient pairs, plus the
// class-level Grad-CAM baseline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "odamkit/core.hpp"

namespace odamkit {

/// K x H x W feature tensor, channel-major.
struct FeatureTensor {
  int channels = 0, height = 0, width = 0;
  std::vector<double> data;

  FeatureTensor() = default;
  FeatureTensor(int k, int h, int w, double fill = 0.0)
      : channels(k), height(h), width(w), data(static_cast<std::size_t>(k) * h * w, fill) {}

  double& at(int k, int r, int c) { return data[(static_cast<std::size_t>(k) * height + r) * width + c]; }
  double at(int k, int r, int c) const { return data[(static_cast<std::size_t>(k) * height + r) * width + c]; }
  std::span<const double> plane(int k) const {
    return {data.data() + static_cast<std::size_t>(k) * height * width, static_cast<std::size_t>(height) * width};
  }
  bool same_shape(const FeatureTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

enum class TargetKind { class_score, box_x1, box_y1, box_x2, box_y2, custom };

inline const char* to_string(TargetKind k) {
  switch (k) {
    case TargetKind::class_score: return "class";
    case TargetKind::box_x1: return "x1";
    case TargetKind::box_y1: return "y1";
    case TargetKind::box_x2: return "x2";
    case TargetKind::box_y2: return "y2";
    case TargetKind::custom: return "custom";
  }
  return "?";
}

/// One scalar output of one detection. For `custom`, `custom_channel` picks a
/// raw head output channel at the detection's location.
struct ExplanationTarget {
  TargetKind kind = TargetKind::class_score;
  std::int64_t detection_id = 0;
  int custom_channel = -1;
};

struct ActivationGradientPair {
  FeatureTensor activations;
  FeatureTensor gradients;  // dY/dA, same shape
  std::string layer_name;
  double stride = 1.0;

  void validate() const {
    if (!activations.same_shape(gradients)) throw std::invalid_argument("activation and gradient shapes differ");
    if (activations.channels <= 0 || activations.height <= 0 || activations.width <= 0)
      throw std::invalid_argument("empty activation tensor");
    if (!(stride > 0)) throw std::invalid_argument("stride must be positive");
  }
};

struct SmoothingConfig {
  enum class Mode { gaussian, none } mode = Mode::gaussian;
  double sigma_scale = 8.0;
  double sigma_min = 1.0;
  double truncate = 3.0;
};

/// How gradient direction and rectification are handled. The default is the
/// plain rule: signed gradient, ReLU on the weighted sum.
enum class GradientDirection { positive, negative };
enum class Rectifier { relu, abs };

struct OdamOptions {
  GradientDirection direction = GradientDirection::positive;
  Rectifier rectifier = Rectifier::relu;
};

/// Abstract differentiable detector. Implementations are not reentrant.
class GradientProvider {
 public:
  virtual ~GradientProvider() = default;
  /// Thresholded predictions used both for explanation and for re-matching.
  virtual std::vector<Detection> detect(const Image& image) = 0;
  /// Activations at the configured layer and dY/dA for one target.
  virtual ActivationGradientPair gradients(const Image& image, const ExplanationTarget& target) = 0;
  virtual std::string layer_name() const = 0;
};

// ---------------------------------------------------------------------------
// Smoothing

inline double adaptive_sigma(const Detection& det, double stride, const SmoothingConfig& cfg) {
  const double wf = det.bbox.width() / stride;
  const double hf = det.bbox.height() / stride;
  return std::max(cfg.sigma_min, std::sqrt(wf * hf) / cfg.sigma_scale);
}

/// Symmetric reflection (edge sample repeated), periodic for any offset.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

inline std::vector<double> gaussian_kernel_1d(double sigma, double truncate) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian sigma must be positive");
  const int radius = static_cast<int>(std::ceil(truncate * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    s += k[i + radius];
  }
  for (double& v : k) v /= s;
  return k;
}

/// Separable Gaussian blur of an h x w plane, reflect padding.
inline std::vector<double> gaussian_smooth(std::span<const double> plane, int h, int w, double sigma,
                                           double truncate) {
  const auto k = gaussian_kernel_1d(sigma, truncate);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(plane.size(), 0.0), out(plane.size(), 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int t = -radius; t <= radius; ++t) s += k[t + radius] * plane[r * w + reflect_index(c + t, w)];
      tmp[r * w + c] = s;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int t = -radius; t <= radius; ++t) s += k[t + radius] * tmp[reflect_index(r + t, h) * w + c];
      out[r * w + c] = s;
    }
  return out;
}

inline HeatMap gaussian_smooth(const HeatMap& grid, double sigma, double truncate) {
  return HeatMap(grid.height(), grid.width(),
                 gaussian_smooth(grid.values(), grid.height(), grid.width(), sigma, truncate), grid.space());
}

// ---------------------------------------------------------------------------
// Heat maps

namespace detail {
inline double rectify(double v, Rectifier r) { return r == Rectifier::relu ? std::max(0.0, v) : std::abs(v); }
}  // namespace detail

/// Pixel-weighted map: per channel w_k = smooth(dY/dA_k), H = rectify(sum_k w_k * A_k).
/// `sigma <= 0` disables smoothing.
inline HeatMap odam_heatmap(const ActivationGradientPair& pair, double sigma, double truncate = 3.0,
                            const OdamOptions& opts = {}) {
  pair.validate();
  const auto& A = pair.activations;
  const int h = A.height, w = A.width;
  const double sign = opts.direction == GradientDirection::positive ? 1.0 : -1.0;
  std::vector<double> acc(static_cast<std::size_t>(h) * w, 0.0);
  for (int k = 0; k < A.channels; ++k) {
    auto g = pair.gradients.plane(k);
    std::vector<double> weights = sigma > 0 ? gaussian_smooth(g, h, w, sigma, truncate)
                                            : std::vector<double>(g.begin(), g.end());
    auto a = A.plane(k);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += sign * weights[i] * a[i];
  }
  for (double& v : acc) v = detail::rectify(v, opts.rectifier);
  return HeatMap(h, w, std::move(acc), Space::feature);
}

/// Convenience overload choosing sigma adaptively from the detection box.
inline HeatMap odam_heatmap(const ActivationGradientPair& pair, const Detection& det, const SmoothingConfig& cfg,
                            const OdamOptions& opts = {}) {
  const double sigma = cfg.mode == SmoothingConfig::Mode::none ? 0.0 : adaptive_sigma(det, pair.stride, cfg);
  return odam_heatmap(pair, sigma, cfg.truncate, opts);
}

/// Channel weights from globally averaged gradients.
inline HeatMap gradcam_heatmap(const ActivationGradientPair& pair) {
  pair.validate();
  const auto& A = pair.activations;
  const std::size_t plane = static_cast<std::size_t>(A.height) * A.width;
  std::vector<double> acc(plane, 0.0);
  for (int k = 0; k < A.channels; ++k) {
    double alpha = 0;
    for (double g : pair.gradients.plane(k)) alpha += g;
    alpha /= static_cast<double>(plane);
    auto a = A.plane(k);
    for (std::size_t i = 0; i < plane; ++i) acc[i] += alpha * a[i];
  }
  for (double& v : acc) v = std::max(0.0, v);
  return HeatMap(A.height, A.width, std::move(acc), Space::feature);
}

/// Element-wise maximum; typically over the class and four box-coordinate maps.
inline HeatMap combined_heatmap(std::span<const HeatMap> maps) {
  if (maps.empty()) throw std::invalid_argument("combined_heatmap needs at least one map");
  HeatMap out = maps[0];
  for (std::size_t m = 1; m < maps.size(); ++m) {
    if (!maps[m].same_shape(out) || maps[m].space() != out.space())
      throw std::invalid_argument("combined_heatmap: shape or space mismatch");
    auto src = maps[m].values();
    auto dst = out.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::max(dst[i], src[i]);
  }
  return out;
}

inline HeatMap upsample_to_image(const HeatMap& h, int image_w, int image_h) {
  if (h.space() != Space::feature) throw std::invalid_argument("upsample_to_image expects a feature-space map");
  HeatMap out = resize_heatmap(h, image_h, image_w);
  out.set_space(Space::image);
  return out;
}

// ---------------------------------------------------------------------------
// Model parameter randomization check

struct SanityProbe {
  const Image* image = nullptr;
  ExplanationTarget target;
  Detection detection;  // used for the adaptive kernel size
};

/// Mean normalized correlation between image-space heat maps of two
/// providers for the same targets. Calls are serialized per provider.
inline double sanity_randomization(GradientProvider& trained, GradientProvider& randomized,
                                   std::span<const SanityProbe> probes, const SmoothingConfig& cfg = {}) {
  if (probes.empty()) return 0.0;
  double total = 0;
  for (const auto& p : probes) {
    const Image& img = *p.image;
    auto pa = trained.gradients(img, p.target);
    auto pb = randomized.gradients(img, p.target);
    auto ha = upsample_to_image(odam_heatmap(pa, p.detection, cfg), img.width, img.height);
    auto hb = upsample_to_image(odam_heatmap(pb, p.detection, cfg), img.width, img.height);
    total += normalized_correlation(ha.values(), hb.values());
  }
  return total / static_cast<double>(probes.size());
}

// ---------------------------------------------------------------------------
// Overlay rendering

/// Jet colormap, v in [0, 1].
inline std::array<double, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ramp = [](double x) { return std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0); };
  return {ramp(v - 0.75), ramp(v - 0.5), ramp(v - 0.25)};
}

/// Heat map (any space, resized to the image) blended over the image at 0.5.
inline Image render_overlay(const Image& image, const HeatMap& h, double alpha = 0.5) {
  HeatMap m = normalize_heatmap(resize_heatmap(h, image.height, image.width));
  Image out(image.width, image.height, 3);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const auto col = jet(m(r, c));
      for (int ch = 0; ch < 3; ++ch) {
        const double base = image.at(std::min(ch, image.channels - 1), r, c);
        out.at(ch, r, c) = (1 - alpha) * base + alpha * col[ch];
      }
    }
  return out;
}

}  // namespace odamkit
