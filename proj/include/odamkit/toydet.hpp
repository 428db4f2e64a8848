#pragma once

// Tiny anchor-free detector on the autograd engine: strided conv backbone,
// one neck layer, a conv head and a 1x1 predictor emitting per-location class
// logits plus four log-distances (l, t, r, b) to the box edges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "odamkit/autograd.hpp"
#include "odamkit/core.hpp"
#include "odamkit/explain.hpp"
#include "odamkit/nms.hpp"
#include "odamkit/synth.hpp"
#include "odamkit/train.hpp"

namespace odamkit {

struct ToyDetectorConfig {
  std::vector<int> backbone_channels{8, 16, 32};
  int neck_channels = 32;
  int head_depth = 3;
  int head_channels = 32;
  int num_classes = kNumShapeClasses;
  int image_w = 128, image_h = 128;
  double score_thresh = 0.05;
  int max_detections = 100;
  int max_candidates = 1000;
  double nms_iou = 0.5;

  int stride() const { return 1 << backbone_channels.size(); }
  int feat_w() const { return image_w / stride(); }
  int feat_h() const { return image_h / stride(); }
  int num_layers() const { return static_cast<int>(backbone_channels.size()) + 1 + head_depth; }
  int out_channels() const { return num_classes + 4; }

  void validate() const {
    if (backbone_channels.empty()) throw std::invalid_argument("backbone needs at least one stage");
    for (int c : backbone_channels)
      if (c <= 0) throw std::invalid_argument("channel counts must be positive");
    if (neck_channels <= 0 || head_channels <= 0 || head_depth < 0 || num_classes <= 0)
      throw std::invalid_argument("bad detector widths");
    if (image_w <= 0 || image_h <= 0 || image_w % stride() || image_h % stride())
      throw std::invalid_argument("stride must divide the image size");
    if (!(score_thresh >= 0 && score_thresh < 1)) throw std::invalid_argument("score_thresh must lie in [0, 1)");
    if (max_detections < 1 || max_candidates < 1) throw std::invalid_argument("detection limits must be positive");
  }
};

/// Location and class encoded in a detection id.
struct DetectionIndex {
  int row = 0, col = 0, class_id = 0;
};

class ToyDetector {
 public:
  struct Forward {
    std::vector<ad::Var> acts;  // activations of layers [start+1, num_layers)
    ad::Var out;                // (C + 4) x Hf x Wf
  };

  explicit ToyDetector(ToyDetectorConfig cfg, std::uint64_t init_seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    randomize(init_seed);
  }

  const ToyDetectorConfig& config() const { return cfg_; }
  void set_score_thresh(double t) {
    if (!(t >= 0 && t < 1)) throw std::invalid_argument("score_thresh must lie in [0, 1)");
    cfg_.score_thresh = t;
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (std::size_t s = 0; s < cfg_.backbone_channels.size(); ++s) names.push_back("stage" + std::to_string(s + 1));
    names.push_back("neck");
    for (int h = 0; h < cfg_.head_depth; ++h) names.push_back("head" + std::to_string(h + 1));
    return names;
  }

  int layer_index(const std::string& name) const {
    const auto names = layer_names();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::invalid_argument("unknown layer: " + name);
    return static_cast<int>(it - names.begin());
  }

  double layer_stride(int layer) const {
    const int stages = static_cast<int>(cfg_.backbone_channels.size());
    return static_cast<double>(1 << std::min(layer + 1, stages));
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (const auto& l : layer_names()) {
      out.push_back(l + ".weight");
      out.push_back(l + ".bias");
    }
    out.push_back("predictor.weight");
    out.push_back("predictor.bias");
    return out;
  }

  std::vector<ad::Var>& params() { return params_; }
  const std::vector<ad::Var>& params() const { return params_; }

  /// Re-draws every parameter: He-normal weights, zero biases, class bias at
  /// a 0.01 prior.
  void randomize(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x746F79646574ULL));
    params_.clear();
    int in = 3;
    auto add_conv = [&](int out, int in_ch, int k, double gain) {
      const double std = gain * std::sqrt(2.0 / (in_ch * k * k));
      std::vector<double> w(static_cast<std::size_t>(out) * in_ch * k * k);
      for (double& v : w) v = std * rng.normal();
      params_.push_back(ad::parameter({out, in_ch, k, k}, std::move(w)));
      params_.push_back(ad::parameter({out}, std::vector<double>(out, 0.0)));
    };
    for (int c : cfg_.backbone_channels) {
      add_conv(c, in, 3, 1.0);
      in = c;
    }
    add_conv(cfg_.neck_channels, in, 3, 1.0);
    in = cfg_.neck_channels;
    for (int h = 0; h < cfg_.head_depth; ++h) {
      add_conv(cfg_.head_channels, in, 3, 1.0);
      in = cfg_.head_channels;
    }
    add_conv(cfg_.out_channels(), in, 1, 0.1);
    auto& bias = params_.back().mutable_value();
    for (int c = 0; c < cfg_.num_classes; ++c) bias[c] = -std::log(99.0);
  }

  /// Shape of the activation tensor produced by `layer`.
  ad::Shape layer_shape(int layer) const {
    const int stages = static_cast<int>(cfg_.backbone_channels.size());
    const int s = static_cast<int>(layer_stride(layer));
    int ch;
    if (layer < stages) ch = cfg_.backbone_channels[layer];
    else if (layer == stages) ch = cfg_.neck_channels;
    else ch = cfg_.head_channels;
    return {ch, cfg_.image_h / s, cfg_.image_w / s};
  }

  ad::Var image_tensor(const Image& img) const {
    if (img.width != cfg_.image_w || img.height != cfg_.image_h || img.channels != 3)
      throw std::invalid_argument("image does not match the detector input size");
    std::vector<double> v(img.data);
    for (double& x : v) x -= 0.5;
    return ad::constant({3, img.height, img.width}, std::move(v));
  }

  /// Runs layers after `start` (-1 = from the image) and the predictor.
  Forward forward(const ad::Var& input, int start = -1, const std::vector<ad::Var>* params = nullptr) const {
    const auto& p = params ? *params : params_;
    const int stages = static_cast<int>(cfg_.backbone_channels.size());
    Forward f;
    ad::Var x = input;
    for (int l = start + 1; l < cfg_.num_layers(); ++l) {
      const ad::ConvGeom g{l < stages ? 2 : 1, 1};
      x = ad::relu(ad::bias_add(ad::conv2d(x, p[2 * l], g), p[2 * l + 1]));
      f.acts.push_back(x);
    }
    const int L = cfg_.num_layers();
    f.out = ad::bias_add(ad::conv2d(x, p[2 * L], {1, 0}), p[2 * L + 1]);
    return f;
  }

  std::vector<double> infer(const Image& img) const {
    ad::NoGradGuard ng;
    return forward(image_tensor(img)).out.value();
  }

  // ---- output decoding -----------------------------------------------------

  std::int64_t encode_id(int row, int col, int cls) const {
    return (static_cast<std::int64_t>(row) * cfg_.feat_w() + col) * cfg_.num_classes + cls;
  }

  DetectionIndex decode_id(std::int64_t id) const {
    const std::int64_t n = static_cast<std::int64_t>(cfg_.feat_w()) * cfg_.feat_h() * cfg_.num_classes;
    if (id < 0 || id >= n) throw std::out_of_range("detection id out of range");
    DetectionIndex d;
    d.class_id = static_cast<int>(id % cfg_.num_classes);
    const std::int64_t loc = id / cfg_.num_classes;
    d.row = static_cast<int>(loc / cfg_.feat_w());
    d.col = static_cast<int>(loc % cfg_.feat_w());
    return d;
  }

  std::size_t out_index(int channel, int row, int col) const {
    return (static_cast<std::size_t>(channel) * cfg_.feat_h() + row) * cfg_.feat_w() + col;
  }

  static double clamp_log_distance(double v) { return std::clamp(v, -6.0, 6.0); }

  BBox decode_box(const std::vector<double>& out, int row, int col) const {
    const int C = cfg_.num_classes;
    const double s = cfg_.stride();
    const double cx = (col + 0.5) * s, cy = (row + 0.5) * s;
    double d[4];
    for (int k = 0; k < 4; ++k) d[k] = s * std::exp(clamp_log_distance(out[out_index(C + k, row, col)]));
    BBox b{cx - d[0], cy - d[1], cx + d[2], cy + d[3]};
    b.x1 = std::max(0.0, b.x1);
    b.y1 = std::max(0.0, b.y1);
    b.x2 = std::min<double>(cfg_.image_w, b.x2);
    b.y2 = std::min<double>(cfg_.image_h, b.y2);
    return b;
  }

  /// Every (location, class) above score_thresh, best first, capped at max_candidates.
  std::vector<Detection> decode(const std::vector<double>& out) const {
    std::vector<Detection> c;
    for (int r = 0; r < cfg_.feat_h(); ++r)
      for (int col = 0; col < cfg_.feat_w(); ++col)
        for (int k = 0; k < cfg_.num_classes; ++k) {
          const double s = 1.0 / (1.0 + std::exp(-out[out_index(k, r, col)]));
          if (s < cfg_.score_thresh) continue;
          Detection d;
          d.bbox = decode_box(out, r, col);
          d.class_id = k;
          d.score = s;
          d.id = encode_id(r, col, k);
          c.push_back(d);
        }
    std::stable_sort(c.begin(), c.end(), [](const Detection& a, const Detection& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    if (c.size() > static_cast<std::size_t>(cfg_.max_candidates)) c.resize(cfg_.max_candidates);
    return c;
  }

  std::vector<Detection> candidates(const Image& img) const { return decode(infer(img)); }

  std::vector<Detection> detect(const Image& img) const {
    const auto cands = candidates(img);
    std::vector<ScoredCandidate> sc;
    sc.reserve(cands.size());
    for (const auto& d : cands) sc.push_back({d, std::nullopt});
    auto kept = classic_nms(sc, cfg_.nms_iou);
    if (kept.size() > static_cast<std::size_t>(cfg_.max_detections)) kept.resize(cfg_.max_detections);
    return kept;
  }

  /// Scalar explained for `target`, read from the predictor output graph.
  ad::Var target_scalar(const ad::Var& out, const ExplanationTarget& t) const {
    const auto d = decode_id(t.detection_id);
    const int C = cfg_.num_classes;
    switch (t.kind) {
      case TargetKind::class_score: return ad::sigmoid(ad::select(out, out_index(d.class_id, d.row, d.col)));
      case TargetKind::box_x1: return ad::select(out, out_index(C + 0, d.row, d.col));
      case TargetKind::box_y1: return ad::select(out, out_index(C + 1, d.row, d.col));
      case TargetKind::box_x2: return ad::select(out, out_index(C + 2, d.row, d.col));
      case TargetKind::box_y2: return ad::select(out, out_index(C + 3, d.row, d.col));
      case TargetKind::custom:
        if (t.custom_channel < 0 || t.custom_channel >= cfg_.out_channels())
          throw std::invalid_argument("custom target channel out of range");
        return ad::select(out, out_index(t.custom_channel, d.row, d.col));
    }
    throw std::invalid_argument("unknown target kind");
  }

 private:
  ToyDetectorConfig cfg_;
  std::vector<ad::Var> params_;
};

// ---------------------------------------------------------------------------
// Gradient provider

inline FeatureTensor to_feature_tensor(const ad::Var& v) {
  const auto& s = v.shape();
  FeatureTensor t(s[0], s[1], s[2]);
  t.data = v.value();
  return t;
}

class ToyProvider : public GradientProvider {
 public:
  ToyProvider(std::shared_ptr<const ToyDetector> det, const std::string& layer)
      : det_(std::move(det)), layer_(det_->layer_index(layer)), layer_name_(layer) {
    for (const auto& p : det_->params()) frozen_.push_back(ad::constant(p.shape(), p.value()));
  }

  const ToyDetector& detector() const { return *det_; }
  int layer() const { return layer_; }

  std::vector<Detection> detect(const Image& image) override { return det_->detect(image); }
  std::vector<Detection> candidates(const Image& image) const { return det_->candidates(image); }
  std::string layer_name() const override { return layer_name_; }

  FeatureTensor activations(const Image& image) const {
    ad::NoGradGuard ng;
    auto f = det_->forward(det_->image_tensor(image), -1, &frozen_);
    return to_feature_tensor(f.acts[layer_]);
  }

  /// Target value with the chosen layer's activations replaced by `acts`.
  double target_from(const FeatureTensor& acts, const ExplanationTarget& target) const {
    ad::NoGradGuard ng;
    auto a = ad::constant({acts.channels, acts.height, acts.width}, acts.data);
    auto f = det_->forward(a, layer_, &frozen_);
    return det_->target_scalar(f.out, target).item();
  }

  ActivationGradientPair gradients(const Image& image, const ExplanationTarget& target) override {
    ActivationGradientPair p;
    p.activations = activations(image);
    p.layer_name = layer_name_;
    p.stride = det_->layer_stride(layer_);
    auto a = ad::tensor({p.activations.channels, p.activations.height, p.activations.width}, p.activations.data,
                        true);
    auto f = det_->forward(a, layer_, &frozen_);
    auto y = det_->target_scalar(f.out, target);
    auto g = ad::grad(y, {a})[0];
    p.gradients = to_feature_tensor(g);
    return p;
  }

 private:
  std::shared_ptr<const ToyDetector> det_;
  int layer_;
  std::string layer_name_;
  std::vector<ad::Var> frozen_;
};

// ---------------------------------------------------------------------------
// Training targets

/// Per-location GT index (or -1). Each GT first reserves its nearest free
/// location inside its box, smallest GT first; remaining locations go to the
/// nearest GT center within `radius` strides whose box contains them.
inline std::vector<int> assign_locations(const ImageAnnotations& ann, const ToyDetectorConfig& cfg,
                                         double radius = 1.5) {
  const int H = cfg.feat_h(), W = cfg.feat_w();
  const double s = cfg.stride();
  std::vector<int> owner(static_cast<std::size_t>(H) * W, -1);
  const int n = static_cast<int>(ann.objects.size());
  auto center_dist = [&](int g, int r, int c) {
    const auto& b = ann.objects[g].bbox;
    const double dx = (c + 0.5) * s - b.cx(), dy = (r + 0.5) * s - b.cy();
    return std::sqrt(dx * dx + dy * dy);
  };
  auto inside = [&](int g, int r, int c) {
    const auto& b = ann.objects[g].bbox;
    const double x = (c + 0.5) * s, y = (r + 0.5) * s;
    return x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
  };

  std::vector<int> by_area(n);
  std::iota(by_area.begin(), by_area.end(), 0);
  std::stable_sort(by_area.begin(), by_area.end(),
                   [&](int a, int b) { return ann.objects[a].bbox.area() < ann.objects[b].bbox.area(); });
  for (int g : by_area) {
    int best = -1;
    double bd = 1e300;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        if (owner[r * W + c] >= 0 || !inside(g, r, c)) continue;
        const double d = center_dist(g, r, c);
        if (d < bd) {
          bd = d;
          best = r * W + c;
        }
      }
    if (best >= 0) owner[best] = g;
  }
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (owner[r * W + c] >= 0) continue;
      int best = -1;
      double bd = 1e300;
      for (int g = 0; g < n; ++g) {
        if (!inside(g, r, c)) continue;
        const double d = center_dist(g, r, c);
        if (d <= radius * s && d < bd) {
          bd = d;
          best = g;
        }
      }
      owner[r * W + c] = best;
    }
  return owner;
}

namespace detail {

/// Sigmoid focal loss summed over all logits; constant-gradient node.
inline ad::Var focal_loss(const ad::Var& logits, const std::vector<double>& targets, double alpha, double gamma,
                          double norm) {
  const auto& x = logits.value();
  std::vector<double> grad(x.size());
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-x[i]));
    const double t = targets[i];
    const double pt = t > 0.5 ? p : 1 - p;
    const double at = t > 0.5 ? alpha : 1 - alpha;
    const double one_m = 1 - pt;
    const double lp = std::log(std::max(pt, 1e-12));
    total += -at * std::pow(one_m, gamma) * lp;
    // d/dx of -at (1-pt)^g log(pt), with dpt/dx = pt (1-pt) * sign
    const double sign = t > 0.5 ? 1.0 : -1.0;
    const double dpt = pt * one_m * sign;
    const double dl_dpt = at * (gamma * std::pow(one_m, gamma - 1) * lp - std::pow(one_m, gamma) / std::max(pt, 1e-12));
    grad[i] = dl_dpt * dpt / norm;
  }
  auto g = std::make_shared<std::vector<double>>(std::move(grad));
  ad::Shape shape = logits.shape();
  return ad::detail::make_result({1}, {total / norm}, {logits}, [g, shape](const ad::Var& go) {
    return std::vector<ad::Var>{ad::scale_by(ad::constant(shape, *g), go)};
  });
}

struct RegTarget {
  std::size_t loc;
  double l, t, r, b;
};

/// -log IoU between predicted and target edge distances sharing an anchor point.
inline ad::Var iou_loss(const ad::Var& reg, const std::vector<RegTarget>& targets, double stride, double norm) {
  const auto& v = reg.value();
  const std::size_t plane = v.size() / 4;
  std::vector<double> grad(v.size(), 0.0);
  double total = 0;
  for (const auto& tg : targets) {
    double raw[4], d[4], dd[4];
    for (int k = 0; k < 4; ++k) {
      raw[k] = v[k * plane + tg.loc];
      const double c = ToyDetector::clamp_log_distance(raw[k]);
      d[k] = stride * std::exp(c);
      dd[k] = raw[k] == c ? d[k] : 0.0;  // d d / d raw
    }
    const double tl = tg.l, tt = tg.t, tr = tg.r, tb = tg.b;
    const double pa = (d[0] + d[2]) * (d[1] + d[3]);
    const double ta = (tl + tr) * (tt + tb);
    const double iw = std::min(d[0], tl) + std::min(d[2], tr);
    const double ih = std::min(d[1], tt) + std::min(d[3], tb);
    const double inter = iw * ih;
    const double uni = pa + ta - inter;
    total += -std::log(inter / uni);
    // dL = -dI/I + dU/U
    const double dinter_dw = ih, dinter_dh = iw;
    double dI[4];
    dI[0] = d[0] < tl ? dinter_dw : 0.0;
    dI[2] = d[2] < tr ? dinter_dw : 0.0;
    dI[1] = d[1] < tt ? dinter_dh : 0.0;
    dI[3] = d[3] < tb ? dinter_dh : 0.0;
    double dP[4];
    dP[0] = dP[2] = d[1] + d[3];
    dP[1] = dP[3] = d[0] + d[2];
    for (int k = 0; k < 4; ++k) {
      const double dU = dP[k] - dI[k];
      const double dl = -dI[k] / inter + dU / uni;
      grad[k * plane + tg.loc] += dl * dd[k] / norm;
    }
  }
  auto g = std::make_shared<std::vector<double>>(std::move(grad));
  ad::Shape shape = reg.shape();
  return ad::detail::make_result({1}, {total / norm}, {reg}, [g, shape](const ad::Var& go) {
    return std::vector<ad::Var>{ad::scale_by(ad::constant(shape, *g), go)};
  });
}

/// Row-wise then column-wise Gaussian blur with reflect padding, as one linear map.
inline std::shared_ptr<const ad::LinearMapPair> blur_map(int h, int w, double sigma, double truncate) {
  const auto k = gaussian_kernel_1d(sigma, truncate);
  const int radius = static_cast<int>(k.size() / 2);
  ad::LinearMap m;
  m.in_h = m.out_h = h;
  m.in_w = m.out_w = w;
  m.rows.resize(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      std::map<int, double> acc;
      for (int a = -radius; a <= radius; ++a)
        for (int b = -radius; b <= radius; ++b)
          acc[reflect_index(r + a, h) * w + reflect_index(c + b, w)] += k[a + radius] * k[b + radius];
      auto& row = m.rows[r * w + c];
      for (auto [i, v] : acc) row.push_back({i, v});
    }
  return std::make_shared<const ad::LinearMapPair>(std::move(m));
}

inline std::shared_ptr<const ad::LinearMapPair> resize_map(int in_h, int in_w, int out_h, int out_w) {
  const auto ry = odamkit::detail::linear_taps(in_h, out_h);
  const auto rx = odamkit::detail::linear_taps(in_w, out_w);
  ad::LinearMap m;
  m.in_h = in_h;
  m.in_w = in_w;
  m.out_h = out_h;
  m.out_w = out_w;
  m.rows.resize(static_cast<std::size_t>(out_h) * out_w);
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c) {
      std::map<int, double> acc;
      const auto& ty = ry[r];
      const auto& tx = rx[c];
      acc[ty.i0 * in_w + tx.i0] += (1 - ty.w1) * (1 - tx.w1);
      acc[ty.i0 * in_w + tx.i1] += (1 - ty.w1) * tx.w1;
      acc[ty.i1 * in_w + tx.i0] += ty.w1 * (1 - tx.w1);
      acc[ty.i1 * in_w + tx.i1] += ty.w1 * tx.w1;
      auto& row = m.rows[r * out_w + c];
      for (auto [i, v] : acc)
        if (v != 0.0) row.push_back({i, v});
    }
  return std::make_shared<const ad::LinearMapPair>(std::move(m));
}

inline ad::Var cosine(const ad::Var& a, const ad::Var& b) {
  auto na = ad::sqrt(ad::sum(ad::mul(a, a)));
  auto nb = ad::sqrt(ad::sum(ad::mul(b, b)));
  return ad::div(ad::sum(ad::mul(a, b)), ad::mul(na, nb));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  bool odam_train = false;
  AuxLossConfig aux;
  SmoothingConfig smoothing;
  std::string aux_layer = "neck";
  int proposals_per_gt = 3;
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-2;
  double focal_alpha = 0.25, focal_gamma = 2.0;
  double grad_clip = 5.0;
  double noise_patch_prob = 0.5;  // chance per image of pasting background noise patches
  std::uint64_t seed = 0;

  void validate() const {
    aux.validate();
    if (!(noise_patch_prob >= 0 && noise_patch_prob <= 1)) throw std::invalid_argument("noise_patch_prob must lie in [0,1]");
    if (epochs < 1 || batch_size < 1 || proposals_per_gt < 1) throw std::invalid_argument("bad training schedule");
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (aux.weight < 0) throw std::invalid_argument("aux weight must be non-negative");
  }
};

struct EpochLog {
  int epoch = 0;
  double det_loss = 0;
  double aux_loss = 0;
  double aux_pairs = 0;
};

/// Graph-side Odam-Train proposals of one image, grouped per GT.
struct AuxProposal {
  int gt = -1;
  Detection detection;
  double iou_with_gt = 0;
  ad::Var heat_vector;  // flattened common-size heat map
};

struct ImageLoss {
  ad::Var det;
  ad::Var aux;  // undefined when no pair exists
  std::size_t aux_pairs = 0;
  std::vector<AuxProposal> proposals;
};

/// Detection loss and, if enabled, the differentiable aux loss of one sample.
inline ImageLoss image_loss(const ToyDetector& det, const Sample& s, const TrainConfig& cfg) {
  const auto& dc = det.config();
  const int C = dc.num_classes, H = dc.feat_h(), W = dc.feat_w();
  const double stride = dc.stride();
  const auto owner = assign_locations(s.annotations, dc);

  const bool aux_on = cfg.odam_train && cfg.aux.weight > 0;
  const int aux_layer = det.layer_index(cfg.aux_layer);
  auto fwd = det.forward(det.image_tensor(s.image));
  const ad::Var& out = fwd.out;

  std::vector<double> cls_t(static_cast<std::size_t>(C) * H * W, 0.0);
  std::vector<detail::RegTarget> reg_t;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int g = owner[r * W + c];
      if (g < 0) continue;
      const auto& obj = s.annotations.objects[g];
      cls_t[(static_cast<std::size_t>(obj.class_id) * H + r) * W + c] = 1.0;
      const double x = (c + 0.5) * stride, y = (r + 0.5) * stride;
      reg_t.push_back({static_cast<std::size_t>(r * W + c), x - obj.bbox.x1, y - obj.bbox.y1, obj.bbox.x2 - x,
                       obj.bbox.y2 - y});
    }
  const double norm = std::max<double>(1.0, static_cast<double>(reg_t.size()));
  ImageLoss res;
  res.det = ad::add(detail::focal_loss(ad::slice_channels(out, 0, C), cls_t, cfg.focal_alpha, cfg.focal_gamma, norm),
                    detail::iou_loss(ad::slice_channels(out, C, C + 4), reg_t, stride, norm));
  if (!aux_on) return res;

  // Positive proposals: per GT, its owned locations nearest to the GT center.
  const ad::Var& A = fwd.acts[aux_layer];
  const auto& as = A.shape();
  const double astride = det.layer_stride(aux_layer);
  const auto rmap = detail::resize_map(as[1], as[2], cfg.aux.common_h, cfg.aux.common_w);
  std::map<double, std::shared_ptr<const ad::LinearMapPair>> blurs;
  const int n = static_cast<int>(s.annotations.objects.size());
  std::vector<std::vector<int>> per_gt(n);
  for (int i = 0; i < H * W; ++i)
    if (owner[i] >= 0) per_gt[owner[i]].push_back(i);

  for (int g = 0; g < n; ++g) {
    const auto& obj = s.annotations.objects[g];
    auto& locs = per_gt[g];
    auto dist = [&](int i) {
      const double dx = (i % W + 0.5) * stride - obj.bbox.cx(), dy = (i / W + 0.5) * stride - obj.bbox.cy();
      return dx * dx + dy * dy;
    };
    std::stable_sort(locs.begin(), locs.end(), [&](int a, int b) { return dist(a) < dist(b); });
    if (locs.size() > static_cast<std::size_t>(cfg.proposals_per_gt)) locs.resize(cfg.proposals_per_gt);

    Detection gdet;
    gdet.bbox = obj.bbox;
    const double sigma = cfg.smoothing.mode == SmoothingConfig::Mode::none ? 0.0
                                                                           : adaptive_sigma(gdet, astride, cfg.smoothing);
    std::shared_ptr<const ad::LinearMapPair> blur;
    if (sigma > 0) {
      auto& slot = blurs[sigma];
      if (!slot) slot = detail::blur_map(as[1], as[2], sigma, cfg.smoothing.truncate);
      blur = slot;
    }
    for (int i : locs) {
      const int r = i / W, c = i % W;
      AuxProposal p;
      p.gt = g;
      p.detection.id = det.encode_id(r, c, obj.class_id);
      p.detection.class_id = obj.class_id;
      p.detection.bbox = det.decode_box(out.value(), r, c);
      p.detection.score = 1.0 / (1.0 + std::exp(-out.value()[det.out_index(obj.class_id, r, c)]));
      p.iou_with_gt = iou(p.detection.bbox, obj.bbox);
      ExplanationTarget t{TargetKind::class_score, p.detection.id, -1};
      auto y = det.target_scalar(out, t);
      auto grad = ad::grad(y, {A}, true)[0];
      auto w = blur ? ad::spatial_map(grad, blur) : grad;
      auto hm = ad::relu(ad::reduce_channels(ad::mul(w, A)));
      p.heat_vector = ad::reshape(ad::spatial_map(hm, rmap), {cfg.aux.common_h * cfg.aux.common_w});
      res.proposals.push_back(std::move(p));
    }
  }

  // Zero maps are dropped; the best member per GT anchors its group.
  std::vector<std::vector<const AuxProposal*>> live(n);
  for (const auto& p : res.proposals) {
    const auto& v = p.heat_vector.value();
    if (std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; })) live[p.gt].push_back(&p);
  }
  ad::Var total;
  auto accumulate = [&](const ad::Var& term) { total = total.defined() ? ad::add(total, term) : term; };
  for (int g = 0; g < n; ++g) {
    if (live[g].empty()) continue;
    std::vector<ProposalExplanation> members;
    for (auto* p : live[g]) members.push_back({p->detection, g, {}, p->iou_with_gt});
    const auto best_id = select_best(members).detection.id;
    const AuxProposal* best = nullptr;
    for (auto* p : live[g])
      if (p->detection.id == best_id) best = p;
    for (auto* p : live[g]) {
      if (p == best) continue;
      auto cos = detail::cosine(best->heat_vector, p->heat_vector);
      accumulate(ad::neg(ad::log(ad::clamp(cos, cfg.aux.epsilon, 1.0))));
      ++res.aux_pairs;
    }
    for (int o = 0; o < n; ++o) {
      if (o == g) continue;
      for (auto* p : live[o]) {
        auto cos = detail::cosine(best->heat_vector, p->heat_vector);
        accumulate(ad::neg(ad::log(ad::clamp(ad::add_const(ad::neg(cos), 1.0), cfg.aux.epsilon, 1.0))));
        ++res.aux_pairs;
      }
    }
  }
  if (total.defined()) res.aux = ad::mul_const(total, 1.0 / static_cast<double>(res.aux_pairs));
  return res;
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with cosine decay and global-norm clipping. Deterministic given cfg.seed.
namespace detail {

/// Pastes 1-3 patches of uniform noise that avoid every GT box.
inline Sample with_noise_patches(const Sample& s, Rng& rng) {
  Sample out = s;
  Image& im = out.image;
  const auto [lo, hi] = std::minmax_element(im.data.begin(), im.data.end());
  const double a = *lo, b = *hi > *lo ? *hi : *lo + 1e-12;
  const int n = rng.uniform_int(1, 3);
  for (int p = 0; p < n; ++p) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double w = rng.uniform(12, 56), h = rng.uniform(12, 56);
      const double x1 = rng.uniform(0, im.width - w), y1 = rng.uniform(0, im.height - h);
      const BBox box{x1, y1, x1 + w, y1 + h};
      bool clear = true;
      for (const auto& o : s.annotations.objects)
        if ((box.x1 < o.bbox.x2 && o.bbox.x1 < box.x2 && box.y1 < o.bbox.y2 && o.bbox.y1 < box.y2))
          clear = false;
      if (!clear) continue;
      const bool ellipse = rng.uniform() < 0.5;
      const double cx = x1 + w / 2, cy = y1 + h / 2;
      for (int r = static_cast<int>(y1); r < std::min(im.height, static_cast<int>(y1 + h) + 1); ++r)
        for (int c = static_cast<int>(x1); c < std::min(im.width, static_cast<int>(x1 + w) + 1); ++c) {
          if (!box.contains_pixel(r, c)) continue;
          const double px = c + 0.5, py = r + 0.5;
          if (ellipse) {
            const double dx = (px - cx) / (w / 2), dy = (py - cy) / (h / 2);
            if (dx * dx + dy * dy > 1) continue;
          }
          for (int ch = 0; ch < im.channels; ++ch) im.at(ch, r, c) = rng.uniform(a, b);
        }
      break;
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<EpochLog> train_toy(ToyDetector& det, const std::vector<Sample>& data, const TrainConfig& cfg,
                                       const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  auto& params = det.params();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].numel(), 0.0);
    v[i].assign(params[i].numel(), 0.0);
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const std::size_t steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  Rng rng(mix_seed(cfg.seed, 0x747261696EULL));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochLog> log;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
    EpochLog el;
    el.epoch = epoch + 1;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1e = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<std::vector<double>> acc(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) acc[i].assign(params[i].numel(), 0.0);
      for (std::size_t k = b0; k < b1e; ++k) {
        const Sample& src = data[order[k]];
        const auto l = rng.uniform() < cfg.noise_patch_prob ? image_loss(det, detail::with_noise_patches(src, rng), cfg)
                                                              : image_loss(det, src, cfg);
        ad::Var loss = l.det;
        if (l.aux.defined()) loss = ad::add(loss, ad::mul_const(l.aux, cfg.aux.weight));
        if (!std::isfinite(loss.item()))
          throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch + 1) + ", image " +
                                 std::to_string(src.annotations.image_id));
        el.det_loss += l.det.item();
        if (l.aux.defined()) el.aux_loss += l.aux.item();
        el.aux_pairs += static_cast<double>(l.aux_pairs);
        auto gs = ad::grad(loss, params);
        for (std::size_t i = 0; i < params.size(); ++i) {
          const auto& gv = gs[i].value();
          for (std::size_t j = 0; j < gv.size(); ++j) acc[i][j] += gv[j];
        }
      }
      const double bs = static_cast<double>(b1e - b0);
      double norm2 = 0;
      for (auto& a : acc)
        for (double& x : a) {
          x /= bs;
          norm2 += x * x;
        }
      const double scale = std::sqrt(norm2) > cfg.grad_clip ? cfg.grad_clip / std::sqrt(norm2) : 1.0;
      ++step;
      const double lr = cfg.lr * 0.5 * (1 + std::cos(M_PI * static_cast<double>(step - 1) / total_steps));
      const double c1 = 1 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& pv = params[i].mutable_value();
        for (std::size_t j = 0; j < pv.size(); ++j) {
          const double g = acc[i][j] * scale;
          m[i][j] = b1 * m[i][j] + (1 - b1) * g;
          v[i][j] = b2 * v[i][j] + (1 - b2) * g * g;
          pv[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
        }
      }
    }
    const double n = static_cast<double>(data.size());
    el.det_loss /= n;
    el.aux_loss /= n;
    el.aux_pairs /= n;
    log.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return log;
}

}  // namespace odamkit
