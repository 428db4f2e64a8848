#pragma once

// Explanation-quality metrics (faithfulness, localization, discrimination)
// and the small detection-quality metrics used by the NMS comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "odamkit/core.hpp"
#include "odamkit/explain.hpp"

namespace odamkit {

struct Curve {
  std::vector<double> xs, ys;

  void validate() const {
    if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("curve needs >= 2 matched points");
    for (std::size_t i = 1; i < xs.size(); ++i)
      if (!(xs[i] > xs[i - 1])) throw std::invalid_argument("curve xs must be strictly increasing");
  }
};

/// Trapezoidal integral over xs.
inline double auc(const Curve& c) {
  c.validate();
  double a = 0;
  for (std::size_t i = 1; i < c.xs.size(); ++i) a += 0.5 * (c.ys[i] + c.ys[i - 1]) * (c.xs[i] - c.xs[i - 1]);
  return a;
}

// ---------------------------------------------------------------------------
// Deletion / insertion

/// Score of the same-class prediction with maximal IoU (>= 0.5) to `det`,
/// relative to det.score and clipped to [0, 1]; 0 without a match.
inline double matched_score_ratio(std::span<const Detection> preds, const Detection& det) {
  const Detection* best = nullptr;
  double best_iou = -1;
  for (const auto& p : preds) {
    if (p.class_id != det.class_id) continue;
    const double o = iou(p.bbox, det.bbox);
    if (o > best_iou || (o == best_iou && best && p.score > best->score)) {
      best_iou = o;
      best = &p;
    }
  }
  if (!best || best_iou < 0.5 || !(det.score > 0)) return 0.0;
  return std::clamp(best->score / det.score, 0.0, 1.0);
}

/// Pixel indices by descending heat, ties in raster order.
inline std::vector<std::size_t> heat_order(const HeatMap& h) {
  std::vector<std::size_t> idx(h.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto v = h.values();
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

enum class PerturbMode { deletion, insertion };

namespace detail {

inline Curve perturbation_curve(PerturbMode mode, const Image& image, const Detection& det, const HeatMap& hmap,
                                GradientProvider& provider, int steps, std::uint64_t seed) {
  if (steps < 2) throw std::invalid_argument("perturbation curve needs steps >= 2");
  if (hmap.height() != image.height || hmap.width() != image.width)
    throw std::invalid_argument("perturbation curve needs an image-sized heat map");
  const auto order = heat_order(hmap);
  const std::size_t P = order.size();
  const std::size_t chunk = (P + steps - 1) / steps;
  const std::size_t plane = image.pixels();

  Image work = mode == PerturbMode::deletion ? image : Image(image.width, image.height, image.channels, 0.0);
  std::vector<double> fill;
  if (mode == PerturbMode::deletion) {
    const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(*lo, *hi > *lo ? *hi : *lo + 1e-12);
    fill.resize(image.data.size());
    for (double& v : fill) v = u(rng);
  }

  Curve c;
  std::size_t done = 0;
  for (int t = 0;; ++t) {
    auto preds = provider.detect(work);
    c.xs.push_back(static_cast<double>(done) / static_cast<double>(P));
    c.ys.push_back(matched_score_ratio(preds, det));
    if (done == P || t == steps) break;
    const std::size_t next = std::min(P, done + chunk);
    for (std::size_t i = done; i < next; ++i) {
      const std::size_t px = order[i];
      for (int ch = 0; ch < image.channels; ++ch) {
        const std::size_t k = ch * plane + px;
        work.data[k] = mode == PerturbMode::deletion ? fill[k] : image.data[k];
      }
    }
    done = next;
  }
  return c;
}

}  // namespace detail

inline Curve deletion_curve(const Image& image, const Detection& det, const HeatMap& hmap,
                            GradientProvider& provider, int steps = 50, std::uint64_t seed = 0) {
  return detail::perturbation_curve(PerturbMode::deletion, image, det, hmap, provider, steps, seed);
}

inline Curve insertion_curve(const Image& image, const Detection& det, const HeatMap& hmap,
                             GradientProvider& provider, int steps = 50, std::uint64_t seed = 0) {
  return detail::perturbation_curve(PerturbMode::insertion, image, det, hmap, provider, steps, seed);
}

// ---------------------------------------------------------------------------
// Visual explanation accuracy

inline std::vector<double> default_vea_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 19; ++i) t.push_back(0.05 * i);
  return t;
}

/// IoU between {hmap >= T} and the mask for each threshold T.
inline Curve vea_curve(const HeatMap& hmap, const Mask& mask, std::span<const double> thresholds) {
  if (hmap.height() != mask.height() || hmap.width() != mask.width())
    throw std::invalid_argument("vea: heat map and mask sizes differ");
  Curve c;
  for (double T : thresholds) {
    std::size_t inter = 0, uni = 0;
    for (int r = 0; r < hmap.height(); ++r)
      for (int col = 0; col < hmap.width(); ++col) {
        const bool b = hmap(r, col) >= T;
        const bool m = mask(r, col);
        inter += b && m;
        uni += b || m;
      }
    c.xs.push_back(T);
    c.ys.push_back(uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0);
  }
  return c;
}

inline double vea_auc(const HeatMap& hmap, const Mask& mask,
                      std::span<const double> thresholds = default_vea_thresholds()) {
  return auc(vea_curve(hmap, mask, thresholds));
}

// ---------------------------------------------------------------------------
// Localization

/// Raster-first maximum.
inline std::pair<int, int> argmax_pixel(const HeatMap& h) {
  int br = 0, bc = 0;
  double best = h(0, 0);
  for (int r = 0; r < h.height(); ++r)
    for (int c = 0; c < h.width(); ++c)
      if (h(r, c) > best) {
        best = h(r, c);
        br = r;
        bc = c;
      }
  return {br, bc};
}

inline bool pointing_game(const HeatMap& hmap, const Region& region) {
  auto [r, c] = argmax_pixel(hmap);
  return region.contains(r, c);
}

inline double energy_pg(const HeatMap& hmap, const Region& region) {
  double inside = 0, total = 0;
  for (int r = 0; r < hmap.height(); ++r)
    for (int c = 0; c < hmap.width(); ++c) {
      total += hmap(r, c);
      if (region.contains(r, c)) inside += hmap(r, c);
    }
  return total > 0 ? inside / total : 0.0;
}

/// Heat-weighted RMS distance to the maximum, relative to half the GT box
/// diagonal. Missing (nullopt) for an all-zero map.
inline std::optional<double> compactness(const HeatMap& hmap, const BBox& gt_box) {
  double total = 0;
  for (double v : hmap.values()) total += v;
  if (!(total > 0)) return std::nullopt;
  auto [mr, mc] = argmax_pixel(hmap);
  double acc = 0;
  for (int r = 0; r < hmap.height(); ++r)
    for (int c = 0; c < hmap.width(); ++c) {
      const double dr = r - mr, dc = c - mc;
      acc += hmap(r, c) * (dr * dr + dc * dc);
    }
  const double w = gt_box.width(), h = gt_box.height();
  const double norm = 0.25 * (h * h + w * w);
  return std::sqrt(acc / total / norm);
}

// ---------------------------------------------------------------------------
// Object discrimination index

/// Energy inside other objects' regions (excluding the target's own region)
/// over energy inside any object.
inline double odi(const HeatMap& hmap, const GroundTruthObject& target, std::span<const GroundTruthObject> others,
                  bool use_mask) {
  auto region_of = [&](const GroundTruthObject& o) {
    if (use_mask) {
      if (!o.mask) throw std::invalid_argument("odi: mask mode requires masks on every object");
      return Region(*o.mask);
    }
    return Region(o.bbox);
  };
  const Region tgt = region_of(target);
  std::vector<Region> rest;
  for (const auto& o : others) rest.push_back(region_of(o));
  double e_target = 0, e_others = 0;
  for (int r = 0; r < hmap.height(); ++r)
    for (int c = 0; c < hmap.width(); ++c) {
      const double v = hmap(r, c);
      if (tgt.contains(r, c)) {
        e_target += v;
      } else if (std::any_of(rest.begin(), rest.end(), [&](const Region& g) { return g.contains(r, c); })) {
        e_others += v;
      }
    }
  const double denom = e_others + e_target;
  return denom > 0 ? e_others / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Detection quality

/// Greedy matching in score order (ties: lower id first); each detection takes
/// the unmatched GT with highest IoU >= thr. Returns GT index per detection
/// (in the given order) or -1.
inline std::vector<int> greedy_match(std::span<const Detection> dets, std::span<const BBox> gts, double thr = 0.5) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].id < dets[b].id;
  });
  std::vector<int> match(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t i : order) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double o = iou(dets[i].bbox, gts[g]);
      if (o >= best_iou && (best < 0 || o > best_iou)) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[best] = true;
      match[i] = best;
    }
  }
  return match;
}

/// AP at IoU 0.5 with all-point interpolation. Single class (callers split
/// by class). 0 when there are no GTs.
inline double ap50(std::span<const Detection> dets, std::span<const GroundTruthObject> gts) {
  if (gts.empty()) return 0.0;
  std::vector<BBox> boxes;
  for (const auto& g : gts) boxes.push_back(g.bbox);
  const auto match = greedy_match(dets, boxes, 0.5);
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].id < dets[b].id;
  });
  std::vector<double> rec{0.0}, prec{1.0};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i : order) {
    (match[i] >= 0 ? tp : fp)++;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0;
  for (std::size_t i = 1; i < rec.size(); ++i) ap += (rec[i] - rec[i - 1]) * prec[i];
  return ap;
}

struct RecallPartition {
  std::optional<double> total, crowd, sparse;
  std::size_t n_total = 0, n_crowd = 0, n_sparse = 0;
};

/// GT is "crowd" when it overlaps another GT with IoU > 0.5.
inline std::vector<bool> crowd_flags(std::span<const GroundTruthObject> gts) {
  std::vector<bool> crowd(gts.size(), false);
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (std::size_t j = i + 1; j < gts.size(); ++j)
      if (iou(gts[i].bbox, gts[j].bbox) > 0.5) crowd[i] = crowd[j] = true;
  return crowd;
}

inline RecallPartition recall_partition(std::span<const Detection> dets, std::span<const GroundTruthObject> gts,
                                        double score_thresh) {
  std::vector<Detection> kept;
  for (const auto& d : dets)
    if (d.score >= score_thresh) kept.push_back(d);
  std::vector<BBox> boxes;
  for (const auto& g : gts) boxes.push_back(g.bbox);
  const auto match = greedy_match(kept, boxes, 0.5);
  std::vector<bool> hit(gts.size(), false);
  for (int m : match)
    if (m >= 0) hit[m] = true;
  const auto crowd = crowd_flags(gts);

  RecallPartition r;
  std::size_t h_total = 0, h_crowd = 0, h_sparse = 0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    ++r.n_total;
    h_total += hit[g];
    if (crowd[g]) {
      ++r.n_crowd;
      h_crowd += hit[g];
    } else {
      ++r.n_sparse;
      h_sparse += hit[g];
    }
  }
  auto frac = [](std::size_t a, std::size_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  r.total = frac(h_total, r.n_total);
  r.crowd = frac(h_crowd, r.n_crowd);
  r.sparse = frac(h_sparse, r.n_sparse);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

/// Neumaier-compensated running mean.
class CompensatedMean {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
    ++n_;
  }
  std::size_t count() const { return n_; }
  std::optional<double> mean() const {
    if (n_ == 0) return std::nullopt;
    return (sum_ + comp_) / static_cast<double>(n_);
  }

 private:
  double sum_ = 0, comp_ = 0;
  std::size_t n_ = 0;
};

inline const std::vector<std::string>& eval_metric_names() {
  static const std::vector<std::string> names{"pg_box",   "pg_mask",  "en_pg_box", "en_pg_mask",  "compactness",
                                              "odi_box",  "odi_mask", "vea_auc",   "deletion_auc", "insertion_auc"};
  return names;
}

struct ObjectRow {
  std::int64_t object_id = 0;
  std::int64_t image_id = 0;
  std::map<std::string, std::optional<double>> values;
};

struct EvalReport {
  std::vector<ObjectRow> per_object;
  std::map<std::string, std::optional<double>> aggregate;

  /// Unweighted mean of each metric over rows where it is present.
  void aggregate_rows() {
    aggregate.clear();
    for (const auto& name : eval_metric_names()) {
      CompensatedMean m;
      for (const auto& row : per_object) {
        auto it = row.values.find(name);
        if (it != row.values.end() && it->second) m.add(*it->second);
      }
      aggregate[name] = m.mean();
    }
  }
};

}  // namespace odamkit
