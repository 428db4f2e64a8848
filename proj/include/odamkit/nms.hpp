#pragma once

// Duplicate removal: classic greedy NMS, Gaussian Soft-NMS and the
// correlation-aware Odam-NMS. Suppression only happens within a class.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "odamkit/core.hpp"

namespace odamkit {

struct NMSConfig {
  double t_iou = 0.5;
  double t_low = 0.2;
  double t_high = 0.8;
  double soft_sigma = 0.5;
  double soft_final_thresh = 0.05;
  int corr_short_edge = 50;

  void validate() const {
    if (!(0 <= t_low && t_low <= t_high && t_high <= 1)) throw std::invalid_argument("need 0 <= t_low <= t_high <= 1");
    if (!(t_iou > 0 && t_iou < 1)) throw std::invalid_argument("t_iou must lie in (0, 1)");
    if (corr_short_edge < 1) throw std::invalid_argument("corr_short_edge must be >= 1");
    if (!(soft_sigma > 0)) throw std::invalid_argument("soft_sigma must be positive");
  }
};

struct ScoredCandidate {
  Detection detection;
  std::optional<std::vector<double>> heat_vector;
};

/// Processing order: score descending, then id ascending.
inline std::vector<std::size_t> score_order(std::span<const ScoredCandidate> cands) {
  std::vector<std::size_t> idx(cands.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = cands[a].detection;
    const auto& db = cands[b].detection;
    if (da.score != db.score) return da.score > db.score;
    return da.id < db.id;
  });
  return idx;
}

inline std::vector<Detection> classic_nms(std::span<const ScoredCandidate> cands, double t_iou) {
  std::vector<Detection> kept;
  for (std::size_t i : score_order(cands)) {
    const auto& p = cands[i].detection;
    bool dup = false;
    for (const auto& d : kept) {
      if (d.class_id == p.class_id && iou(p.bbox, d.bbox) >= t_iou) {
        dup = true;
        break;
      }
    }
    if (!dup) kept.push_back(p);
  }
  return kept;
}

/// Gaussian Soft-NMS. Returns the surviving detections with decayed scores,
/// in selection order.
inline std::vector<Detection> soft_nms(std::span<const ScoredCandidate> cands, double sigma, double final_thresh) {
  if (!(sigma > 0)) throw std::invalid_argument("soft_nms sigma must be positive");
  std::vector<Detection> pool;
  for (const auto& c : cands)
    if (c.detection.score >= final_thresh) pool.push_back(c.detection);
  std::vector<Detection> kept;
  while (!pool.empty()) {
    auto best = std::min_element(pool.begin(), pool.end(), [](const Detection& a, const Detection& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    Detection m = *best;
    pool.erase(best);
    kept.push_back(m);
    std::vector<Detection> next;
    next.reserve(pool.size());
    for (auto d : pool) {
      if (d.class_id == m.class_id) {
        const double o = iou(d.bbox, m.bbox);
        d.score *= std::exp(-(o * o) / sigma);
      }
      if (d.score >= final_thresh) next.push_back(d);
    }
    pool = std::move(next);
  }
  return kept;
}

/// Greedy suppression using both IoU and heat-map correlation against every
/// kept detection: duplicate iff (iou >= t_iou and corr > t_low) or
/// (iou < t_iou and corr > t_high).
inline std::vector<Detection> odam_nms(std::span<const ScoredCandidate> cands, const NMSConfig& cfg) {
  std::size_t len = 0;
  for (const auto& c : cands) {
    if (!c.heat_vector) throw std::invalid_argument("odam_nms: candidate without heat vector");
    if (len == 0) len = c.heat_vector->size();
    if (c.heat_vector->size() != len) throw std::invalid_argument("odam_nms: heat vectors differ in length");
  }
  std::vector<std::size_t> kept_idx;
  for (std::size_t i : score_order(cands)) {
    const auto& p = cands[i];
    bool dup = false;
    for (std::size_t k : kept_idx) {
      const auto& d = cands[k];
      if (d.detection.class_id != p.detection.class_id) continue;
      const double o = iou(p.detection.bbox, d.detection.bbox);
      const double corr = normalized_correlation(*p.heat_vector, *d.heat_vector);
      if ((o >= cfg.t_iou && corr > cfg.t_low) || (o < cfg.t_iou && corr > cfg.t_high)) dup = true;
    }
    if (!dup) kept_idx.push_back(i);
  }
  std::vector<Detection> kept;
  kept.reserve(kept_idx.size());
  for (std::size_t k : kept_idx) kept.push_back(cands[k].detection);
  return kept;
}

/// Resizes maps so the short edge equals `short_edge` (long edge rounded),
/// then flattens. All maps must share one aspect ratio.
inline std::vector<std::vector<double>> prepare_heat_vectors(std::span<const HeatMap> maps, int short_edge) {
  if (short_edge < 1) throw std::invalid_argument("short edge must be >= 1");
  std::vector<std::vector<double>> out;
  if (maps.empty()) return out;
  const long h0 = maps[0].height(), w0 = maps[0].width();
  for (const auto& m : maps)
    if (static_cast<long>(m.height()) * w0 != static_cast<long>(m.width()) * h0)
      throw std::invalid_argument("prepare_heat_vectors: mixed aspect ratios");
  out.reserve(maps.size());
  for (const auto& m : maps) {
    int oh, ow;
    if (m.height() <= m.width()) {
      oh = short_edge;
      ow = static_cast<int>(std::lround(static_cast<double>(m.width()) * short_edge / m.height()));
    } else {
      ow = short_edge;
      oh = static_cast<int>(std::lround(static_cast<double>(m.height()) * short_edge / m.width()));
    }
    out.push_back(vectorize(resize_heatmap(m, oh, ow)));
  }
  return out;
}

}  // namespace odamkit
