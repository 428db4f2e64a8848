#pragma once

// Auxiliary consistency / separation losses over vectorized heat maps.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "odamkit/core.hpp"

namespace odamkit {

struct ProposalExplanation {
  Detection detection;
  std::optional<std::int64_t> gt_object_id;
  std::vector<double> heat_vector;
  double iou_with_gt = 0.0;
};

struct AuxLossConfig {
  int common_h = 14, common_w = 14;
  double epsilon = 1e-6;
  double weight = 1.0;

  void validate() const {
    if (common_h <= 0 || common_w <= 0) throw std::invalid_argument("common_size must be positive");
    if (!(epsilon > 0 && epsilon < 0.5)) throw std::invalid_argument("epsilon must lie in (0, 0.5)");
  }
};

/// Highest IoU with the GT; ties go to the higher score, then the lower id.
inline const ProposalExplanation& select_best(std::span<const ProposalExplanation> group) {
  if (group.empty()) throw std::invalid_argument("select_best on an empty group");
  const ProposalExplanation* best = &group[0];
  for (const auto& p : group.subspan(1)) {
    if (p.iou_with_gt != best->iou_with_gt) {
      if (p.iou_with_gt > best->iou_with_gt) best = &p;
    } else if (p.detection.score != best->detection.score) {
      if (p.detection.score > best->detection.score) best = &p;
    } else if (p.detection.id < best->detection.id) {
      best = &p;
    }
  }
  return *best;
}

inline double consistency_term(double cos, double eps) { return -std::log(std::clamp(cos, eps, 1.0)); }
inline double separation_term(double cos, double eps) { return -std::log(std::clamp(1.0 - cos, eps, 1.0)); }

inline double consistency_loss(std::span<const double> best, std::span<const std::vector<double>> others,
                               double eps) {
  double s = 0;
  for (const auto& v : others) s += consistency_term(normalized_correlation(best, v), eps);
  return s;
}

inline double separation_loss(std::span<const double> best, std::span<const std::vector<double>> non_group,
                              double eps) {
  double s = 0;
  for (const auto& v : non_group) s += separation_term(normalized_correlation(best, v), eps);
  return s;
}

struct AuxLossResult {
  double loss = 0.0;  // (L_con + L_sep) / N, unweighted
  double consistency = 0.0;
  double separation = 0.0;
  std::size_t pairs = 0;
};

namespace detail {
inline bool is_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}
}  // namespace detail

/// Groups are per-GT lists of positive proposals. Zero vectors are dropped
/// before the best member is chosen and never count towards N.
inline AuxLossResult aux_loss_total(std::span<const std::vector<ProposalExplanation>> groups,
                                    const AuxLossConfig& cfg) {
  std::vector<std::vector<const ProposalExplanation*>> live(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (const auto& p : groups[g])
      if (!detail::is_zero(p.heat_vector)) live[g].push_back(&p);

  AuxLossResult r;
  for (std::size_t g = 0; g < live.size(); ++g) {
    if (live[g].empty()) continue;
    std::vector<ProposalExplanation> members;
    for (auto* p : live[g]) members.push_back(*p);
    const auto& best = select_best(members);
    const std::span<const double> hb = best.heat_vector;
    for (auto* p : live[g]) {
      if (p->detection.id == best.detection.id) continue;
      r.consistency += consistency_term(normalized_correlation(hb, p->heat_vector), cfg.epsilon);
      ++r.pairs;
    }
    for (std::size_t o = 0; o < live.size(); ++o) {
      if (o == g) continue;
      for (auto* p : live[o]) {
        r.separation += separation_term(normalized_correlation(hb, p->heat_vector), cfg.epsilon);
        ++r.pairs;
      }
    }
  }
  if (r.pairs > 0) r.loss = (r.consistency + r.separation) / static_cast<double>(r.pairs);
  return r;
}

}  // namespace odamkit
