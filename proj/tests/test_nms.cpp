#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "odamkit/nms.hpp"

using namespace odamkit;

namespace {

ScoredCandidate cand(std::int64_t id, BBox b, double score, int cls = 0, std::optional<std::vector<double>> v = {}) {
  ScoredCandidate c;
  c.detection.id = id;
  c.detection.bbox = b;
  c.detection.score = score;
  c.detection.class_id = cls;
  c.heat_vector = std::move(v);
  return c;
}

std::vector<std::int64_t> ids(const std::vector<Detection>& d) {
  std::vector<std::int64_t> out;
  for (const auto& x : d) out.push_back(x.id);
  return out;
}

// Random clustered candidates with strictly positive heat vectors (correlations inside (0,1)).
std::vector<ScoredCandidate> random_set(std::mt19937& g, int n) {
  std::uniform_real_distribution<double> u(0, 1), pos(0, 200), size(10, 50), jitter(-8, 8);
  std::uniform_int_distribution<int> cls(0, 2);
  std::vector<BBox> centers;
  for (int k = 0; k < 1 + n / 10; ++k) {
    const double x = pos(g), y = pos(g);
    centers.push_back({x, y, x + size(g), y + size(g)});
  }
  std::vector<ScoredCandidate> out;
  for (int i = 0; i < n; ++i) {
    const BBox& c = centers[g() % centers.size()];
    const double x1 = c.x1 + jitter(g), y1 = c.y1 + jitter(g);
    BBox b{x1, y1, std::max(x1 + 2, c.x2 + jitter(g)), std::max(y1 + 2, c.y2 + jitter(g))};
    std::vector<double> v(16);
    for (auto& x : v) x = 0.01 + u(g);
    out.push_back(cand(i, b, std::round(u(g) * 100) / 100, cls(g), v));
  }
  return out;
}

}  // namespace

TEST(ClassicNms, SingleCandidateKept) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.5)};
  EXPECT_EQ(classic_nms(c, 0.5).size(), 1u);
}

TEST(ClassicNms, IdenticalBoxesKeepHigher) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.8), cand(1, {0, 0, 10, 10}, 0.9)};
  EXPECT_EQ(ids(classic_nms(c, 0.5)), (std::vector<std::int64_t>{1}));
}

TEST(ClassicNms, ThreeBoxTrace) {
  // B overlaps A at IoU 0.6, C overlaps A at 0.2 and misses B.
  const BBox A{0, 0, 10, 10};
  const BBox B{0, 0, 10, 6};
  std::vector<ScoredCandidate> c{cand(0, A, 0.9), cand(1, B, 0.8), cand(2, {0, 7.5, 10, 12.5}, 0.7)};
  ASSERT_NEAR(iou(A, B), 0.6, 1e-12);
  ASSERT_NEAR(iou(A, c[2].detection.bbox), 0.2, 1e-12);
  ASSERT_LT(iou(B, c[2].detection.bbox), 0.5);
  EXPECT_EQ(ids(classic_nms(c, 0.5)), (std::vector<std::int64_t>{0, 2}));
}

TEST(ClassicNms, DifferentClassesNeverSuppress) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9, 0), cand(1, {0, 0, 10, 10}, 0.8, 1)};
  EXPECT_EQ(classic_nms(c, 0.5).size(), 2u);
}

TEST(SoftNms, DisjointScoresUnchanged) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9), cand(1, {20, 20, 30, 30}, 0.3)};
  auto k = soft_nms(c, 0.5, 0.05);
  ASSERT_EQ(k.size(), 2u);
  EXPECT_DOUBLE_EQ(k[1].score, 0.3);
}

TEST(SoftNms, DuplicateDecaysByExpMinusTwo) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9), cand(1, {0, 0, 10, 10}, 0.8)};
  auto k = soft_nms(c, 0.5, 0.05);
  ASSERT_EQ(k.size(), 2u);
  EXPECT_NEAR(k[1].score, 0.8 * std::exp(-2.0), 1e-12);
  EXPECT_NEAR(std::exp(-2.0), 0.1353, 1e-4);
}

TEST(SoftNms, DecayedBelowThresholdRemoved) {
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9), cand(1, {0, 0, 10, 10}, 0.3)};
  // 0.3 * e^-2 = 0.0406 < 0.05
  EXPECT_EQ(ids(soft_nms(c, 0.5, 0.05)), (std::vector<std::int64_t>{0}));
  EXPECT_THROW(soft_nms(c, 0.0, 0.05), std::invalid_argument);
}

TEST(OdamNms, HighIouLowCorrelationKeepsBoth) {
  NMSConfig cfg;
  // iou 0.8, corr 0.1
  const double a = std::sqrt(1 - 0.01);
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9, 0, std::vector<double>{1, 0}),
                                 cand(1, {0, 0, 10, 8}, 0.8, 0, std::vector<double>{0.1, a})};
  ASSERT_NEAR(iou(c[0].detection.bbox, c[1].detection.bbox), 0.8, 1e-12);
  EXPECT_EQ(odam_nms(c, cfg).size(), 2u);
}

TEST(OdamNms, LowIouHighCorrelationRemovesSecond) {
  NMSConfig cfg;
  const double a = std::sqrt(1 - 0.81);
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 10, 10}, 0.9, 0, std::vector<double>{1, 0}),
                                 cand(1, {7, 0, 17, 10}, 0.8, 0, std::vector<double>{0.9, a})};
  ASSERT_LT(iou(c[0].detection.bbox, c[1].detection.bbox), 0.5);
  EXPECT_EQ(ids(odam_nms(c, cfg)), (std::vector<std::int64_t>{0}));
}

TEST(OdamNms, RejectsMissingOrRaggedVectors) {
  NMSConfig cfg;
  std::vector<ScoredCandidate> c{cand(0, {0, 0, 1, 1}, 0.9, 0, std::vector<double>{1}), cand(1, {0, 0, 1, 1}, 0.8)};
  EXPECT_THROW(odam_nms(c, cfg), std::invalid_argument);
  c[1].heat_vector = std::vector<double>{1, 2};
  EXPECT_THROW(odam_nms(c, cfg), std::invalid_argument);
}

TEST(NMSConfig, Validation) {
  NMSConfig c;
  c.t_low = 0.9;
  c.t_high = 0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(OdamNmsProperty, ClassicLimitEqualsClassicNms) {
  std::mt19937 g(101);
  std::uniform_int_distribution<int> n(20, 200);
  NMSConfig cfg;
  cfg.t_low = 0;
  cfg.t_high = 1;
  for (int t = 0; t < 100; ++t) {
    const auto c = random_set(g, n(g));
    ASSERT_EQ(ids(odam_nms(c, cfg)), ids(classic_nms(c, cfg.t_iou))) << "set " << t;
  }
}

TEST(OdamNmsProperty, KeptSetMonotoneInThresholds) {
  std::mt19937 g(103);
  for (int t = 0; t < 40; ++t) {
    const auto c = random_set(g, 60);
    std::size_t prev = 0;
    for (double lo : {0.0, 0.5, 0.8, 0.9, 0.95, 1.0}) {
      NMSConfig cfg;
      cfg.t_low = lo;
      cfg.t_high = 1.0;
      const auto k = odam_nms(c, cfg).size();
      ASSERT_GE(k, prev);
      prev = k;
    }
    prev = c.size() + 1;
    for (double hi : {1.0, 0.95, 0.9, 0.8, 0.5}) {
      NMSConfig cfg;
      cfg.t_low = 0.2;
      cfg.t_high = hi;
      const auto k = odam_nms(c, cfg).size();
      ASSERT_LE(k, prev);
      prev = k;
    }
  }
}

TEST(PrepareHeatVectors, ShortEdgeResize) {
  std::vector<HeatMap> maps{HeatMap(100, 150, Space::feature, 1.0)};
  EXPECT_EQ(prepare_heat_vectors(maps, 50)[0].size(), 3750u);
  std::vector<HeatMap> square{HeatMap(50, 50, Space::feature, 0.0)};
  square[0](3, 4) = 2;
  EXPECT_EQ(prepare_heat_vectors(square, 50)[0], vectorize(square[0]));
  std::vector<HeatMap> small{HeatMap(25, 25, Space::feature, 1.0)};
  EXPECT_EQ(prepare_heat_vectors(small, 50)[0].size(), 2500u);
}

TEST(PrepareHeatVectors, RejectsMixedAspect) {
  std::vector<HeatMap> maps{HeatMap(10, 20), HeatMap(10, 10)};
  EXPECT_THROW(prepare_heat_vectors(maps, 5), std::invalid_argument);
}
