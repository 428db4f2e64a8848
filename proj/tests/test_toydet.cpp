#include <gtest/gtest.h>

#include <random>

#include "odamkit/toydet.hpp"

using namespace odamkit;

namespace {

Sample sample(std::int64_t i = 0) {
  SynthConfig cfg;
  cfg.seed = 21;
  return generate_sample(cfg, i);
}

// Central differences of target_from at the given activation entries.
void check_provider_gradient(ToyProvider& prov, const Image& img, const ExplanationTarget& t, int probes,
                             std::uint64_t seed) {
  const auto pair = prov.gradients(img, t);
  ASSERT_TRUE(pair.activations.same_shape(pair.gradients));
  const auto& g = pair.gradients.data;
  std::vector<std::size_t> idx(g.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
  std::mt19937 rng(seed);
  std::vector<std::size_t> pick(idx.begin(), idx.begin() + probes / 2);
  std::uniform_int_distribution<std::size_t> any(0, g.size() - 1);
  while (static_cast<int>(pick.size()) < probes) pick.push_back(any(rng));
  for (std::size_t i : pick) {
    auto a = pair.activations;
    const double h = 1e-6;
    a.data[i] += h;
    const double up = prov.target_from(a, t);
    a.data[i] -= 2 * h;
    const double dn = prov.target_from(a, t);
    const double fd = (up - dn) / (2 * h);
    ASSERT_NEAR(g[i], fd, 1e-3 * std::max({std::abs(fd), std::abs(g[i]), 1e-6})) << "entry " << i;
  }
}

}  // namespace

TEST(ToyDetectorConfig, Geometry) {
  ToyDetectorConfig c;
  EXPECT_EQ(c.stride(), 8);
  EXPECT_EQ(c.feat_w(), 16);
  EXPECT_EQ(c.out_channels(), 7);
  c.image_w = 100;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ToyDetector, LayerNamesAndShapes) {
  ToyDetector d(ToyDetectorConfig{}, 1);
  const auto names = d.layer_names();
  ASSERT_EQ(names, (std::vector<std::string>{"stage1", "stage2", "stage3", "neck", "head1", "head2", "head3"}));
  EXPECT_EQ(d.layer_shape(d.layer_index("neck")), (ad::Shape{32, 16, 16}));
  EXPECT_EQ(d.layer_shape(0), (ad::Shape{8, 64, 64}));
  EXPECT_THROW(d.layer_index("fpn"), std::invalid_argument);
  EXPECT_EQ(d.param_names().size(), d.params().size());
}

TEST(ToyDetector, IdRoundTrip) {
  ToyDetector d(ToyDetectorConfig{}, 1);
  for (int r : {0, 7, 15})
    for (int c : {0, 3, 15})
      for (int k = 0; k < 3; ++k) {
        const auto x = d.decode_id(d.encode_id(r, c, k));
        EXPECT_EQ(x.row, r);
        EXPECT_EQ(x.col, c);
        EXPECT_EQ(x.class_id, k);
      }
  EXPECT_THROW(d.decode_id(-1), std::out_of_range);
  EXPECT_THROW(d.decode_id(16 * 16 * 3), std::out_of_range);
}

TEST(ToyDetector, ForwardIsDeterministic) {
  ToyDetector d(ToyDetectorConfig{}, 2);
  const auto s = sample();
  EXPECT_EQ(d.infer(s.image), d.infer(s.image));
}

TEST(ToyDetector, RandomizeIsSeededAndChangesOutput) {
  ToyDetector a(ToyDetectorConfig{}, 5), b(ToyDetectorConfig{}, 5), c(ToyDetectorConfig{}, 6);
  const auto s = sample();
  EXPECT_EQ(a.infer(s.image), b.infer(s.image));
  EXPECT_NE(a.infer(s.image), c.infer(s.image));
}

TEST(ToyDetector, DecodedBoxesStayInImage) {
  ToyDetector d(ToyDetectorConfig{}, 3);
  std::vector<double> out(7 * 16 * 16, 0.0);
  for (std::size_t i = 3 * 256; i < out.size(); ++i) out[i] = 10.0;
  const auto b = d.decode_box(out, 0, 0);
  EXPECT_EQ(b, (BBox{0, 0, 128, 128}));
  std::fill(out.begin() + 3 * 256, out.end(), 0.0);
  const auto u = d.decode_box(out, 8, 8);
  EXPECT_EQ(u, (BBox{60, 60, 76, 76}));
}

TEST(ToyProvider, ClassScoreGradientMatchesFiniteDifferences) {
  auto det = std::make_shared<ToyDetector>(ToyDetectorConfig{}, 11);
  ToyProvider prov(det, "neck");
  const auto s = sample(1);
  check_provider_gradient(prov, s.image, {TargetKind::class_score, det->encode_id(6, 9, 1), -1}, 24, 1);
}

TEST(ToyProvider, BoxTargetGradientMatchesFiniteDifferences) {
  auto det = std::make_shared<ToyDetector>(ToyDetectorConfig{}, 12);
  const auto s = sample(2);
  for (auto kind : {TargetKind::box_x1, TargetKind::box_y2}) {
    ToyProvider prov(det, "stage3");
    check_provider_gradient(prov, s.image, {kind, det->encode_id(4, 4, 0), -1}, 20, 2);
  }
}

TEST(ToyProvider, FarLocationsHaveZeroGradient) {
  auto det = std::make_shared<ToyDetector>(ToyDetectorConfig{}, 13);
  ToyProvider prov(det, "neck");
  const auto p = prov.gradients(sample().image, {TargetKind::class_score, det->encode_id(2, 2, 0), -1});
  for (int k = 0; k < p.gradients.channels; ++k)
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        if (std::abs(r - 2) > 3 || std::abs(c - 2) > 3) ASSERT_EQ(p.gradients.at(k, r, c), 0.0);
}

TEST(ToyProvider, RandomizedWeightsChangeDetections) {
  ToyDetectorConfig cfg;
  cfg.score_thresh = 0.0;
  auto d = std::make_shared<ToyDetector>(cfg, 7);
  auto r = std::make_shared<ToyDetector>(*d);
  r->randomize(99);
  ToyProvider a(d, "neck"), b(r, "neck");
  const auto img = sample().image;
  const auto da = a.detect(img), db = b.detect(img);
  ASSERT_FALSE(da.empty());
  EXPECT_NE(da, db);
}

TEST(ToyProvider, CustomTargetChannelRange) {
  auto det = std::make_shared<ToyDetector>(ToyDetectorConfig{}, 1);
  ToyProvider prov(det, "neck");
  EXPECT_THROW(prov.gradients(sample().image, {TargetKind::custom, 0, 7}), std::invalid_argument);
  EXPECT_NO_THROW(prov.gradients(sample().image, {TargetKind::custom, 0, 6}));
}

TEST(Training, ReproducibleAndLossDecreases) {
  SynthConfig sc;
  sc.seed = 1;
  auto data = generate_dataset(sc, 16);
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 4;
  ToyDetector a(ToyDetectorConfig{}, 7), b(ToyDetectorConfig{}, 7);
  const auto la = train_toy(a, data, tc), lb = train_toy(b, data, tc);
  ASSERT_EQ(la.size(), 3u);
  for (std::size_t e = 0; e < la.size(); ++e) {
    EXPECT_NEAR(la[e].det_loss, lb[e].det_loss, 1e-6);
    EXPECT_EQ(la[e].aux_loss, 0.0);
  }
  EXPECT_LT(la.back().det_loss, la.front().det_loss);
}

TEST(Training, OdamTrainReportsAuxLoss) {
  SynthConfig sc;
  sc.seed = 1;
  sc.overlap_factor = 0.8;
  auto data = generate_dataset(sc, 6);
  TrainConfig tc;
  tc.epochs = 1;
  tc.odam_train = true;
  ToyDetector d(ToyDetectorConfig{}, 7);
  const auto l = train_toy(d, data, tc);
  EXPECT_GT(l[0].aux_pairs, 0.0);
  EXPECT_GT(l[0].aux_loss, 0.0);
}

TEST(Training, RejectsEmptyDataAndBadConfig) {
  ToyDetector d(ToyDetectorConfig{}, 7);
  EXPECT_THROW(train_toy(d, {}, TrainConfig{}), std::invalid_argument);
  TrainConfig tc;
  tc.lr = 0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
  tc.lr = 1e-3;
  tc.noise_patch_prob = 2;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
}

TEST(Training, NoisePatchesAvoidObjects) {
  const auto s = sample(3);
  Rng rng(1);
  const auto aug = detail::with_noise_patches(s, rng);
  EXPECT_NE(aug.image, s.image);
  for (const auto& o : s.annotations.objects)
    for (int r = 0; r < 128; ++r)
      for (int c = 0; c < 128; ++c)
        if (o.bbox.contains_pixel(r, c))
          for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(aug.image.at(ch, r, c), s.image.at(ch, r, c));
}
