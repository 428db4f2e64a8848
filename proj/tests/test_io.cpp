#include <gtest/gtest.h>

#include <fstream>

#include "odamkit/io.hpp"

using namespace odamkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("odamkit_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(RoundSig, SixSignificantDigits) {
  EXPECT_EQ(io::round_sig(0.123456789), 0.123457);
  EXPECT_EQ(io::round_sig(123456789.0), 123457000.0);
  EXPECT_EQ(io::round_sig(-2.0 / 3.0), -0.666667);
  EXPECT_EQ(io::round_sig(0.0), 0.0);
  EXPECT_EQ(io::num(std::optional<double>{}), nullptr);
}

TEST(HeatMapFile, RoundTripWithSidecar) {
  const auto dir = scratch("heat");
  HeatMap h(3, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0.25}, Space::image);
  io::write_heatmap(dir / "h.f32", h);
  EXPECT_EQ(fs::file_size(dir / "h.f32"), 12 * sizeof(float));
  const auto meta = io::read_json(io::heatmap_sidecar(dir / "h.f32"));
  EXPECT_EQ(meta["dtype"], "f32le");
  EXPECT_EQ(meta["shape"], (io::json{3, 4}));
  const auto back = io::read_heatmap(dir / "h.f32");
  EXPECT_EQ(back.height(), 3);
  EXPECT_EQ(back.width(), 4);
  EXPECT_EQ(back.space(), Space::image);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(back.values()[i], h.values()[i]);
}

TEST(HeatMapFile, TruncatedPayloadRejected) {
  const auto dir = scratch("heat_bad");
  io::write_heatmap(dir / "h.f32", HeatMap(4, 4));
  fs::resize_file(dir / "h.f32", 10);
  EXPECT_THROW(io::read_heatmap(dir / "h.f32"), io::InputError);
  EXPECT_THROW(io::read_heatmap(dir / "missing.f32"), io::InputError);
}

TEST(Png, ImageAndMaskRoundTrip) {
  const auto dir = scratch("png");
  Image img(5, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i % 256) / 255.0;
  io::write_png(dir / "a.png", img);
  const auto back = io::read_png(dir / "a.png");
  ASSERT_EQ(back.width, 5);
  ASSERT_EQ(back.height, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-12);

  Mask m(4, 6);
  m.set(1, 2);
  m.set(3, 5);
  io::write_mask_png(dir / "m.png", m);
  const auto mb = io::read_mask_png(dir / "m.png");
  EXPECT_EQ(mb.count(), 2u);
  EXPECT_TRUE(mb(1, 2));
  EXPECT_TRUE(mb(3, 5));
}

TEST(Dataset, RoundTrip) {
  const auto dir = scratch("data");
  SynthConfig cfg;
  cfg.seed = 3;
  const auto samples = generate_dataset(cfg, 4);
  io::write_dataset(dir, samples);
  const auto back = io::read_dataset(dir);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i].annotations;
    const auto& b = back[i].annotations;
    EXPECT_EQ(a.image_id, b.image_id);
    ASSERT_EQ(a.objects.size(), b.objects.size());
    for (std::size_t k = 0; k < a.objects.size(); ++k) {
      EXPECT_EQ(a.objects[k].bbox, b.objects[k].bbox);
      EXPECT_EQ(a.objects[k].class_id, b.objects[k].class_id);
      ASSERT_TRUE(b.objects[k].mask);
      EXPECT_EQ(a.objects[k].mask->count(), b.objects[k].mask->count());
    }
    for (std::size_t p = 0; p < samples[i].image.data.size(); ++p)
      ASSERT_NEAR(back[i].image.data[p], samples[i].image.data[p], 0.5 / 255.0 + 1e-12);
  }
}

TEST(Dataset, UnknownImageReferenceRejected) {
  const auto dir = scratch("data_bad");
  io::write_text(dir / "annotations.json",
                 R"({"images": [{"id": 1, "width": 8, "height": 8}],
                     "annotations": [{"image_id": 2, "object_id": 0, "class_id": 0, "bbox": [0, 0, 4, 4]}]})");
  EXPECT_THROW(io::read_annotations(dir / "annotations.json"), io::InputError);
  io::write_text(dir / "annotations.json",
                 R"({"images": [{"id": 1, "width": 8, "height": 8}],
                     "annotations": [{"image_id": 1, "object_id": 0, "class_id": 0, "bbox": [4, 0, 1, 4]}]})");
  EXPECT_THROW(io::read_annotations(dir / "annotations.json"), io::InputError);
}

TEST(Detections, RoundTrip) {
  const auto dir = scratch("dets");
  std::vector<io::DetectionRecord> recs{{3, {{1, 2, 10, 12}, 1, 0.75, 17}, "maps/a.f32"},
                                        {4, {{0, 0, 5, 5}, 0, 0.5, 2}, ""}};
  io::write_text(dir / "d.json", io::dump(io::detections_json(recs)));
  const auto back = io::read_detections(dir / "d.json");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image_id, 3);
  EXPECT_EQ(back[0].detection, recs[0].detection);
  EXPECT_EQ(back[0].heatmap_file, "maps/a.f32");
  EXPECT_TRUE(back[1].heatmap_file.empty());
  io::write_text(dir / "bad.json", R"([{"image_id": 1, "id": 0, "class_id": 0, "score": 1.5, "bbox": [0, 0, 1, 1]}])");
  EXPECT_THROW(io::read_detections(dir / "bad.json"), io::InputError);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  const auto dir = scratch("ckpt");
  ToyDetectorConfig dc;
  dc.head_depth = 1;
  ToyDetector det(dc, 5);
  io::write_checkpoint(dir / "m.ckpt", det);
  const auto back = io::read_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back.config().head_depth, 1);
  SynthConfig sc;
  const auto img = generate_sample(sc, 0).image;
  EXPECT_EQ(back.infer(img), det.infer(img));
  io::write_checkpoint(dir / "m2.ckpt", back);
  EXPECT_EQ(slurp(dir / "m.ckpt"), slurp(dir / "m2.ckpt"));
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto dir = scratch("ckpt_bad");
  io::write_text(dir / "x.ckpt", "not a checkpoint at all");
  EXPECT_THROW(io::read_checkpoint(dir / "x.ckpt"), io::InputError);
  io::write_checkpoint(dir / "m.ckpt", ToyDetector(ToyDetectorConfig{}, 1));
  fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") - 8);
  EXPECT_THROW(io::read_checkpoint(dir / "m.ckpt"), io::InputError);
  EXPECT_THROW(io::read_checkpoint(dir / "none.ckpt"), io::InputError);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c;
  c.odam_train = true;
  c.aux.common_h = 10;
  c.aux.common_w = 12;
  c.epochs = 3;
  c.noise_patch_prob = 0.25;
  c.seed = 77;
  const auto b = io::train_config_from_json(io::to_json(c));
  EXPECT_TRUE(b.odam_train);
  EXPECT_EQ(b.aux.common_h, 10);
  EXPECT_EQ(b.aux.common_w, 12);
  EXPECT_EQ(b.epochs, 3);
  EXPECT_EQ(b.noise_patch_prob, 0.25);
  EXPECT_EQ(b.seed, 77u);
  EXPECT_THROW(io::train_config_from_json(io::json{{"epochs", "many"}}), io::InputError);
}

TEST(EvalReportJson, FixedKeyOrderAndNulls) {
  EvalReport r;
  r.per_object.push_back({1, 0, {{"pg_box", 1.0}, {"odi_box", std::nullopt}}});
  r.aggregate_rows();
  const auto j = io::to_json(r, io::json{{"seed", 1}}, {"w"});
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"config", "per_object", "aggregate", "warnings"}));
  EXPECT_EQ(j["per_object"][0]["pg_box"], 1.0);
  EXPECT_TRUE(j["per_object"][0]["odi_box"].is_null());
  EXPECT_TRUE(j["per_object"][0]["vea_auc"].is_null());
  EXPECT_EQ(io::dump(j), io::dump(io::to_json(r, io::json{{"seed", 1}}, {"w"})));
}
