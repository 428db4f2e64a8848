#pragma once

// On-disk formats: PNG images and masks, annotation / detection JSON,
// raw float32 heat maps with a JSON sidecar, detector checkpoints and
// evaluation reports. Needs libpng and nlohmann_json.

#include <png.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "odamkit/core.hpp"
#include "odamkit/metrics.hpp"
#include "odamkit/synth.hpp"
#include "odamkit/toydet.hpp"

namespace odamkit::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "odamkit io assumes a little-endian host");

/// Error for unreadable or inconsistent input files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rounds to `digits` significant digits so reports serialize stably.
inline double round_sig(double x, int digits = 6) {
  if (!std::isfinite(x) || x == 0.0) return x;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return std::strtod(buf, nullptr);
}

inline json num(double x) { return json(round_sig(x)); }
inline json num(const std::optional<double>& x) { return x ? num(*x) : json(nullptr); }

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

inline json read_json(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw InputError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw InputError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct PngRead {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

inline PngRead read_png_raw(const fs::path& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw InputError("cannot open " + path.string());
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(fp, std::fclose);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  PngRead out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_strip_alpha(png);
  const auto ct = png_get_color_type(png, info);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (ct == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
  rows.resize(out.height);
  for (int r = 0; r < out.height; ++r) rows[r] = out.pixels.data() + static_cast<std::size_t>(r) * out.width * out.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void write_png_raw(const fs::path& path, int width, int height, int channels,
                          const std::vector<std::uint8_t>& pixels) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> guard(fp, std::fclose);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace detail

inline void write_png(const fs::path& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) throw std::invalid_argument("PNG export supports 1 or 3 channels");
  std::vector<std::uint8_t> px(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch)
        px[(static_cast<std::size_t>(r) * img.width + c) * img.channels + ch] = detail::to_byte(img.at(ch, r, c));
  detail::write_png_raw(path, img.width, img.height, img.channels, px);
}

/// RGB image in [0, 1]; grayscale files are replicated to three channels.
inline Image read_png(const fs::path& path) {
  const auto raw = detail::read_png_raw(path);
  Image img(raw.width, raw.height, 3);
  for (int r = 0; r < raw.height; ++r)
    for (int c = 0; c < raw.width; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const int src = std::min(ch, raw.channels - 1);
        img.at(ch, r, c) = raw.pixels[(static_cast<std::size_t>(r) * raw.width + c) * raw.channels + src] / 255.0;
      }
  return img;
}

inline void write_mask_png(const fs::path& path, const Mask& m) {
  std::vector<std::uint8_t> px(m.data().begin(), m.data().end());
  for (auto& v : px) v = v ? 255 : 0;
  detail::write_png_raw(path, m.width(), m.height(), 1, px);
}

inline Mask read_mask_png(const fs::path& path) {
  const auto raw = detail::read_png_raw(path);
  Mask m(raw.height, raw.width);
  for (int r = 0; r < raw.height; ++r)
    for (int c = 0; c < raw.width; ++c)
      if (raw.pixels[(static_cast<std::size_t>(r) * raw.width + c) * raw.channels] != 0) m.set(r, c);
  return m;
}

// ---------------------------------------------------------------------------
// Heat maps: raw f32le plus "<file>.json" sidecar

inline fs::path heatmap_sidecar(const fs::path& bin) { return fs::path(bin.string() + ".json"); }

inline void write_heatmap(const fs::path& bin, const HeatMap& h) {
  if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
  std::vector<float> v(h.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(h.values()[i]);
  std::ofstream f(bin, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + bin.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  json meta;
  meta["dtype"] = "f32le";
  meta["shape"] = {h.height(), h.width()};
  meta["space"] = to_string(h.space());
  write_text(heatmap_sidecar(bin), dump(meta));
}

inline HeatMap read_heatmap(const fs::path& bin) {
  const json meta = read_json(heatmap_sidecar(bin));
  if (meta.value("dtype", "") != "f32le") throw InputError("unsupported heat-map dtype in " + bin.string());
  const auto& shape = meta.at("shape");
  if (!shape.is_array() || shape.size() != 2) throw InputError("heat-map shape must be [H, W]");
  const int h = shape[0].get<int>(), w = shape[1].get<int>();
  if (h <= 0 || w <= 0) throw InputError("heat-map shape must be positive");
  std::ifstream f(bin, std::ios::binary);
  if (!f) throw InputError("cannot open " + bin.string());
  std::vector<float> v(static_cast<std::size_t>(h) * w);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(v.size() * sizeof(float)) || f.peek() != EOF)
    throw InputError("heat-map payload size mismatch: " + bin.string());
  return HeatMap(h, w, std::vector<double>(v.begin(), v.end()), space_from_string(meta.at("space").get<std::string>()));
}

// ---------------------------------------------------------------------------
// Annotations and datasets

inline json box_json(const BBox& b) { return json::array({num(b.x1), num(b.y1), num(b.x2), num(b.y2)}); }

inline BBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw InputError("bbox must be [x1, y1, x2, y2]");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw InputError("invalid bbox");
  return b;
}

struct DatasetImage {
  ImageAnnotations annotations;
  std::string file_name;
};

/// Reads the annotation file; mask paths resolve relative to its directory.
inline std::vector<DatasetImage> read_annotations(const fs::path& path, bool load_masks = true) {
  const json j = read_json(path);
  const fs::path base = path.parent_path();
  std::vector<DatasetImage> out;
  std::map<std::int64_t, std::size_t> index;
  try {
    for (const auto& im : j.at("images")) {
      DatasetImage d;
      d.annotations.image_id = im.at("id").get<std::int64_t>();
      d.annotations.width = im.at("width").get<int>();
      d.annotations.height = im.at("height").get<int>();
      d.file_name = im.value("file_name", "");
      if (index.count(d.annotations.image_id)) throw InputError("duplicate image id");
      index[d.annotations.image_id] = out.size();
      out.push_back(std::move(d));
    }
    for (const auto& a : j.at("annotations")) {
      const auto id = a.at("image_id").get<std::int64_t>();
      auto it = index.find(id);
      if (it == index.end()) throw InputError("annotation refers to unknown image " + std::to_string(id));
      GroundTruthObject o;
      o.object_id = a.at("object_id").get<std::int64_t>();
      o.class_id = a.at("class_id").get<int>();
      o.bbox = box_from_json(a.at("bbox"));
      if (load_masks && a.contains("mask_file") && !a["mask_file"].is_null())
        o.mask = read_mask_png(base / a["mask_file"].get<std::string>());
      out[it->second].annotations.objects.push_back(std::move(o));
    }
  } catch (const json::exception& e) {
    throw InputError("bad annotation schema in " + path.string() + ": " + e.what());
  }
  for (const auto& d : out) {
    try {
      d.annotations.validate();
    } catch (const std::invalid_argument& e) {
      throw InputError("image " + std::to_string(d.annotations.image_id) + ": " + e.what());
    }
  }
  return out;
}

inline std::string image_file_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld.png", static_cast<long long>(id));
  return buf;
}

/// Writes images/, masks/ and annotations.json under `dir`.
inline void write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  json images = json::array(), anns = json::array();
  for (const auto& s : samples) {
    const auto& a = s.annotations;
    const std::string name = image_file_name(a.image_id);
    write_png(dir / "images" / name, s.image);
    images.push_back({{"id", a.image_id}, {"width", a.width}, {"height", a.height}, {"file_name", "images/" + name}});
    for (const auto& o : a.objects) {
      json e{{"image_id", a.image_id}, {"object_id", o.object_id}, {"class_id", o.class_id}, {"bbox", box_json(o.bbox)}};
      if (o.mask) {
        const std::string mname = "masks/" + std::to_string(a.image_id) + "_" + std::to_string(o.object_id) + ".png";
        write_mask_png(dir / mname, *o.mask);
        e["mask_file"] = mname;
      }
      anns.push_back(e);
    }
  }
  write_text(dir / "annotations.json", dump(json{{"images", images}, {"annotations", anns}}));
}

inline std::vector<Sample> read_dataset(const fs::path& dir, bool load_masks = true) {
  std::vector<Sample> out;
  for (auto& d : read_annotations(dir / "annotations.json", load_masks)) {
    if (d.file_name.empty()) throw InputError("image entry without file_name");
    Sample s;
    s.image = read_png(dir / d.file_name);
    if (s.image.width != d.annotations.width || s.image.height != d.annotations.height)
      throw InputError("image size differs from annotation: " + d.file_name);
    s.annotations = std::move(d.annotations);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detections

struct DetectionRecord {
  std::int64_t image_id = 0;
  Detection detection;
  std::string heatmap_file;  // empty when absent
};

inline json detections_json(const std::vector<DetectionRecord>& recs) {
  json arr = json::array();
  for (const auto& r : recs) {
    json e{{"image_id", r.image_id},
           {"id", r.detection.id},
           {"class_id", r.detection.class_id},
           {"score", num(r.detection.score)},
           {"bbox", box_json(r.detection.bbox)}};
    if (!r.heatmap_file.empty()) e["heatmap_file"] = r.heatmap_file;
    arr.push_back(e);
  }
  return arr;
}

inline std::vector<DetectionRecord> read_detections(const fs::path& path) {
  const json j = read_json(path);
  if (!j.is_array()) throw InputError("detections file must hold a JSON array");
  std::vector<DetectionRecord> out;
  try {
    for (const auto& e : j) {
      DetectionRecord r;
      r.image_id = e.at("image_id").get<std::int64_t>();
      r.detection.id = e.at("id").get<std::int64_t>();
      r.detection.class_id = e.at("class_id").get<int>();
      r.detection.score = e.at("score").get<double>();
      if (!(r.detection.score >= 0 && r.detection.score <= 1)) throw InputError("score outside [0, 1]");
      r.detection.bbox = box_from_json(e.at("bbox"));
      if (e.contains("heatmap_file") && !e["heatmap_file"].is_null())
        r.heatmap_file = e["heatmap_file"].get<std::string>();
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw InputError("bad detection schema in " + path.string() + ": " + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configs

inline json to_json(const ToyDetectorConfig& c) {
  return json{{"backbone_channels", c.backbone_channels},
              {"neck_channels", c.neck_channels},
              {"head_depth", c.head_depth},
              {"head_channels", c.head_channels},
              {"num_classes", c.num_classes},
              {"image_w", c.image_w},
              {"image_h", c.image_h},
              {"stride", c.stride()},
              {"score_thresh", c.score_thresh},
              {"max_detections", c.max_detections},
              {"max_candidates", c.max_candidates},
              {"nms_iou", c.nms_iou}};
}

inline ToyDetectorConfig detector_config_from_json(const json& j) {
  ToyDetectorConfig c;
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.neck_channels = j.at("neck_channels").get<int>();
  c.head_depth = j.at("head_depth").get<int>();
  c.head_channels = j.at("head_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.image_w = j.at("image_w").get<int>();
  c.image_h = j.at("image_h").get<int>();
  c.score_thresh = j.value("score_thresh", c.score_thresh);
  c.max_detections = j.value("max_detections", c.max_detections);
  c.max_candidates = j.value("max_candidates", c.max_candidates);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  if (j.contains("stride") && j["stride"].get<int>() != c.stride())
    throw InputError("stride does not match the backbone depth");
  return c;
}

inline json to_json(const SynthConfig& c) {
  return json{{"image_w", c.image_w},         {"image_h", c.image_h},
              {"min_shapes", c.min_shapes},   {"max_shapes", c.max_shapes},
              {"min_size", c.min_size},       {"max_size", c.max_size},
              {"overlap_factor", c.overlap_factor}, {"noise_std", c.noise_std},
              {"same_class_fraction", c.same_class_fraction}, {"alpha", c.alpha},
              {"seed", c.seed}};
}

/// Training config file: {"odam_train", "common_size": [h, w], "epsilon", "weight", ...}.
inline json to_json(const TrainConfig& c) {
  return json{{"odam_train", c.odam_train},
              {"common_size", {c.aux.common_h, c.aux.common_w}},
              {"epsilon", c.aux.epsilon},
              {"weight", c.aux.weight},
              {"aux_layer", c.aux_layer},
              {"proposals_per_gt", c.proposals_per_gt},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"noise_patch_prob", c.noise_patch_prob},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  try {
    c.odam_train = j.value("odam_train", c.odam_train);
    if (j.contains("common_size")) {
      const auto& cs = j["common_size"];
      if (cs.is_array() && cs.size() == 2) {
        c.aux.common_h = cs[0].get<int>();
        c.aux.common_w = cs[1].get<int>();
      } else {
        c.aux.common_h = c.aux.common_w = cs.get<int>();
      }
    }
    c.aux.epsilon = j.value("epsilon", c.aux.epsilon);
    c.aux.weight = j.value("weight", c.aux.weight);
    c.aux_layer = j.value("aux_layer", c.aux_layer);
    c.proposals_per_gt = j.value("proposals_per_gt", c.proposals_per_gt);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.noise_patch_prob = j.value("noise_patch_prob", c.noise_patch_prob);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw InputError(std::string("bad training config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: "ODAMCKPT", u64 manifest length, manifest JSON, f64le payload.

inline constexpr char kCheckpointMagic[8] = {'O', 'D', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(const fs::path& path, const ToyDetector& det) {
  json tensors = json::array();
  const auto names = det.param_names();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < det.params().size(); ++i) {
    tensors.push_back({{"name", names[i]}, {"shape", det.params()[i].shape()}, {"offset", offset}});
    offset += det.params()[i].numel();
  }
  const json manifest{{"format_version", kCheckpointVersion},
                      {"det_cfg", to_json(det.config())},
                      {"layer_names", det.layer_names()},
                      {"tensors", tensors}};
  const std::string m = manifest.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(kCheckpointMagic, 8);
  const std::uint64_t len = m.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& p : det.params())
    f.write(reinterpret_cast<const char*>(p.value().data()), static_cast<std::streamsize>(p.numel() * sizeof(double)));
}

inline ToyDetector read_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&len), 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw InputError("not an odamkit checkpoint");
  if (len > (1u << 26)) throw InputError("checkpoint manifest too large");
  std::string m(len, '\0');
  f.read(m.data(), static_cast<std::streamsize>(len));
  json manifest;
  try {
    manifest = json::parse(m);
  } catch (const json::exception& e) {
    throw InputError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format_version", 0) != kCheckpointVersion) throw InputError("unsupported checkpoint version");
  ToyDetector det(detector_config_from_json(manifest.at("det_cfg")));
  const auto names = det.param_names();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != det.params().size()) throw InputError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != names[i] ||
        tensors[i].at("shape").get<ad::Shape>() != det.params()[i].shape())
      throw InputError("checkpoint tensor layout mismatch at " + names[i]);
    auto& v = det.params()[i].mutable_value();
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!f || f.peek() != EOF) throw InputError("checkpoint payload size mismatch");
  return det;
}

// ---------------------------------------------------------------------------
// Evaluation report

inline json to_json(const EvalReport& r, const json& config, const std::vector<std::string>& warnings = {}) {
  json rows = json::array();
  for (const auto& row : r.per_object) {
    json e{{"object_id", row.object_id}, {"image_id", row.image_id}};
    for (const auto& name : eval_metric_names()) {
      auto it = row.values.find(name);
      e[name] = it == row.values.end() ? json(nullptr) : num(it->second);
    }
    rows.push_back(e);
  }
  json agg = json::object();
  for (const auto& name : eval_metric_names()) {
    auto it = r.aggregate.find(name);
    agg[name] = it == r.aggregate.end() ? json(nullptr) : num(it->second);
  }
  json out{{"config", config}, {"per_object", rows}, {"aggregate", agg}};
  out["warnings"] = warnings;
  return out;
}

}  // namespace odamkit::io
