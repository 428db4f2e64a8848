// odamkit command-line tool.
//
// Exit codes: 0 success, 2 bad flags, 3 missing or inconsistent inputs,
// 4 runtime failure. ODAMKIT_SEED overrides --seed when set.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>

#include "odamkit/io.hpp"

using namespace odamkit;
namespace fs = std::filesystem;
using io::json;
using io::num;

namespace {

constexpr int kBadFlags = 2;
constexpr int kBadInput = 3;
constexpr int kRuntime = 4;

struct FlagError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t resolve_seed(std::uint64_t flag) {
  const char* env = std::getenv("ODAMKIT_SEED");
  if (!env || !*env) return flag;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw FlagError("ODAMKIT_SEED is not an unsigned integer");
  return v;
}

fs::path snapshot_path(const fs::path& out, bool is_dir) {
  return is_dir ? out / "config.json" : fs::path(out.string() + ".config.json");
}

void write_snapshot(const fs::path& out, bool is_dir, const std::string& command, const json& options) {
  io::write_text(snapshot_path(out, is_dir), io::dump(json{{"command", command}, {"options", options}}));
}

TargetKind target_kind(const std::string& s) {
  if (s == "class") return TargetKind::class_score;
  if (s == "x1") return TargetKind::box_x1;
  if (s == "y1") return TargetKind::box_y1;
  if (s == "x2") return TargetKind::box_x2;
  if (s == "y2") return TargetKind::box_y2;
  throw FlagError("unknown target " + s);
}

std::shared_ptr<ToyDetector> load_detector(const fs::path& p) {
  return std::make_shared<ToyDetector>(io::read_checkpoint(p));
}

void check_layer(const ToyDetector& det, const std::string& layer) {
  const auto names = det.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) throw FlagError("unknown layer " + layer);
}

json detection_json(const Detection& d) {
  return json{{"id", d.id}, {"class_id", d.class_id}, {"score", num(d.score)}, {"bbox", io::box_json(d.bbox)}};
}

// ---------------------------------------------------------------------------

struct SynthOpts {
  std::string out;
  int n_images = 100;
  double overlap = 0.3;
  double same_class = 0.5;
  int min_shapes = 3, max_shapes = 6;
  double noise = 0.03;
  std::int64_t first_index = 0;
  std::uint64_t seed = 0;
};

int run_synth(const SynthOpts& o) {
  SynthConfig cfg;
  cfg.overlap_factor = o.overlap;
  cfg.same_class_fraction = o.same_class;
  cfg.min_shapes = o.min_shapes;
  cfg.max_shapes = o.max_shapes;
  cfg.noise_std = o.noise;
  cfg.seed = resolve_seed(o.seed);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FlagError(e.what());
  }
  const auto samples = generate_dataset(cfg, o.n_images, o.first_index);
  const fs::path dir = o.out;
  io::write_dataset(dir, samples);
  std::size_t objects = 0, crowded = 0;
  for (const auto& s : samples) {
    objects += s.annotations.objects.size();
    const auto f = crowd_flags(s.annotations.objects);
    crowded += std::find(f.begin(), f.end(), true) != f.end();
  }
  const json manifest{{"n_images", samples.size()},
                      {"n_objects", objects},
                      {"n_crowded_images", crowded},
                      {"files", {{"images", samples.size()}, {"masks", objects}, {"annotations", "annotations.json"}}},
                      {"config", io::to_json(cfg)}};
  io::write_text(dir / "manifest.json", io::dump(manifest));
  write_snapshot(dir, true, "synth", json{{"out", o.out}, {"n_images", o.n_images}, {"first_index", o.first_index},
                                          {"synth", io::to_json(cfg)}});
  std::cout << "wrote " << samples.size() << " images, " << objects << " objects to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string data, out, config;
  bool odam_train = false;
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-2;
  double aux_weight = 1.0;
  int proposals_per_gt = 3;
  int head_depth = 3;
  std::uint64_t seed = 0;
  bool quiet = false;
};

int run_train(const TrainOpts& o, const CLI::App& app) {
  TrainConfig tc;
  if (!o.config.empty()) tc = io::train_config_from_json(io::read_json(o.config));
  // explicit flags win over the config file
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--odam-train")) tc.odam_train = o.odam_train;
  if (given("--epochs") || o.config.empty()) tc.epochs = o.epochs;
  if (given("--batch-size") || o.config.empty()) tc.batch_size = o.batch_size;
  if (given("--lr") || o.config.empty()) tc.lr = o.lr;
  if (given("--aux-weight") || o.config.empty()) tc.aux.weight = o.aux_weight;
  if (given("--proposals-per-gt") || o.config.empty()) tc.proposals_per_gt = o.proposals_per_gt;
  if (given("--seed") || o.config.empty() || std::getenv("ODAMKIT_SEED")) tc.seed = resolve_seed(o.seed);
  ToyDetectorConfig dc;
  dc.head_depth = o.head_depth;
  try {
    tc.validate();
    dc.validate();
  } catch (const std::invalid_argument& e) {
    throw FlagError(e.what());
  }
  const auto data = io::read_dataset(o.data, false);
  if (data.empty()) throw io::InputError("dataset is empty");
  for (const auto& s : data)
    if (s.image.width != dc.image_w || s.image.height != dc.image_h)
      throw io::InputError("image size differs from the detector input size");

  ToyDetector det(dc, tc.seed);
  json epochs = json::array();
  train_toy(det, data, tc, [&](const EpochLog& e) {
    epochs.push_back({{"epoch", e.epoch},
                      {"det_loss", num(e.det_loss)},
                      {"aux_loss", num(e.aux_loss)},
                      {"aux_pairs", num(e.aux_pairs)}});
    if (!o.quiet)
      std::fprintf(stderr, "epoch %d  det %.4f  aux %.4f\n", e.epoch, e.det_loss, e.aux_loss);
  });
  const fs::path out = o.out;
  io::write_checkpoint(out, det);
  const json cfg{{"data", o.data}, {"n_images", data.size()}, {"train", io::to_json(tc)}, {"detector", io::to_json(dc)}};
  io::write_text(fs::path(out.string() + ".log.json"), io::dump(json{{"config", cfg}, {"epochs", epochs}}));
  write_snapshot(out, false, "train", cfg);
  return 0;
}

// ---------------------------------------------------------------------------

struct DetectOpts {
  std::string ckpt, data, out, heatmaps, layer = "neck";
  std::optional<double> score_thresh;
  bool candidates = false;
  int max_per_image = 100;
};

int run_detect(const DetectOpts& o) {
  auto det = load_detector(o.ckpt);
  check_layer(*det, o.layer);
  if (o.score_thresh) det->set_score_thresh(*o.score_thresh);
  ToyProvider prov(det, o.layer);
  const auto data = io::read_dataset(o.data, false);
  std::vector<io::DetectionRecord> recs;
  SmoothingConfig sm;
  for (const auto& s : data) {
    auto dets = o.candidates ? prov.candidates(s.image) : prov.detect(s.image);
    if (dets.size() > static_cast<std::size_t>(o.max_per_image)) dets.resize(o.max_per_image);
    for (const auto& d : dets) {
      io::DetectionRecord r{s.annotations.image_id, d, ""};
      if (!o.heatmaps.empty()) {
        const auto h = odam_heatmap(prov.gradients(s.image, {TargetKind::class_score, d.id, -1}), d, sm);
        const std::string name = std::to_string(s.annotations.image_id) + "_" + std::to_string(d.id) + ".f32";
        io::write_heatmap(fs::path(o.heatmaps) / name, h);
        r.heatmap_file = (fs::path(o.heatmaps) / name).string();
      }
      recs.push_back(std::move(r));
    }
  }
  io::write_text(o.out, io::dump(io::detections_json(recs)));
  write_snapshot(o.out, false, "detect",
                 json{{"ckpt", o.ckpt}, {"data", o.data}, {"layer", o.layer}, {"candidates", o.candidates},
                      {"score_thresh", det->config().score_thresh},
                      {"max_per_image", o.max_per_image}, {"heatmaps", o.heatmaps}});
  return 0;
}

// ---------------------------------------------------------------------------

struct ExplainOpts {
  std::string ckpt, image, target = "class", layer = "neck", out;
  std::int64_t detection_id = -1;
  std::optional<double> score_thresh;
  bool no_smoothing = false;
};

int run_explain(const ExplainOpts& o) {
  auto det = load_detector(o.ckpt);
  check_layer(*det, o.layer);
  if (o.score_thresh) det->set_score_thresh(*o.score_thresh);
  const Image img = io::read_png(o.image);
  if (img.width != det->config().image_w || img.height != det->config().image_h || img.channels != 3)
    throw io::InputError("image does not match the detector input size");
  ToyProvider prov(det, o.layer);
  // final detections first, then pre-NMS candidates
  auto find = [&](const std::vector<Detection>& v) {
    return std::find_if(v.begin(), v.end(), [&](const Detection& d) { return d.id == o.detection_id; });
  };
  auto dets = prov.detect(img);
  auto it = find(dets);
  if (it == dets.end()) {
    dets = prov.candidates(img);
    it = find(dets);
  }
  if (it == dets.end()) throw io::InputError("detection id " + std::to_string(o.detection_id) + " not found");
  const Detection d = *it;

  SmoothingConfig sm;
  if (o.no_smoothing) sm.mode = SmoothingConfig::Mode::none;
  const std::vector<std::string> all{"class", "x1", "y1", "x2", "y2"};
  const bool combo = o.target == "combo";
  const std::vector<std::string> targets = combo ? all : std::vector<std::string>{o.target};
  const fs::path dir = o.out;
  fs::create_directories(dir);

  json files = json::object();
  std::vector<HeatMap> maps;
  for (const auto& t : targets) {
    const auto pair = prov.gradients(img, {target_kind(t), d.id, -1});
    const auto h = upsample_to_image(odam_heatmap(pair, d, sm), img.width, img.height);
    io::write_heatmap(dir / (t + ".f32"), h);
    io::write_png(dir / (t + "_overlay.png"), render_overlay(img, h));
    files[t] = t + ".f32";
    maps.push_back(h);
  }
  if (combo) {
    const auto c = combined_heatmap(maps);
    io::write_heatmap(dir / "combo.f32", c);
    io::write_png(dir / "combo_overlay.png", render_overlay(img, c));
    files["combo"] = "combo.f32";
  }
  const double sigma = o.no_smoothing ? 0.0 : adaptive_sigma(d, det->layer_stride(prov.layer()), sm);
  const json opts{{"ckpt", o.ckpt}, {"image", o.image}, {"detection_id", o.detection_id},
                  {"target", o.target}, {"layer", o.layer}, {"smoothing", !o.no_smoothing},
                  {"score_thresh", det->config().score_thresh}};
  io::write_text(dir / "explain.json",
                 io::dump(json{{"config", opts}, {"detection", detection_json(d)}, {"sigma", num(sigma)}, {"files", files}}));
  write_snapshot(dir, true, "explain", opts);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalOpts {
  std::string ckpt, data, out, layer = "neck";
  std::vector<std::string> methods{"odam", "gradcam"};
  std::vector<std::string> metrics;
  double min_iou = 0.9;
  int steps = 50;
  int max_objects = 0;
  std::uint64_t seed = 0;
};

int run_evaluate(const EvalOpts& o) {
  auto det = load_detector(o.ckpt);
  check_layer(*det, o.layer);
  const std::set<std::string> known_methods{"odam", "gradcam", "random"};
  for (const auto& m : o.methods)
    if (!known_methods.count(m)) throw FlagError("unknown method " + m);
  std::vector<std::string> metrics = o.metrics.empty() ? eval_metric_names() : o.metrics;
  for (const auto& m : metrics)
    if (std::find(eval_metric_names().begin(), eval_metric_names().end(), m) == eval_metric_names().end())
      throw FlagError("unknown metric " + m);
  auto want = [&](const std::string& m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };
  const std::uint64_t seed = resolve_seed(o.seed);

  ToyProvider prov(det, o.layer);
  const auto data = io::read_dataset(o.data, true);
  SmoothingConfig sm;
  std::map<std::string, EvalReport> reports;
  std::vector<std::string> warnings;
  std::size_t selected = 0;

  for (const auto& s : data) {
    if (o.max_objects > 0 && selected >= static_cast<std::size_t>(o.max_objects)) break;
    const auto dets = prov.detect(s.image);
    const auto& objs = s.annotations.objects;
    for (std::size_t g = 0; g < objs.size(); ++g) {
      if (o.max_objects > 0 && selected >= static_cast<std::size_t>(o.max_objects)) break;
      const auto& obj = objs[g];
      const Detection* best = nullptr;
      double bi = -1;
      for (const auto& d : dets)
        if (d.class_id == obj.class_id && iou(d.bbox, obj.bbox) > bi) {
          bi = iou(d.bbox, obj.bbox);
          best = &d;
        }
      if (!best || !(bi > o.min_iou)) continue;
      ++selected;
      const auto pair = prov.gradients(s.image, {TargetKind::class_score, best->id, -1});
      std::vector<GroundTruthObject> others;
      for (std::size_t k = 0; k < objs.size(); ++k)
        if (k != g) others.push_back(objs[k]);
      const bool masks = obj.mask.has_value() &&
                         std::all_of(objs.begin(), objs.end(), [](const GroundTruthObject& x) { return x.mask.has_value(); });
      for (const auto& method : o.methods) {
        HeatMap h;
        if (method == "odam") {
          h = upsample_to_image(odam_heatmap(pair, *best, sm), s.image.width, s.image.height);
        } else if (method == "gradcam") {
          h = upsample_to_image(gradcam_heatmap(pair), s.image.width, s.image.height);
        } else {
          Rng r(mix_seed(seed, static_cast<std::uint64_t>(selected)));
          h = HeatMap(s.image.height, s.image.width, Space::image);
          for (double& v : h.values()) v = r.uniform();
        }
        ObjectRow row;
        row.object_id = obj.object_id;
        row.image_id = s.annotations.image_id;
        auto put = [&](const std::string& k, std::optional<double> v) {
          if (want(k)) row.values[k] = v;
        };
        const Region box(obj.bbox);
        put("pg_box", pointing_game(h, box) ? 1.0 : 0.0);
        put("en_pg_box", energy_pg(h, box));
        put("odi_box", odi(h, obj, others, false));
        if (want("compactness")) put("compactness", compactness(h, obj.bbox));
        if (masks) {
          const Region mk(*obj.mask);
          put("pg_mask", pointing_game(h, mk) ? 1.0 : 0.0);
          put("en_pg_mask", energy_pg(h, mk));
          put("odi_mask", odi(h, obj, others, true));
          if (want("vea_auc")) put("vea_auc", vea_auc(normalize_heatmap(h), *obj.mask));
        } else {
          for (const char* k : {"pg_mask", "en_pg_mask", "odi_mask", "vea_auc"}) put(k, std::nullopt);
        }
        const std::uint64_t cs = mix_seed(seed, static_cast<std::uint64_t>(selected) + 0x5eedULL);
        if (want("deletion_auc")) put("deletion_auc", auc(deletion_curve(s.image, *best, h, prov, o.steps, cs)));
        if (want("insertion_auc")) put("insertion_auc", auc(insertion_curve(s.image, *best, h, prov, o.steps, cs)));
        reports[method].per_object.push_back(std::move(row));
      }
    }
  }
  if (selected == 0) warnings.push_back("no ground-truth object was detected with IoU above min_iou; report is empty");

  const json cfg{{"ckpt", o.ckpt}, {"data", o.data}, {"layer", o.layer}, {"methods", o.methods},
                 {"metrics", metrics}, {"min_iou", o.min_iou}, {"steps", o.steps},
                 {"max_objects", o.max_objects}, {"seed", seed}};
  json methods = json::object();
  for (const auto& m : o.methods) {
    auto& r = reports[m];
    r.aggregate_rows();
    const json j = io::to_json(r, json::object());
    methods[m] = json{{"n_objects", r.per_object.size()}, {"aggregate", j["aggregate"]}, {"per_object", j["per_object"]}};
  }
  io::write_text(o.out, io::dump(json{{"config", cfg}, {"n_objects", selected}, {"methods", methods}, {"warnings", warnings}}));
  write_snapshot(o.out, false, "evaluate", cfg);
  return 0;
}

// ---------------------------------------------------------------------------

struct NmsOpts {
  std::string dets, data, out, method = "nms";
  double t_iou = 0.5, t_low = 0.2, t_high = 0.8, soft_sigma = 0.5, soft_thresh = 0.05;
  double score_thresh = 0.0;
  int short_edge = 50;
  bool sweep = false;
};

json detection_quality(const std::vector<Detection>& kept, const std::vector<GroundTruthObject>& gts,
                       double score_thresh) {
  const auto rp = recall_partition(kept, gts, score_thresh);
  return json{{"ap50", num(ap50(kept, gts))},
              {"recall_total", num(rp.total)},
              {"recall_crowd", num(rp.crowd)},
              {"recall_sparse", num(rp.sparse)},
              {"n_gt", rp.n_total},
              {"n_crowd", rp.n_crowd}};
}

int run_nms_compare(const NmsOpts& o) {
  NMSConfig cfg;
  cfg.t_iou = o.t_iou;
  cfg.t_low = o.t_low;
  cfg.t_high = o.t_high;
  cfg.soft_sigma = o.soft_sigma;
  cfg.soft_final_thresh = o.soft_thresh;
  cfg.corr_short_edge = o.short_edge;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FlagError(e.what());
  }
  const auto recs = io::read_detections(o.dets);
  const bool need_maps = o.method == "odam" || o.sweep;

  // group per image, heat vectors resized per the short-edge rule
  std::map<std::int64_t, std::vector<ScoredCandidate>> per_image;
  for (const auto& r : recs) {
    ScoredCandidate c{r.detection, std::nullopt};
    if (need_maps) {
      if (r.heatmap_file.empty()) throw io::InputError("detection " + std::to_string(r.detection.id) + " has no heat map");
      fs::path p = r.heatmap_file;
      if (p.is_relative() && !fs::exists(p)) p = fs::path(o.dets).parent_path() / p;
      const std::vector<HeatMap> one{io::read_heatmap(p)};
      c.heat_vector = prepare_heat_vectors(one, cfg.corr_short_edge)[0];
    }
    per_image[r.image_id].push_back(std::move(c));
  }

  std::map<std::int64_t, std::vector<GroundTruthObject>> gts;
  const bool have_gt = !o.data.empty();
  if (have_gt)
    for (auto& d : io::read_annotations(fs::path(o.data) / "annotations.json", false))
      gts[d.annotations.image_id] = std::move(d.annotations.objects);

  auto run = [&](const std::string& method, const NMSConfig& c) {
    std::map<std::int64_t, std::vector<Detection>> kept;
    for (const auto& [id, cands] : per_image) {
      if (method == "nms") kept[id] = classic_nms(cands, c.t_iou);
      else if (method == "soft") kept[id] = soft_nms(cands, c.soft_sigma, c.soft_final_thresh);
      else kept[id] = odam_nms(cands, c);
    }
    return kept;
  };
  // per-class AP averaged over classes, recall over all GTs
  auto quality = [&](const std::map<std::int64_t, std::vector<Detection>>& kept) {
    std::vector<Detection> all_d;
    std::vector<GroundTruthObject> all_g;
    std::int64_t offset = 0;
    // detections and GTs of different images must never match: shift each image far apart
    for (const auto& [id, g] : gts) {
      const double shift = static_cast<double>(offset++) * 1e5;
      for (auto o2 : g) {
        o2.bbox.x1 += shift;
        o2.bbox.x2 += shift;
        all_g.push_back(o2);
      }
      auto it = kept.find(id);
      if (it == kept.end()) continue;
      for (auto d : it->second) {
        d.bbox.x1 += shift;
        d.bbox.x2 += shift;
        d.id = d.id * 1000003 + id;
        all_d.push_back(d);
      }
    }
    json q = detection_quality(all_d, all_g, o.score_thresh);
    std::set<int> classes;
    for (const auto& g : all_g) classes.insert(g.class_id);
    CompensatedMean m;
    for (int cls : classes) {
      std::vector<Detection> dc;
      std::vector<GroundTruthObject> gc;
      for (const auto& d : all_d)
        if (d.class_id == cls) dc.push_back(d);
      for (const auto& g : all_g)
        if (g.class_id == cls) gc.push_back(g);
      m.add(ap50(dc, gc));
    }
    q["ap50"] = num(m.mean());
    return q;
  };

  const json cfg_j{{"dets", o.dets}, {"data", o.data}, {"method", o.method}, {"t_iou", o.t_iou},
                   {"t_low", o.t_low}, {"t_high", o.t_high}, {"soft_sigma", o.soft_sigma},
                   {"soft_final_thresh", o.soft_thresh}, {"score_thresh", o.score_thresh},
                   {"corr_short_edge", o.short_edge}, {"sweep", o.sweep}};
  json report{{"config", cfg_j}, {"method", o.method}};
  const auto kept = run(o.method, cfg);
  json kept_j = json::array(), kept_ids = json::array();
  for (const auto& [id, ds] : kept)
    for (const auto& d : ds) {
      json e = detection_json(d);
      e["image_id"] = id;
      kept_j.push_back(e);
      kept_ids.push_back({id, d.id});
    }
  report["kept_ids"] = kept_ids;
  report["n_candidates"] = recs.size();
  report["n_kept"] = kept_ids.size();
  if (have_gt) report.update(quality(kept));
  if (o.sweep) {
    json grid = json::array();
    const std::vector<double> lows{0.0, 0.1, 0.2, 0.3, 0.4, 0.5}, highs{0.6, 0.7, 0.8, 0.9, 1.0};
    for (double lo : lows)
      for (double hi : highs) {
        NMSConfig c = cfg;
        c.t_low = lo;
        c.t_high = hi;
        const auto k = run("odam", c);
        std::size_t n = 0;
        for (const auto& [id, ds] : k) n += ds.size();
        json e{{"t_low", num(lo)}, {"t_high", num(hi)}, {"n_kept", n}};
        if (have_gt) e.update(quality(k));
        grid.push_back(e);
      }
    report["sweep"] = grid;
  }
  report["kept"] = kept_j;
  io::write_text(o.out, io::dump(report));
  write_snapshot(o.out, false, "nms-compare", cfg_j);
  return 0;
}

// ---------------------------------------------------------------------------

struct SanityOpts {
  std::string ckpt, data, out, layer = "neck";
  int n_targets = 40;
  int n_images = 40;
  double min_score = 0.3;
  std::uint64_t seed = 0;
};

int run_sanity(const SanityOpts& o) {
  auto det = load_detector(o.ckpt);
  check_layer(*det, o.layer);
  const std::uint64_t seed = resolve_seed(o.seed);
  std::vector<Sample> data;
  if (!o.data.empty()) {
    data = io::read_dataset(o.data, false);
  } else {
    SynthConfig sc;
    sc.seed = mix_seed(seed, 0x73616e69ULL);
    data = generate_dataset(sc, o.n_images);
  }
  auto rnd = std::make_shared<ToyDetector>(*det);
  rnd->randomize(seed);
  ToyProvider trained(det, o.layer), randomized(rnd, o.layer);
  std::vector<SanityProbe> probes;
  std::vector<std::int64_t> image_ids;
  for (const auto& s : data) {
    for (const auto& d : trained.detect(s.image)) {
      if (static_cast<int>(probes.size()) >= o.n_targets) break;
      if (d.score < o.min_score) continue;
      probes.push_back({&s.image, {TargetKind::class_score, d.id, -1}, d});
      image_ids.push_back(s.annotations.image_id);
    }
    if (static_cast<int>(probes.size()) >= o.n_targets) break;
  }
  SmoothingConfig sm;
  json per = json::array();
  CompensatedMean mean;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const std::vector<SanityProbe> one{probes[i]};
    const double c = sanity_randomization(trained, randomized, one, sm);
    mean.add(c);
    per.push_back({{"image_id", image_ids[i]}, {"detection", detection_json(probes[i].detection)}, {"correlation", num(c)}});
  }
  const json cfg{{"ckpt", o.ckpt}, {"data", o.data}, {"layer", o.layer}, {"n_targets", o.n_targets},
                 {"n_images", o.n_images}, {"min_score", o.min_score}, {"seed", seed}};
  std::vector<std::string> warnings;
  if (probes.empty()) warnings.push_back("no detections above min_score");
  io::write_text(o.out, io::dump(json{{"config", cfg},
                                      {"n_targets", probes.size()},
                                      {"mean_correlation", num(mean.mean())},
                                      {"per_target", per},
                                      {"warnings", warnings}}));
  write_snapshot(o.out, false, "sanity", cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"odamkit: instance-specific heat maps for object detectors"};
  app.require_subcommand(1);

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic shapes dataset");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--n-images", so.n_images)->check(CLI::NonNegativeNumber);
  synth->add_option("--overlap", so.overlap, "fraction of shapes placed on a partner")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--same-class", so.same_class)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--min-shapes", so.min_shapes);
  synth->add_option("--max-shapes", so.max_shapes);
  synth->add_option("--noise", so.noise);
  synth->add_option("--first-index", so.first_index)->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", so.seed);

  TrainOpts to;
  auto* train = app.add_subcommand("train", "train the toy detector");
  train->add_option("--data", to.data)->required();
  train->add_option("--out", to.out, "checkpoint path")->required();
  train->add_option("--config", to.config, "training config JSON");
  train->add_flag("--odam-train", to.odam_train, "add the consistency / separation losses");
  train->add_option("--epochs", to.epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch-size", to.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--lr", to.lr)->check(CLI::PositiveNumber);
  train->add_option("--aux-weight", to.aux_weight)->check(CLI::NonNegativeNumber);
  train->add_option("--proposals-per-gt", to.proposals_per_gt)->check(CLI::PositiveNumber);
  train->add_option("--head-depth", to.head_depth)->check(CLI::Range(0, 8));
  train->add_option("--seed", to.seed);
  train->add_flag("--quiet", to.quiet);

  DetectOpts dopt;
  auto* detect = app.add_subcommand("detect", "run the detector over a dataset");
  detect->add_option("--ckpt", dopt.ckpt)->required();
  detect->add_option("--data", dopt.data)->required();
  detect->add_option("--out", dopt.out)->required();
  detect->add_option("--heatmaps", dopt.heatmaps, "directory for per-detection ODAM maps");
  detect->add_option("--layer", dopt.layer);
  detect->add_flag("--candidates", dopt.candidates, "emit pre-NMS candidates");
  detect->add_option("--score-thresh", dopt.score_thresh, "override the checkpoint's score threshold")
      ->check(CLI::Range(0.0, 0.999999));
  detect->add_option("--max-per-image", dopt.max_per_image)->check(CLI::PositiveNumber);

  ExplainOpts eo;
  auto* explain = app.add_subcommand("explain", "heat maps for one detection");
  explain->add_option("--ckpt", eo.ckpt)->required();
  explain->add_option("--image", eo.image)->required();
  explain->add_option("--detection-id", eo.detection_id)->required();
  explain->add_option("--target", eo.target)->check(CLI::IsMember({"class", "x1", "y1", "x2", "y2", "combo"}));
  explain->add_option("--layer", eo.layer);
  explain->add_option("--out", eo.out)->required();
  explain->add_flag("--no-smoothing", eo.no_smoothing);
  explain->add_option("--score-thresh", eo.score_thresh, "override the checkpoint's score threshold")
      ->check(CLI::Range(0.0, 0.999999));

  EvalOpts ev;
  auto* evaluate = app.add_subcommand("evaluate", "explanation metrics over a dataset");
  evaluate->add_option("--ckpt", ev.ckpt)->required();
  evaluate->add_option("--data", ev.data)->required();
  evaluate->add_option("--out", ev.out)->required();
  evaluate->add_option("--methods", ev.methods)->delimiter(',');
  evaluate->add_option("--metrics", ev.metrics)->delimiter(',');
  evaluate->add_option("--layer", ev.layer);
  evaluate->add_option("--min-iou", ev.min_iou)->check(CLI::Range(0.0, 1.0));
  evaluate->add_option("--steps", ev.steps)->check(CLI::Range(2, 100000));
  evaluate->add_option("--max-objects", ev.max_objects)->check(CLI::NonNegativeNumber);
  evaluate->add_option("--seed", ev.seed);

  NmsOpts no;
  auto* nmsc = app.add_subcommand("nms-compare", "duplicate removal with classic, soft or Odam-NMS");
  nmsc->add_option("--dets", no.dets)->required();
  nmsc->add_option("--data", no.data, "dataset for AP and recall");
  nmsc->add_option("--out", no.out)->required();
  nmsc->add_option("--method", no.method)->check(CLI::IsMember({"nms", "soft", "odam"}));
  nmsc->add_option("--t-iou", no.t_iou);
  nmsc->add_option("--t-low", no.t_low);
  nmsc->add_option("--t-high", no.t_high);
  nmsc->add_option("--soft-sigma", no.soft_sigma);
  nmsc->add_option("--soft-thresh", no.soft_thresh);
  nmsc->add_option("--score-thresh", no.score_thresh, "score threshold for crowd / sparse recall")
      ->check(CLI::Range(0.0, 1.0));
  nmsc->add_option("--short-edge", no.short_edge);
  nmsc->add_flag("--sweep", no.sweep, "grid over (t_low, t_high)");

  SanityOpts sa;
  auto* sanity = app.add_subcommand("sanity", "parameter randomization test");
  sanity->add_option("--ckpt", sa.ckpt)->required();
  sanity->add_option("--out", sa.out)->required();
  sanity->add_option("--data", sa.data, "dataset (synthetic images are generated when absent)");
  sanity->add_option("--layer", sa.layer);
  sanity->add_option("--n-targets", sa.n_targets)->check(CLI::PositiveNumber);
  sanity->add_option("--n-images", sa.n_images)->check(CLI::PositiveNumber);
  sanity->add_option("--min-score", sa.min_score)->check(CLI::Range(0.0, 1.0));
  sanity->add_option("--seed", sa.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kBadFlags;
  }

  try {
    if (*synth) return run_synth(so);
    if (*train) return run_train(to, *train);
    if (*detect) return run_detect(dopt);
    if (*explain) return run_explain(eo);
    if (*evaluate) return run_evaluate(ev);
    if (*nmsc) return run_nms_compare(no);
    if (*sanity) return run_sanity(sa);
  } catch (const FlagError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadFlags;
  } catch (const io::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kBadFlags;
}
