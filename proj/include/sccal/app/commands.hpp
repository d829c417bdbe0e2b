#pragma once

// The operator commands behind the `sc_calib` binary. Each command writes its
// outputs under RunConfig::output_dir together with a manifest.json, and
// returns the main JSON document it wrote. Wall-clock timings go to a separate
// timings.json so every other output is byte-reproducible.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sccal/anomaly.hpp"
#include "sccal/config.hpp"
#include "sccal/error.hpp"
#include "sccal/eval.hpp"
#include "sccal/image_io.hpp"
#include "sccal/numerics.hpp"
#include "sccal/pipeline.hpp"
#include "sccal/tensor_container.hpp"
#include "sccal/toy.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal::app {

namespace fs = std::filesystem;

struct DatasetItem {
  std::string name;
  fs::path image;
  std::optional<fs::path> label;
};

inline bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".ppm" || ext == ".pnm";
}

// A single image file, a directory of images, or a root with images/ and labels/.
inline std::vector<DatasetItem> list_dataset(const fs::path& input) {
  if (input.empty()) throw ConfigError("no input configured");
  if (!fs::exists(input)) throw IoError("input not found: " + input.string());
  std::vector<DatasetItem> items;
  if (fs::is_regular_file(input)) {
    items.push_back({input.stem().string(), input, std::nullopt});
    return items;
  }
  const fs::path images = fs::is_directory(input / "images") ? input / "images" : input;
  const fs::path labels = input / "labels";
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    DatasetItem item{e.path().stem().string(), e.path(), std::nullopt};
    for (const char* ext : {".png", ".pgm"}) {
      const fs::path l = labels / (item.name + ext);
      if (fs::exists(l)) {
        item.label = l;
        break;
      }
    }
    items.push_back(std::move(item));
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  if (items.empty()) throw DataError("no images found under " + images.string());
  return items;
}

struct Assets {
  EncoderWeights weights;
  TextBank text;
};

inline Assets load_assets(const RunConfig& cfg) {
  for (const auto& [what, p] : {std::pair{"weights", cfg.weights}, std::pair{"text bank", cfg.text_bank}}) {
    if (p.empty()) throw ConfigError(std::string("no ") + what + " path configured");
    if (!fs::exists(p)) throw IoError(std::string(what) + " file not found: " + p.string());
  }
  Assets a{EncoderWeights::from_container(TensorContainer::load(cfg.weights)),
           TextBank::from_container(TensorContainer::load(cfg.text_bank))};
  if (static_cast<std::size_t>(a.weights.shape.proj_dim) != a.text.embeddings.cols()) {
    throw DataError("text bank width " + std::to_string(a.text.embeddings.cols()) + " != model projection width " +
                    std::to_string(a.weights.shape.proj_dim));
  }
  return a;
}

inline SlideOptions slide_options(const RunConfig& cfg, const EncoderWeights& w) {
  SlideOptions o;
  o.window = cfg.window.value_or(w.shape.image_size);
  o.stride = cfg.stride.value_or(std::max(1, o.window / 2));
  o.jobs = std::max(1, cfg.jobs);
  if (o.window % w.shape.patch != 0) throw ConfigError("window must be a multiple of the patch size");
  return o;
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  TensorContainer::write_file_atomic(path, text);
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

class OutputLog {
 public:
  OutputLog(fs::path root, std::string command) : root_(std::move(root)), command_(std::move(command)) {
    fs::create_directories(root_);
  }
  fs::path path(const std::string& rel) {
    files_.push_back(rel);
    const fs::path full = root_ / rel;
    fs::create_directories(full.parent_path());
    return full;
  }
  void finish() {
    std::sort(files_.begin(), files_.end());
    write_json(root_ / "manifest.json", json{{"command", command_}, {"files", files_}});
  }

 private:
  fs::path root_;
  std::string command_;
  std::vector<std::string> files_;
};

inline json stage_timings_json(const std::map<std::string, double>& ms) {
  json j = json::object();
  for (const auto& [k, v] : ms) j[k] = v;
  return j;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline json iou_json(const ConfusionAccumulator& acc, const TextBank& text) {
  json per_class = json::array();
  const auto ious = acc.per_class_iou();
  for (std::size_t c = 0; c < ious.size(); ++c) {
    per_class.push_back({{"index", c},
                         {"name", c < text.names.size() ? text.names[c] : std::to_string(c)},
                         {"iou", ious[c] ? json(*ious[c]) : json(nullptr)}});
  }
  const double m = acc.miou();
  return json{{"miou", std::isnan(m) ? json(nullptr) : json(m)}, {"pixels", acc.total()}, {"per_class", per_class}};
}

inline json cmd_segment(const RunConfig& cfg) {
  const Assets assets = load_assets(cfg);
  const SlideOptions opt = slide_options(cfg, assets.weights);
  validate_config(cfg.pipeline, assets.weights.shape.depth);
  OutputLog out(cfg.output_dir, "segment");
  json images = json::array();
  json timings = json::object();
  std::set<std::string> timed_stages = {"total"};
  for (const auto& item : list_dataset(cfg.input)) {
    const auto t0 = std::chrono::steady_clock::now();
    const RgbImage rgb = read_rgb_image(item.image);
    SlideOptions o = opt;
    o.keep_logits = cfg.save_logits;
    SlideStats stats;
    const SegmentationMap seg = segment_image(rgb, assets.weights, assets.text, cfg.pipeline, cfg.short_side, o, &stats);
    const std::string png = "labels/" + item.name + ".png";
    write_label_png(out.path(png), seg.height, seg.width, seg.labels);
    json entry{{"name", item.name}, {"height", seg.height}, {"width", seg.width},
               {"windows", stats.windows}, {"min_hits", stats.min_hits}, {"label_png", png}};
    if (seg.logits) {
      const std::string rel = "logits/" + item.name + ".sct";
      TensorContainer c;
      c.add("logits", {static_cast<std::uint32_t>(seg.num_classes), static_cast<std::uint32_t>(seg.height),
                       static_cast<std::uint32_t>(seg.width)},
            seg.logits->data());
      c.save(out.path(rel));
      entry["logits"] = rel;
    }
    std::vector<std::uint64_t> histogram(static_cast<std::size_t>(seg.num_classes), 0);
    for (int l : seg.labels) ++histogram[static_cast<std::size_t>(l)];
    entry["label_histogram"] = histogram;
    images.push_back(entry);
    json t = stage_timings_json(stats.stage_ms);
    t["total"] = elapsed_ms(t0);
    for (const auto& [k, v] : t.items()) timed_stages.insert(k);
    timings[item.name] = t;
  }
  // Wall-clock values live in timings.json so summary.json stays reproducible.
  json summary{{"command", "segment"},
               {"vanilla", cfg.pipeline.is_vanilla()},
               {"standard_last_layer", cfg.pipeline.uses_standard_last_layer()},
               {"config", to_json(cfg)},
               {"categories", assets.text.names},
               {"images", images},
               {"timings", {{"file", "timings.json"}, {"stages", timed_stages}}}};
  write_json(out.path("summary.json"), summary);
  write_json(out.path("timings.json"), json{{"stage_ms", timings}});
  out.finish();
  return summary;
}

// mIoU of one pipeline configuration over every labelled item.
inline json evaluate_dataset(const RunConfig& cfg, const PipelineConfig& pipeline, const Assets& assets,
                             const std::vector<DatasetItem>& items) {
  validate_config(pipeline, assets.weights.shape.depth);
  const SlideOptions opt = slide_options(cfg, assets.weights);
  ConfusionAccumulator acc(static_cast<int>(assets.text.size()));
  int evaluated = 0;
  for (const auto& item : items) {
    if (!item.label) throw DataError("no ground-truth label map for " + item.image.string());
    const RgbImage rgb = read_rgb_image(item.image);
    const LabelMap gt = read_label_map(*item.label);
    const SegmentationMap seg = segment_image(rgb, assets.weights, assets.text, pipeline, cfg.short_side, opt);
    accumulate_miou(seg, gt, acc);
    ++evaluated;
  }
  json j = iou_json(acc, assets.text);
  j["images"] = evaluated;
  return j;
}

inline std::string per_class_csv(const json& metrics) {
  std::ostringstream csv;
  csv << "index,name,iou\n";
  for (const auto& r : metrics.at("per_class")) {
    csv << r.at("index").get<std::size_t>() << "," << r.at("name").get<std::string>() << ",";
    if (!r.at("iou").is_null()) csv << r.at("iou").dump();
    csv << "\n";
  }
  return csv.str();
}

inline json cmd_evaluate(const RunConfig& cfg) {
  const Assets assets = load_assets(cfg);
  const auto items = list_dataset(cfg.input);
  OutputLog out(cfg.output_dir, "evaluate");
  const auto t0 = std::chrono::steady_clock::now();
  json metrics = evaluate_dataset(cfg, cfg.pipeline, assets, items);
  json doc{{"command", "evaluate"}, {"config", to_json(cfg)}, {"metrics", metrics}};
  write_json(out.path("metrics.json"), doc);
  if (cfg.emit_csv) write_text(out.path("per_class_iou.csv"), per_class_csv(metrics));
  write_json(out.path("timings.json"), json{{"total_ms", elapsed_ms(t0)}});
  out.finish();
  return doc;
}

// Rungs add their toggles cumulatively on top of the configured pipeline
// with every stage switched off. "baseline" adds nothing.
inline std::vector<PipelineConfig> ladder_configs(const PipelineConfig& base_cfg,
                                                  const std::vector<std::vector<std::string>>& ladder) {
  if (ladder.empty()) throw ConfigError("ablation ladder is empty");
  PipelineConfig current = base_cfg;
  current.stages = StageToggles::none();
  std::vector<PipelineConfig> out;
  for (const auto& rung : ladder) {
    for (const auto& toggle : rung) {
      if (toggle == "baseline") continue;
      current.stages[toggle] = true;  // throws ConfigError naming unknown toggles
    }
    out.push_back(current);
  }
  return out;
}

inline json cmd_ablate(const RunConfig& cfg) {
  const auto rungs = ladder_configs(cfg.pipeline, cfg.ladder);
  const Assets assets = load_assets(cfg);
  const auto items = list_dataset(cfg.input);
  OutputLog out(cfg.output_dir, "ablate");
  json records = json::array();
  json timings = json::array();
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    json rec{{"rung", i}, {"added", cfg.ladder[i]}, {"pipeline", to_json(rungs[i])},
             {"metrics", evaluate_dataset(cfg, rungs[i], assets, items)}};
    records.push_back(rec);
    timings.push_back(elapsed_ms(t0));
  }
  json doc{{"command", "ablate"}, {"config", to_json(cfg)}, {"rungs", records}};
  write_json(out.path("ablation.json"), doc);
  if (cfg.emit_csv) {
    std::ostringstream csv;
    csv << "rung,added,miou\n";
    for (const auto& r : records) {
      std::string added;
      for (const auto& a : r.at("added")) added += (added.empty() ? "" : "+") + a.get<std::string>();
      csv << r.at("rung").get<std::size_t>() << "," << added << "," << r.at("metrics").at("miou").dump() << "\n";
    }
    write_text(out.path("ablation.csv"), csv.str());
  }
  write_json(out.path("timings.json"), json{{"rung_ms", timings}});
  out.finish();
  return doc;
}

// Resize straight to the model's native square input (no tiling).
inline ImageTensor native_input(const RgbImage& rgb, int size) {
  RgbImage square = rgb;
  ImageTensor t = preprocess(rgb, std::min(rgb.height, rgb.width));
  if (t.height != size || t.width != size) t = resize_bilinear(t, size, size);
  return t;
}

inline json cmd_coherence(const RunConfig& cfg) {
  if (cfg.coherence_layers.empty()) throw ConfigError("coherence: empty layer list");
  const Assets assets = load_assets(cfg);
  const int depth = assets.weights.shape.depth;
  for (int l : cfg.coherence_layers)
    if (l < 1 || l > depth) {
      throw ConfigError("coherence: layer " + std::to_string(l) + " out of range 1.." + std::to_string(depth));
    }
  validate_config(cfg.pipeline, depth);
  const auto items = list_dataset(cfg.input);
  OutputLog out(cfg.output_dir, "coherence");

  const int size = assets.weights.shape.image_size;
  const int grid = assets.weights.shape.grid();
  std::map<int, std::pair<double, int>> per_layer;  // layer -> (sum, count)
  std::pair<double, int> calibrated{0.0, 0};
  json per_image = json::array();
  CoherenceOptions copt;
  copt.seed = cfg.seed;
  for (const auto& item : items) {
    if (!item.label) throw DataError("no ground-truth label map for " + item.image.string());
    const LabelMap gt = read_label_map(*item.label);
    const auto labels = patch_majority_labels(gt, grid, grid);
    const LayerStack stack = encode_all_layers(native_input(read_rgb_image(item.image), size), assets.weights);
    json img{{"name", item.name}};
    json layers = json::object();
    for (int l : cfg.coherence_layers) {
      const auto auc = coherence_auc(cosine_similarity_map(stack.layer(l).tokens), labels, copt);
      layers[std::to_string(l)] = auc ? json(*auc) : json(nullptr);
      if (auc) {
        per_layer[l].first += *auc;
        ++per_layer[l].second;
      }
    }
    img["layers"] = layers;
    const WindowOutput calibrated_out = forward_from_stack(stack, assets.weights, assets.text, cfg.pipeline);
    const auto auc = coherence_auc(cosine_similarity_map(calibrated_out.features.tokens), labels, copt);
    img["calibrated"] = auc ? json(*auc) : json(nullptr);
    if (auc) {
      calibrated.first += *auc;
      ++calibrated.second;
    }
    per_image.push_back(img);
  }

  auto mean = [](const std::pair<double, int>& p) { return p.second ? json(p.first / p.second) : json(nullptr); };
  json layers = json::array();
  for (int l : cfg.coherence_layers) {
    const auto it = per_layer.find(l);
    layers.push_back({{"layer", l}, {"auc", it == per_layer.end() ? json(nullptr) : mean(it->second)},
                      {"images", it == per_layer.end() ? 0 : it->second.second}});
  }
  json doc{{"command", "coherence"}, {"config", to_json(cfg)}, {"layers", layers},
           {"calibrated", {{"auc", mean(calibrated)}, {"images", calibrated.second}}}, {"per_image", per_image}};
  write_json(out.path("coherence.json"), doc);
  if (cfg.emit_csv) {
    std::ostringstream csv;
    csv << "source,auc\n";
    for (const auto& l : layers) csv << "layer_" << l.at("layer").get<int>() << "," << l.at("auc").dump() << "\n";
    csv << "calibrated," << doc.at("calibrated").at("auc").dump() << "\n";
    write_text(out.path("coherence.csv"), csv.str());
  }
  out.finish();
  return doc;
}

inline json cmd_inspect_anomalies(const RunConfig& cfg, bool with_pca) {
  const Assets assets = load_assets(cfg);
  const auto items = list_dataset(cfg.input);
  OutputLog out(cfg.output_dir, "inspect-anomalies");
  const int size = assets.weights.shape.image_size;
  json records = json::array();
  for (const auto& item : items) {
    const LayerStack stack = encode_all_layers(native_input(read_rgb_image(item.image), size), assets.weights);
    const TokenGrid& penul = stack.penultimate();
    const auto scores = lof_scores(penul.tokens, cfg.pipeline.lof);
    const AnomalySet anomalies = select_anomalies(scores, penul.h, penul.w, cfg.pipeline.lof.anomaly_count);
    std::vector<GridCoord> isolated;
    const TokenGrid resolved = resolve_anomalies(penul, anomalies, &isolated);
    json flagged = json::array();
    for (std::size_t i = 0; i < anomalies.size(); ++i) {
      const auto c = anomalies.coords[i];
      flagged.push_back({{"row", c.row}, {"col", c.col}, {"score", anomalies.scores[i]},
                         {"norm_before", norm(penul.at(c.row, c.col))},
                         {"norm_after", norm(resolved.at(c.row, c.col))}});
    }
    json iso = json::array();
    for (const auto& c : isolated) iso.push_back({c.row, c.col});
    json rec{{"name", item.name},
             {"layer", stack.penultimate_index()},
             {"grid", {penul.h, penul.w}},
             {"k_neighbors", cfg.pipeline.lof.effective_k(penul.count())},
             {"anomalies", flagged},
             {"isolated", iso},
             {"scores", scores}};
    if (with_pca) {
      const PcaResult p = pca(penul.tokens, 2);
      json pts = json::array();
      for (std::size_t i = 0; i < p.projections.rows(); ++i) pts.push_back({p.projections(i, 0), p.projections(i, 1)});
      rec["pca"] = {{"explained_variance", p.explained_variance}, {"total_variance", p.total_variance},
                    {"points", pts}};
    }
    records.push_back(rec);
  }
  json doc{{"command", "inspect-anomalies"}, {"config", to_json(cfg)}, {"images", records}};
  write_json(out.path("anomalies.json"), doc);
  out.finish();
  return doc;
}

struct ToyOptions {
  fs::path output_dir = "toy";
  std::uint64_t seed = 0;
  int depth = 12;
  int images = 3;
  int categories = 4;
  int scene_height = 40;
  int scene_width = 56;
};

// Random miniature encoder (12 layers by default), a prototype text bank, labelled scenes
// and a config.json wired to them.
inline json cmd_make_toy(const ToyOptions& opt) {
  OutputLog out(opt.output_dir, "make-toy");
  const ModelShape shape = toy::small_shape(opt.depth);
  const auto weights = toy::random_weights(shape, opt.seed);
  weights.to_container().save(out.path("weights.sct"));
  const int depth = opt.depth;
  json pipeline{{"preset", "sc_clip"}};
  if (depth < 12) {
    // Scale the published layer choices down to the shallower model.
    const int penul = depth - 1;
    std::vector<int> levels;
    for (int l = std::max(1, penul / 3); l < penul; ++l) levels.push_back(l);
    pipeline["adjust"] = {{"pre_source_layer", std::max(1, penul - 1)}, {"post_source_layer", std::max(1, penul / 3)}};
    pipeline["fusion"] = {{"levels", levels.empty() ? std::vector<int>{1} : levels}};
  }
  const auto palette = toy::random_palette(opt.categories, opt.seed + 1);
  toy::prototype_text_bank(weights, palette, pipeline_from_json(pipeline)).to_container().save(out.path("text.sct"));
  for (int i = 0; i < opt.images; ++i) {
    const auto scene = toy::random_scene(opt.scene_height, opt.scene_width, palette, opt.seed + 100 + i);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03d", i);
    write_rgb_png(out.path(std::string("dataset/images/") + name + ".png"), scene.image);
    write_label_png(out.path(std::string("dataset/labels/") + name + ".png"), scene.labels);
  }
  json config{{"weights", "weights.sct"},
              {"text_bank", "text.sct"},
              {"input", "dataset"},
              {"output_dir", "run"},
              {"seed", opt.seed},
              {"short_side", 48},
              {"pipeline", pipeline},
              {"coherence_layers", std::set<int>{1, std::max(1, depth / 3), std::max(1, depth / 2), depth - 1, depth}}};
  write_json(out.path("config.json"), config);
  out.finish();
  return config;
}

}  // namespace sccal::app
