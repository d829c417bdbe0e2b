#pragma once

// JSON run configuration. Unknown keys are rejected so ablation ledgers
// cannot silently drift from what was actually run.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sccal/error.hpp"
#include "sccal/pipeline.hpp"

namespace sccal {

using json = nlohmann::json;

struct RunConfig {
  std::filesystem::path weights;
  std::filesystem::path text_bank;
  std::filesystem::path input;
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
  int short_side = 336;
  std::optional<int> window;  // defaults to the model's native resolution
  std::optional<int> stride;  // defaults to window / 2
  int jobs = 1;
  bool deterministic = true;
  bool save_logits = false;
  bool emit_csv = true;
  PipelineConfig pipeline;
  std::vector<std::vector<std::string>> ladder = {
      {"baseline"}, {"anomaly_resolution"}, {"attention_enhancement"}, {"pre_aggregation", "post_aggregation"}, {"fusion"}};
  std::vector<int> coherence_layers;
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline PipelineConfig preset(const std::string& name) {
  if (name == "sc_clip") return PipelineConfig::sc_clip();
  if (name == "baseline") return PipelineConfig::baseline();
  if (name == "vanilla") return PipelineConfig::vanilla();
  throw ConfigError("unknown preset '" + name + "' (expected sc_clip, baseline or vanilla)");
}

inline PipelineConfig pipeline_from_json(const json& j) {
  detail::reject_unknown(j, {"preset", "stages", "attention", "keep_residual_ffn", "lof", "adjust", "fusion",
                             "background_threshold", "logit_scale"},
                         "pipeline");
  PipelineConfig c = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : PipelineConfig{};
  if (j.contains("stages")) {
    const json& s = j.at("stages");
    if (!s.is_object()) throw ConfigError("pipeline.stages: expected an object");
    for (const auto& [k, v] : s.items()) {
      if (!v.is_boolean()) throw ConfigError("pipeline.stages." + k + ": expected a boolean");
      c.stages[k] = v.get<bool>();
    }
  }
  if (j.contains("attention")) {
    const json& a = j.at("attention");
    detail::reject_unknown(a, {"mode", "scale_qk", "simi_temperature"}, "pipeline.attention");
    if (a.contains("mode")) {
      try {
        c.attention.kind = attention_kind_from_string(a.at("mode").get<std::string>());
      } catch (const ParameterError& e) {
        throw ConfigError(std::string("pipeline.attention.mode: ") + e.what());
      }
    }
    detail::read(a, "scale_qk", c.attention.scale_qk, "pipeline.attention");
    detail::read(a, "simi_temperature", c.attention.simi_temperature, "pipeline.attention");
  }
  detail::read(j, "keep_residual_ffn", c.keep_residual_ffn, "pipeline");
  if (j.contains("lof")) {
    const json& l = j.at("lof");
    detail::reject_unknown(l, {"k_neighbors", "anomaly_count"}, "pipeline.lof");
    detail::read(l, "k_neighbors", c.lof.k_neighbors, "pipeline.lof");
    detail::read(l, "anomaly_count", c.lof.anomaly_count, "pipeline.lof");
  }
  if (j.contains("adjust")) {
    const json& a = j.at("adjust");
    detail::reject_unknown(a, {"pre_source_layer", "post_source_layer", "norm", "norm_temperature", "simi_scale"},
                           "pipeline.adjust");
    detail::read(a, "pre_source_layer", c.adjust.pre_source_layer, "pipeline.adjust");
    detail::read(a, "post_source_layer", c.adjust.post_source_layer, "pipeline.adjust");
    if (a.contains("norm") && a.at("norm") != "row_softmax") throw ConfigError("pipeline.adjust.norm: only row_softmax");
    detail::read(a, "norm_temperature", c.adjust.norm_temperature, "pipeline.adjust");
    detail::read(a, "simi_scale", c.adjust.simi_scale, "pipeline.adjust");
  }
  if (j.contains("fusion")) {
    const json& f = j.at("fusion");
    detail::reject_unknown(f, {"strategy", "levels"}, "pipeline.fusion");
    if (f.contains("strategy")) {
      try {
        c.fusion.strategy = fusion_strategy_from_string(f.at("strategy").get<std::string>());
      } catch (const ParameterError& e) {
        throw ConfigError(std::string("pipeline.fusion.strategy: ") + e.what());
      }
    }
    detail::read(f, "levels", c.fusion.levels, "pipeline.fusion");
  }
  if (j.contains("background_threshold") && !j.at("background_threshold").is_null()) {
    c.background_threshold = j.at("background_threshold").get<double>();
    if (*c.background_threshold < 0.0 || *c.background_threshold >= 1.0) {
      throw ConfigError("pipeline.background_threshold must be in [0, 1)");
    }
  }
  detail::read(j, "logit_scale", c.logit_scale, "pipeline");
  if (!(c.attention.simi_temperature > 0.0) || !(c.adjust.norm_temperature > 0.0) || !(c.adjust.simi_scale > 0.0)) {
    throw ConfigError("pipeline: temperatures and scales must be positive");
  }
  if (c.lof.anomaly_count < 0 || c.lof.k_neighbors < 0) throw ConfigError("pipeline.lof: counts must be non-negative");
  return c;
}

inline json to_json(const PipelineConfig& c) {
  json stages = json::object();
  for (const char* name : StageToggles::kNames) stages[name] = c.stages[name];
  return json{
      {"stages", stages},
      {"attention",
       {{"mode", std::string(to_string(c.attention.kind))},
        {"effective_mode", std::string(to_string(c.effective_attention().kind))},
        {"scale_qk", c.attention.scale_qk},
        {"simi_temperature", c.attention.simi_temperature}}},
      {"keep_residual_ffn", c.keep_residual_ffn},
      {"lof", {{"k_neighbors", c.lof.k_neighbors}, {"anomaly_count", c.lof.anomaly_count}}},
      {"adjust",
       {{"pre_source_layer", c.adjust.pre_source_layer},
        {"post_source_layer", c.adjust.post_source_layer},
        {"norm", "row_softmax"},
        {"norm_temperature", c.adjust.norm_temperature},
        {"simi_scale", c.adjust.simi_scale}}},
      {"fusion", {{"strategy", std::string(to_string(c.fusion.strategy))}, {"levels", c.fusion.levels}}},
      {"background_threshold", c.background_threshold ? json(*c.background_threshold) : json(nullptr)},
      {"logit_scale", c.logit_scale},
  };
}

inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j, {"weights", "text_bank", "input", "output_dir", "seed", "short_side", "window", "stride",
                             "jobs", "deterministic", "save_logits", "emit_csv", "pipeline", "ladder",
                             "coherence_layers"},
                         "config");
  RunConfig r;
  auto path = [&](const char* key, std::filesystem::path& out) {
    if (j.contains(key)) out = j.at(key).get<std::string>();
  };
  path("weights", r.weights);
  path("text_bank", r.text_bank);
  path("input", r.input);
  path("output_dir", r.output_dir);
  detail::read(j, "seed", r.seed, "config");
  detail::read(j, "short_side", r.short_side, "config");
  if (j.contains("window") && !j.at("window").is_null()) r.window = j.at("window").get<int>();
  if (j.contains("stride") && !j.at("stride").is_null()) r.stride = j.at("stride").get<int>();
  detail::read(j, "jobs", r.jobs, "config");
  detail::read(j, "deterministic", r.deterministic, "config");
  detail::read(j, "save_logits", r.save_logits, "config");
  detail::read(j, "emit_csv", r.emit_csv, "config");
  if (j.contains("pipeline")) r.pipeline = pipeline_from_json(j.at("pipeline"));
  detail::read(j, "ladder", r.ladder, "config");
  detail::read(j, "coherence_layers", r.coherence_layers, "config");
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig r = run_config_from_json(j);
  // Relative paths resolve against the config file's directory.
  const auto base = path.parent_path();
  for (auto* p : {&r.weights, &r.text_bank, &r.input, &r.output_dir})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  return r;
}

inline json to_json(const RunConfig& r) {
  return json{{"seed", r.seed},
              {"short_side", r.short_side},
              {"window", r.window ? json(*r.window) : json(nullptr)},
              {"stride", r.stride ? json(*r.stride) : json(nullptr)},
              {"pipeline", to_json(r.pipeline)}};
}

}  // namespace sccal
