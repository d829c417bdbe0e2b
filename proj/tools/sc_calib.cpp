// Command-line front end. Errors are reported on stderr as one JSON object
// and mapped to distinct exit codes (see README).

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sccal/app/commands.hpp"

namespace {

int exit_code(const std::string& category) {
  if (category == "io") return 2;
  if (category == "config") return 3;
  if (category == "data") return 4;
  if (category == "parameter" || category == "shape") return 5;
  return 1;
}

int report(const std::string& category, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"category", category}, {"message", message}}}}.dump() << "\n";
  return exit_code(category);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free calibration of ViT patch features for open-vocabulary segmentation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<int> jobs;
  std::optional<std::string> output_dir;
  bool deterministic = false;
  bool with_pca = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run configuration JSON")->required();
    sub->add_option("-j,--jobs", jobs, "worker threads for window inference (default: SC_CALIB_THREADS or 1)");
    sub->add_option("-o,--output", output_dir, "override the configured output directory");
    sub->add_flag("--deterministic", deterministic, "accepted for compatibility; runs are always deterministic");
  };
  auto* segment = app.add_subcommand("segment", "label every image in the input");
  auto* evaluate = app.add_subcommand("evaluate", "segment and score against ground truth");
  auto* ablate = app.add_subcommand("ablate", "evaluate each rung of the ablation ladder");
  auto* coherence = app.add_subcommand("coherence", "AUC of same-category similarity per layer");
  auto* inspect = app.add_subcommand("inspect-anomalies", "LOF scores and flagged tokens of the penultimate layer");
  for (auto* s : {segment, evaluate, ablate, coherence, inspect}) add_common(s);
  inspect->add_flag("--pca", with_pca, "include a 2-D PCA projection of the tokens");

  sccal::app::ToyOptions toy;
  std::string toy_dir = "toy";
  auto* make_toy = app.add_subcommand("make-toy", "write a random toy model, text bank, dataset and config");
  make_toy->add_option("-o,--output", toy_dir, "output directory");
  make_toy->add_option("--seed", toy.seed, "random seed");
  make_toy->add_option("--depth", toy.depth, "encoder depth")->check(CLI::Range(4, 48));
  make_toy->add_option("--images", toy.images, "number of scenes")->check(CLI::Range(1, 1000));
  make_toy->add_option("--categories", toy.categories, "number of categories")->check(CLI::Range(2, 255));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 3;
  }

  try {
    if (make_toy->parsed()) {
      toy.output_dir = toy_dir;
      sccal::app::cmd_make_toy(toy);
      return 0;
    }
    sccal::RunConfig cfg = sccal::load_run_config(config_path);
    if (output_dir) cfg.output_dir = *output_dir;
    if (jobs) {
      cfg.jobs = *jobs;
    } else if (const char* env = std::getenv("SC_CALIB_THREADS")) {
      try {
        cfg.jobs = std::stoi(env);
      } catch (const std::exception&) {
        throw sccal::ConfigError(std::string("SC_CALIB_THREADS is not an integer: ") + env);
      }
    }
    if (cfg.jobs < 1) throw sccal::ConfigError("jobs must be at least 1");
    if (segment->parsed()) sccal::app::cmd_segment(cfg);
    if (evaluate->parsed()) sccal::app::cmd_evaluate(cfg);
    if (ablate->parsed()) sccal::app::cmd_ablate(cfg);
    if (coherence->parsed()) sccal::app::cmd_coherence(cfg);
    if (inspect->parsed()) sccal::app::cmd_inspect_anomalies(cfg, with_pca);
  } catch (const sccal::Error& e) {
    return report(e.category(), e.what());
  } catch (const std::exception& e) {
    return report("internal", e.what());
  }
  return 0;
}
