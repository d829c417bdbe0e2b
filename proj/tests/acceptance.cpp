// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oracles.hpp"
#include "sccal/eval.hpp"
#include "sccal/pipeline.hpp"
#include "sccal/toy.hpp"

namespace fs = std::filesystem;
using sccal::Tensor2D;
using sccal::TokenGrid;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

sccal::SimilarityMap simi_of(const Tensor2D& x) { return sccal::cosine_similarity_map(x); }

// Largest |got - want| over a grid and a double matrix of the same shape.
double max_abs_diff(const Tensor2D& got, const oracle::Matrix& want) {
  double m = 0.0;
  for (std::size_t i = 0; i < got.rows(); ++i)
    for (std::size_t d = 0; d < got.cols(); ++d) m = std::max(m, std::abs(got(i, d) - want[i][d]));
  return m;
}

Outcome lof_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> n_dist(12, 64), d_dist(1, 8);
  const int ks[] = {3, 5, 10};
  double worst = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < 50; ++s) {
    const auto n = static_cast<std::size_t>(n_dist(rng)), d = static_cast<std::size_t>(d_dist(rng));
    const int k = ks[s % 3];
    const Tensor2D pts = oracle::random_tensor(rng, n, d);
    sccal::LofConfig cfg;
    cfg.k_neighbors = k;
    const auto got = sccal::lof_scores(pts, cfg);
    const auto want = oracle::lof(oracle::to_matrix(pts), k);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, oracle::rel_err(got[i], want[i]));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 5.0, "50 sets, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f", t) + " s"};
}

Outcome anomaly_resolution_oracle() {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> side(2, 16), dim(1, 16);
  double worst = 0.0;
  bool untouched_exact = true, isolation_agrees = true;
  for (int s = 0; s < 100; ++s) {
    const int h = side(rng), w = side(rng);
    const TokenGrid g{h, w, oracle::random_tensor(rng, static_cast<std::size_t>(h * w), static_cast<std::size_t>(dim(rng))),
                      std::nullopt};
    std::set<std::pair<int, int>> flagged = {{0, 0}, {h - 1, w - 1}};
    // An adjacent pair next to a random cell, plus a few random cells.
    const int r = std::uniform_int_distribution<int>(0, h - 1)(rng), c = std::uniform_int_distribution<int>(0, w - 2)(rng);
    flagged.insert({r, c});
    flagged.insert({r, c + 1});
    const int extra = std::uniform_int_distribution<int>(0, std::max(1, h * w / 4))(rng);
    for (int e = 0; e < extra; ++e)
      flagged.insert({std::uniform_int_distribution<int>(0, h - 1)(rng), std::uniform_int_distribution<int>(0, w - 1)(rng)});
    sccal::AnomalySet set;
    for (const auto& [y, x] : flagged) {
      set.coords.push_back({y, x});
      set.scores.push_back(1.0);
    }
    std::vector<sccal::GridCoord> isolated;
    const TokenGrid out = sccal::resolve_anomalies(g, set, &isolated);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto got = out.at(y, x), orig = g.at(y, x);
        if (!flagged.count({y, x})) {
          untouched_exact = untouched_exact && std::equal(got.begin(), got.end(), orig.begin());
          continue;
        }
        bool iso = false;
        const auto want = oracle::window_mean(g, flagged, y, x, &iso);
        const bool reported = std::find(isolated.begin(), isolated.end(), sccal::GridCoord{y, x}) != isolated.end();
        isolation_agrees = isolation_agrees && iso == reported;
        for (std::size_t d = 0; d < g.dim(); ++d) worst = std::max(worst, std::abs(got[d] - (iso ? orig[d] : want[d])));
      }
  }
  return {worst <= 1e-6 && untouched_exact && isolation_agrees,
          "100 grids, max abs err " + fmt("%.2e", worst) + ", others bit-identical " + (untouched_exact ? "yes" : "no")};
}

Outcome aggregation_properties() {
  std::mt19937_64 rng(303);
  double constant_err = 0.0, uniform_err = 0.0;
  for (int s = 0; s < 20; ++s) {
    TokenGrid g{5, 6, Tensor2D(30, 7), std::nullopt};
    const Tensor2D c = oracle::random_tensor(rng, 1, 7, 3.0);
    for (std::size_t i = 0; i < 30; ++i) std::copy(c.data().begin(), c.data().end(), g.tokens.row(i).begin());
    const auto out = sccal::aggregate_features(g, simi_of(oracle::random_tensor(rng, 30, 4)));
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t d = 0; d < 7; ++d) constant_err = std::max(constant_err, std::abs(double(out.tokens(i, d)) - c(0, d)));

    const TokenGrid x{5, 6, oracle::random_tensor(rng, 30, 7), std::nullopt};
    const float level = std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng);
    const auto mean_out = sccal::aggregate_features(x, {30, Tensor2D(30, 30, level)});
    for (std::size_t d = 0; d < 7; ++d) {
      double mean = 0.0;
      for (std::size_t i = 0; i < 30; ++i) mean += x.tokens(i, d) / 30.0;
      for (std::size_t i = 0; i < 30; ++i) uniform_err = std::max(uniform_err, std::abs(mean_out.tokens(i, d) - mean));
    }
  }
  // Three tokens on a line; similarity 1 on the diagonal, 0.5 to neighbours, 0 across.
  const TokenGrid g{1, 3, Tensor2D(3, 2, {1, 0, 0, 1, 1, 1}), std::nullopt};
  const sccal::SimilarityMap s{3, Tensor2D(3, 3, {1, 0.5f, 0, 0.5f, 1, 0.5f, 0, 0.5f, 1})};
  const auto out = sccal::aggregate_features(g, s);
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), z0 = e2 + e1 + 1.0, z1 = 2.0 * e1 + e2;
  const oracle::Matrix want = {{(e2 + 1.0) / z0, (e1 + 1.0) / z0}, {2.0 * e1 / z1, (e2 + e1) / z1},
                               {(e2 + 1.0) / z0, (e2 + e1) / z0}};
  const double hand_err = max_abs_diff(out.tokens, want);
  return {constant_err <= 1e-5 && uniform_err <= 1e-5 && hand_err <= 1e-6,
          "constant " + fmt("%.2e", constant_err) + ", uniform " + fmt("%.2e", uniform_err) + ", hand case " +
              fmt("%.2e", hand_err)};
}

Outcome attention_row_mass() {
  using sccal::AttentionKind;
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> n_dist(2, 64), d_dist(1, 16);
  std::uniform_real_distribution<double> scale(0.1, 5.0), temp(0.05, 2.0);
  double err_two = 0.0, err_one = 0.0;
  for (int s = 0; s < 1000; ++s) {
    const auto n = static_cast<std::size_t>(n_dist(rng)), d = static_cast<std::size_t>(d_dist(rng));
    const double sd = scale(rng);
    const Tensor2D q = oracle::random_tensor(rng, n, d, sd), k = oracle::random_tensor(rng, n, d, sd);
    const auto simi = simi_of(oracle::random_tensor(rng, n, d));
    const double t = temp(rng);
    for (auto kind : {AttentionKind::KK_PLUS_SIMI, AttentionKind::QQ_PLUS_KK, AttentionKind::QK_BASELINE,
                      AttentionKind::KK_ONLY, AttentionKind::SIMI_ONLY}) {
      const sccal::AttentionMode mode{kind, s % 2 == 0, t};
      const auto a = sccal::attention_for_mode(q, k, &simi, mode);
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (float v : a.values.row(i)) sum += v;
        if (mode.row_mass() == 2.0) err_two = std::max(err_two, std::abs(sum - 2.0));
        else err_one = std::max(err_one, std::abs(sum - 1.0));
      }
    }
  }
  return {err_two <= 1e-5 && err_one <= 1e-6,
          "1000 instances, two-term max dev " + fmt("%.2e", err_two) + ", single-softmax max dev " + fmt("%.2e", err_one)};
}

Outcome fusion_identities() {
  using sccal::FusionStrategy;
  std::mt19937_64 rng(505);
  bool two_pass_exact = true;
  double one_vs_two = 0.0;
  for (int s = 0; s < 100; ++s) {
    const int h = 2 + s % 5, w = 3 + s % 4;
    const auto n = static_cast<std::size_t>(h * w);
    const std::size_t d = 4 + static_cast<std::size_t>(s % 6);
    const TokenGrid x{h, w, oracle::random_tensor(rng, n, d), std::nullopt};
    const TokenGrid ml{h, w, oracle::random_tensor(rng, n, d, 2.0), std::nullopt};
    // Frozen attention times a fixed value/output map.
    const Tensor2D attn = sccal::row_softmax(oracle::random_tensor(rng, n, n, 2.0));
    const Tensor2D map = oracle::random_tensor(rng, d, d, 0.5);
    const sccal::LastLayerFn last = [&](const TokenGrid& g) {
      return TokenGrid{g.h, g.w, sccal::matmul(attn, sccal::matmul(g.tokens, map)), g.cls};
    };
    const auto two = sccal::fuse(x, ml, last, {FusionStrategy::TWO_PASS, {}});
    const auto lx = last(x), lml = last(ml);
    for (std::size_t i = 0; i < two.tokens.size(); ++i)
      two_pass_exact = two_pass_exact && two.tokens.data()[i] == lx.tokens.data()[i] + lml.tokens.data()[i];
    const auto one = sccal::fuse(x, ml, last, {FusionStrategy::ONE_PASS, {}});
    for (std::size_t i = 0; i < one.tokens.size(); ++i)
      one_vs_two = std::max(one_vs_two, static_cast<double>(std::abs(one.tokens.data()[i] - two.tokens.data()[i])));
  }
  return {two_pass_exact && one_vs_two <= 1e-5, std::string("100 cases, two-pass exact ") +
                                                    (two_pass_exact ? "yes" : "no") + ", one-pass max dev " +
                                                    fmt("%.2e", one_vs_two)};
}

Outcome miou_oracle() {
  std::mt19937_64 rng(606);
  std::uniform_int_distribution<int> classes_dist(1, 8), size_dist(1, 400);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool exact = true;
  for (int s = 0; s < 200; ++s) {
    const int classes = classes_dist(rng);
    const auto n = static_cast<std::size_t>(size_dist(rng));
    const double ignore_rate = s % 4 == 0 ? 0.0 : u(rng) * (s % 10 == 1 ? 1.0 : 0.3);
    std::uniform_int_distribution<int> cls(0, classes - 1);
    std::vector<int> gt(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = u(rng) < ignore_rate ? sccal::kIgnoreLabel : cls(rng);
      pred[i] = cls(rng);
    }
    sccal::ConfusionAccumulator acc(classes);
    acc.add(pred, gt);
    const auto got = acc.per_class_iou();
    const auto want = oracle::iou(pred, gt, classes, sccal::kIgnoreLabel);
    for (std::size_t c = 0; c < want.size(); ++c)
      exact = exact && (std::isnan(want[c]) ? !got[c].has_value() : got[c] && *got[c] == want[c]);
    const double m = acc.miou(), wm = oracle::miou(want);
    exact = exact && (std::isnan(wm) ? std::isnan(m) : m == wm);
  }
  sccal::ConfusionAccumulator hand(2);
  hand.add(std::vector<int>{0, 0, 0, 0}, std::vector<int>{0, 0, 1, 1});
  const double h = hand.miou();
  return {exact && h == 0.25, std::string("200 maps exact ") + (exact ? "yes" : "no") + ", hand case " + fmt("%.4f", h)};
}

Outcome auc_oracle() {
  std::mt19937_64 rng(707);
  std::uniform_int_distribution<int> n_dist(2, 200), bucket(0, 20);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int sets = 0;
  for (int s = 0; s < 300; ++s) {
    const auto n = static_cast<std::size_t>(n_dist(rng));
    std::vector<double> scores(n);
    std::vector<std::uint8_t> pos(n);
    const bool coarse = s % 2 == 0;  // forces ties
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = coarse ? bucket(rng) / 20.0 : u(rng);
      pos[i] = u(rng) < 0.4;
    }
    pos[0] = 1;
    pos[n - 1] = 0;
    worst = std::max(worst, std::abs(*sccal::auc_mann_whitney(scores, pos) - oracle::auc_pairs(scores, pos)));
    ++sets;
  }
  const double hand = *sccal::auc_mann_whitney({0.9, 0.6, 0.8, 0.3, 0.2, 0.1}, {1, 1, 0, 0, 0, 0});
  return {worst <= 1e-9 && hand == 7.0 / 8.0,
          std::to_string(sets) + " sets, max abs err " + fmt("%.2e", worst) + ", hand case " + fmt("%.6f", hand)};
}

Outcome slide_tiling() {
  sccal::ModelShape shape;
  shape.depth = 12;
  shape.width = 16;
  shape.heads = 2;
  shape.patch = 16;
  shape.image_size = 224;
  shape.proj_dim = 8;
  const auto w = sccal::toy::random_weights(shape, 808);
  const auto text = sccal::toy::random_text_bank(4, 8, 809);
  const auto cfg = sccal::PipelineConfig::sc_clip();
  std::mt19937_64 rng(810);
  auto image = [&](int side) {
    sccal::ImageTensor t(3, side, side);
    t.data = oracle::random_tensor(rng, 3, static_cast<std::size_t>(side * side)).data();
    return t;
  };
  sccal::SlideStats stats;
  sccal::slide_inference(image(336), w, text, cfg, {224, 112, 2, false}, &stats);
  const auto small = image(224);
  const auto seg = sccal::slide_inference(small, w, text, cfg, {224, 112, 1, true});
  const auto direct = sccal::forward_window(small, w, text, cfg);
  const auto up = sccal::upsample_logits(direct.logits, 14, 14, 224, 224);
  const bool identical = seg.logits->data() == up.data &&
                         seg.labels == sccal::labels_from_canvas(*seg.logits, 224, 224, text, cfg).labels;
  return {stats.windows == 4 && stats.min_hits >= 1 && identical,
          std::to_string(stats.windows) + " windows, min hits " + std::to_string(stats.min_hits) +
              ", 224 bit-identical " + (identical ? "yes" : "no")};
}

Outcome planted_anomalies() {
  const auto w = sccal::toy::random_weights(sccal::toy::small_shape(4), 900);
  const auto text = sccal::toy::random_text_bank(3, 16, 901);
  auto cfg = sccal::PipelineConfig::sc_clip();
  cfg.adjust.pre_source_layer = 2;
  cfg.adjust.post_source_layer = 1;
  cfg.fusion.levels = {1, 2};
  cfg.lof.anomaly_count = 5;
  cfg.stages.pre_aggregation = false;  // expose the resolved grid directly
  int worst_recovered = 5;
  double worst_err = 0.0;
  bool untouched_exact = true;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 1000);
    sccal::ImageTensor img(3, 32, 32);
    img.data = oracle::random_tensor(rng, 3, 32 * 32).data();
    sccal::LayerStack stack = sccal::encode_all_layers(img, w);
    TokenGrid& penul = stack.layer(stack.penultimate_index());
    double mean_norm = 0.0;
    for (std::size_t i = 0; i < penul.count(); ++i) mean_norm += sccal::norm(penul.tokens.row(i)) / penul.count();
    std::vector<int> cells(64);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::set<std::pair<int, int>> planted;
    for (int i = 0; i < 5; ++i) {
      const Tensor2D spike = oracle::random_tensor(rng, 1, penul.dim());
      const double n = sccal::norm(spike.row(0));
      auto row = penul.tokens.row(static_cast<std::size_t>(cells[static_cast<std::size_t>(i)]));
      for (std::size_t d = 0; d < row.size(); ++d) row[d] += static_cast<float>(20.0 * mean_norm * spike(0, d) / n);
      planted.insert({cells[static_cast<std::size_t>(i)] / 8, cells[static_cast<std::size_t>(i)] % 8});
    }
    sccal::ForwardTrace trace;
    sccal::forward_from_stack(stack, w, text, cfg, &trace);
    int recovered = 0;
    std::set<std::pair<int, int>> flagged;
    for (const auto& c : trace.anomalies.coords) {
      recovered += planted.count({c.row, c.col}) ? 1 : 0;
      flagged.insert({c.row, c.col});
    }
    worst_recovered = std::min(worst_recovered, recovered);
    const TokenGrid& resolved = *trace.penultimate_calibrated;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const auto got = resolved.at(y, x);
        const auto orig = std::as_const(penul).at(y, x);
        if (!flagged.count({y, x})) {
          untouched_exact = untouched_exact && std::equal(got.begin(), got.end(), orig.begin());
          continue;
        }
        bool iso = false;
        const auto want = oracle::window_mean(penul, flagged, y, x, &iso);
        for (std::size_t d = 0; d < want.size(); ++d)
          worst_err = std::max(worst_err, std::abs(got[d] - (iso ? orig[d] : want[d])));
      }
  }
  return {worst_recovered >= 4 && worst_err <= 1e-6 && untouched_exact,
          "20 seeds, min recovered " + std::to_string(worst_recovered) + "/5, resolution max err " +
              fmt("%.2e", worst_err)};
}

Outcome coherence_direction() {
  int improved = 0;
  double raw_sum = 0.0, agg_sum = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 1100);
    const std::size_t n = 96, d = 16;
    const Tensor2D centres = oracle::random_tensor(rng, 3, d);
    std::vector<int> labels(n);
    Tensor2D mid(n, d), deep(n, d);
    std::normal_distribution<double> noise(0.0, 1.5);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(i % 3);
      for (std::size_t k = 0; k < d; ++k) {
        const float c = centres(static_cast<std::size_t>(labels[i]), k);
        mid(i, k) = c;
        deep(i, k) = c + static_cast<float>(noise(rng));
      }
    }
    const TokenGrid g{8, 12, deep, std::nullopt};
    const auto aggregated = sccal::aggregate_features(g, simi_of(mid));
    const double raw = *sccal::coherence_auc(simi_of(deep), labels);
    const double agg = *sccal::coherence_auc(simi_of(aggregated.tokens), labels);
    improved += agg > raw ? 1 : 0;
    raw_sum += raw;
    agg_sum += agg;
  }
  return {improved >= 18, std::to_string(improved) + "/20 seeds improved, mean AUC " + fmt("%.3f", raw_sum / 20) +
                              " -> " + fmt("%.3f", agg_sum / 20)};
}

int run(const std::string& args) {
  const std::string cmd = std::string(SC_CALIB_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every JSON and PNG under `a` except wall-clock timings; true if `b` matches byte for byte.
bool same_outputs(const fs::path& a, const fs::path& b, std::size_t* compared) {
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if ((ext != ".json" && ext != ".png") || e.path().filename() == "timings.json") continue;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
    ++*compared;
  }
  return true;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "sccal_acceptance";
  fs::remove_all(root);
  struct Cleanup {
    fs::path dir;
    ~Cleanup() { fs::remove_all(dir); }
  } cleanup{root};
  if (run("make-toy -o " + (root / "toy").string() + " --seed 11 --images 3") != 0) return {false, "make-toy failed"};
  const std::string cfg = (root / "toy" / "config.json").string();
  bool ok = true;
  for (const char* cmd : {"segment", "evaluate"})
    for (const auto& [name, jobs] : {std::pair{"a", 1}, std::pair{"b", 1}, std::pair{"c", 4}}) {
      const fs::path out = root / (std::string(cmd) + "_" + name);
      ok = ok && run(std::string(cmd) + " --deterministic -c " + cfg + " -j " + std::to_string(jobs) + " -o " +
                     out.string()) == 0;
    }
  if (!ok) return {false, "a run failed"};
  std::size_t compared = 0;
  for (const char* cmd : {"segment", "evaluate"}) {
    const fs::path a = root / (std::string(cmd) + "_a");
    ok = ok && same_outputs(a, root / (std::string(cmd) + "_b"), &compared) &&
         same_outputs(a, root / (std::string(cmd) + "_c"), &compared);
  }
  return {ok && compared > 0, std::to_string(compared) + " files compared across reruns and 1 vs 4 jobs"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"lof_oracle", lof_oracle},
      {"anomaly_resolution_oracle", anomaly_resolution_oracle},
      {"aggregation_properties", aggregation_properties},
      {"attention_row_mass", attention_row_mass},
      {"fusion_identities", fusion_identities},
      {"miou_oracle", miou_oracle},
      {"auc_oracle", auc_oracle},
      {"slide_tiling", slide_tiling},
      {"planted_anomalies", planted_anomalies},
      {"coherence_direction", coherence_direction},
      {"cli_determinism", cli_determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failed += o.pass ? 0 : 1;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
