#pragma once

// End-to-end dense inference: preprocessing, the stage-toggled calibrated
// forward pass over one window, patch-text alignment, and sliding-window
// tiling into a full-resolution segmentation map.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "sccal/anomaly.hpp"
#include "sccal/attention.hpp"
#include "sccal/error.hpp"
#include "sccal/fusion.hpp"
#include "sccal/image.hpp"
#include "sccal/numerics.hpp"
#include "sccal/self_adjust.hpp"
#include "sccal/tensor_container.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal {

// Normalisation constants of the reference CLIP release.
inline constexpr std::array<double, 3> kClipMean = {0.48145466, 0.4578275, 0.40821073};
inline constexpr std::array<double, 3> kClipStd = {0.26862954, 0.26130258, 0.27577711};

struct TextBank {
  std::vector<std::string> names;
  Tensor2D embeddings;  // C x D_proj, unit rows
  bool has_background = false;

  std::size_t size() const { return embeddings.rows(); }

  void validate() const {
    if (embeddings.rows() == 0) throw DataError("text bank: no categories");
    if (names.size() != embeddings.rows()) throw DataError("text bank: name count != embedding rows");
    for (std::size_t c = 0; c < embeddings.rows(); ++c) {
      const double n = norm(embeddings.row(c));
      if (std::abs(n - 1.0) > 1e-4) {
        throw DataError("text bank: row " + std::to_string(c) + " ('" + names[c] + "') has norm " + std::to_string(n));
      }
    }
  }

  static TextBank from_container(const TensorContainer& c) {
    TextBank t;
    t.embeddings = c.matrix("text.embeddings");
    std::istringstream in(c.string("text.names"));
    for (std::string line; std::getline(in, line);) t.names.push_back(line);
    t.has_background = c.contains("text.has_background") && c.scalar("text.has_background") != 0.0f;
    t.validate();
    return t;
  }

  TensorContainer to_container() const {
    TensorContainer c;
    c.add("text.embeddings", embeddings);
    std::string joined;
    for (const auto& n : names) joined += n + "\n";
    c.add_string("text.names", joined);
    c.add_scalar("text.has_background", has_background ? 1.0f : 0.0f);
    return c;
  }
};

struct StageToggles {
  bool anomaly_resolution = true;
  bool attention_enhancement = true;
  bool pre_aggregation = true;
  bool post_aggregation = true;
  bool fusion = true;

  static constexpr std::array<const char*, 5> kNames = {"anomaly_resolution", "attention_enhancement",
                                                        "pre_aggregation", "post_aggregation", "fusion"};

  bool& operator[](std::string_view name) {
    if (name == "anomaly_resolution") return anomaly_resolution;
    if (name == "attention_enhancement") return attention_enhancement;
    if (name == "pre_aggregation") return pre_aggregation;
    if (name == "post_aggregation") return post_aggregation;
    if (name == "fusion") return fusion;
    throw ConfigError("unknown stage toggle '" + std::string(name) + "'");
  }
  bool operator[](std::string_view name) const { return const_cast<StageToggles&>(*this)[name]; }

  bool any() const { return anomaly_resolution || attention_enhancement || pre_aggregation || post_aggregation || fusion; }
  static StageToggles none() { return {false, false, false, false, false}; }
};

struct PipelineConfig {
  StageToggles stages;
  LofConfig lof;
  AdjustConfig adjust;
  FusionConfig fusion;
  AttentionMode attention{AttentionKind::QQ_PLUS_KK, true, 1.0};
  bool keep_residual_ffn = false;
  std::optional<double> background_threshold;
  double logit_scale = 40.0;  // only used for background probabilities

  // Full calibration with the published defaults.
  static PipelineConfig sc_clip() { return {}; }

  // All stages off, last layer with residual and FFN attached to softmax(QK^T): plain CLIP.
  static PipelineConfig vanilla() {
    PipelineConfig c;
    c.stages = StageToggles::none();
    c.attention.kind = AttentionKind::QK_BASELINE;
    c.keep_residual_ffn = true;
    return c;
  }

  // The ablation baseline: QQ + KK attention, no residual, no FFN, no stages.
  static PipelineConfig baseline() {
    PipelineConfig c;
    c.stages = StageToggles::none();
    return c;
  }

  // Attention enhancement turns any key/query mode into softmax(KK^T) + softmax(Simi).
  AttentionMode effective_attention() const {
    AttentionMode m = attention;
    if (stages.attention_enhancement && m.kind != AttentionKind::SIMI_ONLY) m.kind = AttentionKind::KK_PLUS_SIMI;
    return m;
  }

  bool uses_standard_last_layer() const {
    return keep_residual_ffn && effective_attention().kind == AttentionKind::QK_BASELINE;
  }

  bool is_vanilla() const { return !stages.any(); }
};

struct SegmentationMap {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<int> labels;
  std::optional<Tensor2D> logits;  // C x (H*W), averaged canvas

  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

// Per-window diagnostics of the calibrated forward pass.
struct ForwardTrace {
  AnomalySet anomalies;
  std::vector<GridCoord> isolated_anomalies;
  std::optional<TokenGrid> penultimate_raw;
  std::optional<TokenGrid> penultimate_calibrated;
  std::map<std::string, double> stage_ms;
};

struct WindowOutput {
  TokenGrid features;  // final unit-norm patch features
  Tensor2D logits;     // N x C cosine logits
};

// Aspect-preserving bilinear resize to `short_side`, then channel normalisation.
inline ImageTensor preprocess(const RgbImage& image, int short_side) {
  if (image.height <= 0 || image.width <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw ShapeError("preprocess: degenerate image");
  }
  if (short_side <= 0) throw ParameterError("preprocess: short_side must be positive");
  int h = image.height, w = image.width;
  if (std::min(h, w) != short_side) {
    if (h <= w) {
      w = static_cast<int>(std::lround(static_cast<double>(w) * short_side / h));
      h = short_side;
    } else {
      h = static_cast<int>(std::lround(static_cast<double>(h) * short_side / w));
      w = short_side;
    }
  }
  ImageTensor t = to_tensor(image);
  if (h != image.height || w != image.width) t = resize_bilinear(t, h, w);
  for (int c = 0; c < 3; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float& v = t.at(c, y, x);
        v = static_cast<float>((v / 255.0 - kClipMean[ci]) / kClipStd[ci]);
      }
  }
  return t;
}

namespace detail {

class StageTimer {
 public:
  explicit StageTimer(ForwardTrace* trace) : trace_(trace), start_(std::chrono::steady_clock::now()) {}
  void mark(const std::string& stage) {
    const auto now = std::chrono::steady_clock::now();
    if (trace_) trace_->stage_ms[stage] += std::chrono::duration<double, std::milli>(now - start_).count();
    start_ = now;
  }

 private:
  ForwardTrace* trace_;
  std::chrono::steady_clock::time_point start_;
};

inline void check_layer(const char* what, int layer, int max_layer) {
  if (layer < 1 || layer > max_layer) {
    throw ConfigError(std::string(what) + " references layer " + std::to_string(layer) + ", valid range is 1.." +
                      std::to_string(max_layer));
  }
}

inline Tensor2D l2_normalize_rows(const Tensor2D& m) {
  Tensor2D out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double n = norm(r);
    if (n > 0.0)
      for (float& v : r) v = static_cast<float>(v / n);
  }
  return out;
}

}  // namespace detail

// Throws ConfigError when the configuration references layers the model lacks.
inline void validate_config(const PipelineConfig& cfg, int depth) {
  if (depth < 2) throw ConfigError("pipeline needs a model with at least 2 layers");
  const int penul = depth - 1;
  const AttentionMode mode = cfg.effective_attention();
  if (cfg.stages.pre_aggregation || (!cfg.uses_standard_last_layer() && mode.uses_similarity())) {
    detail::check_layer("adjust.pre_source_layer", cfg.adjust.pre_source_layer, depth);
  }
  if (cfg.stages.post_aggregation) detail::check_layer("adjust.post_source_layer", cfg.adjust.post_source_layer, depth);
  if (cfg.stages.fusion && cfg.fusion.strategy != FusionStrategy::NONE) {
    if (cfg.fusion.levels.empty()) throw ConfigError("fusion.levels is empty");
    for (int l : cfg.fusion.levels) detail::check_layer("fusion.levels", l, penul - 1);
  }
}

// Everything after the encoder: calibration of X^penul, the replaced last
// layer, fusion, post-aggregation and patch-text logits.
inline WindowOutput forward_from_stack(const LayerStack& stack, const EncoderWeights& w, const TextBank& text,
                                       const PipelineConfig& cfg, ForwardTrace* trace = nullptr) {
  validate_config(cfg, stack.depth());
  detail::StageTimer timer(trace);

  TokenGrid penul = stack.penultimate();
  if (trace) trace->penultimate_raw = penul;

  if (cfg.stages.anomaly_resolution && cfg.lof.anomaly_count > 0) {
    AnomalySet anomalies = detect_anomalies(penul, cfg.lof);
    std::vector<GridCoord> isolated;
    penul = resolve_anomalies(penul, anomalies, &isolated);
    if (trace) {
      trace->anomalies = std::move(anomalies);
      trace->isolated_anomalies = std::move(isolated);
    }
    timer.mark("anomaly_resolution");
  }

  const AttentionMode mode = cfg.effective_attention();
  const bool standard_last = cfg.uses_standard_last_layer();
  std::optional<SimilarityMap> pre_simi;
  if (cfg.stages.pre_aggregation || (!standard_last && mode.uses_similarity())) {
    pre_simi = cosine_similarity_map(stack.layer(cfg.adjust.pre_source_layer).tokens);
  }
  if (cfg.stages.pre_aggregation) {
    penul = aggregate_features(penul, *pre_simi, cfg.adjust);
    timer.mark("pre_aggregation");
  }
  if (trace) trace->penultimate_calibrated = penul;

  LastLayerFn last;
  std::vector<AttentionWeights> attn;
  if (standard_last) {
    last = [&w](const TokenGrid& g) { return standard_last_layer(g, w); };
  } else {
    attn = last_layer_attention(last_layer_projections(penul, w), pre_simi ? &*pre_simi : nullptr, mode);
    if (cfg.keep_residual_ffn) {
      last = [&w, &attn](const TokenGrid& g) { return residual_last_layer(g, w, attn); };
    } else {
      last = [&w, &attn](const TokenGrid& g) { return modified_last_layer(g, w, attn); };
    }
  }
  timer.mark("attention");

  TokenGrid out;
  if (cfg.stages.fusion && cfg.fusion.strategy != FusionStrategy::NONE) {
    TokenGrid ml = multilevel_sum(stack, cfg.fusion);
    // The direct sum adds in the output space, so the level sum is projected first.
    if (cfg.fusion.strategy == FusionStrategy::DIRECT_SUM) ml = project_grid(ml, w);
    out = fuse(penul, ml, last, cfg.fusion);
  } else {
    out = last(penul);
  }
  timer.mark("last_layer");

  if (cfg.stages.post_aggregation) {
    out = aggregate_features(out, cosine_similarity_map(stack.layer(cfg.adjust.post_source_layer).tokens), cfg.adjust);
    timer.mark("post_aggregation");
  }

  out.tokens = detail::l2_normalize_rows(out.tokens);
  if (out.dim() != text.embeddings.cols()) {
    throw ShapeError("feature width " + std::to_string(out.dim()) + " != text embedding width " +
                     std::to_string(text.embeddings.cols()));
  }
  Tensor2D logits = matmul_bt(out.tokens, text.embeddings);
  timer.mark("logits");
  return {std::move(out), std::move(logits)};
}

inline WindowOutput forward_window(const ImageTensor& window, const EncoderWeights& w, const TextBank& text,
                                   const PipelineConfig& cfg, ForwardTrace* trace = nullptr) {
  detail::StageTimer timer(trace);
  const LayerStack stack = encode_all_layers(window, w);
  timer.mark("encode");
  return forward_from_stack(stack, w, text, cfg, trace);
}

// Window origins along one axis; the last window is clamped to the edge.
inline std::vector<int> window_origins(int dim, int window, int stride) {
  if (stride <= 0) throw ParameterError("slide: stride must be positive");
  if (window <= 0) throw ParameterError("slide: window must be positive");
  if (dim <= window) return {0};
  const int steps = (dim - window + stride - 1) / stride;
  std::vector<int> out;
  for (int i = 0; i <= steps; ++i) out.push_back(std::min(i * stride, dim - window));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct SlideOptions {
  int window = 224;
  int stride = 112;
  int jobs = 1;
  bool keep_logits = false;
};

struct SlideStats {
  int windows = 0;
  int min_hits = 0;
  int max_hits = 0;
  std::map<std::string, double> stage_ms;
};

// Patch logits (N x C over a gh x gw grid) bilinearly upsampled to window pixels.
inline ImageTensor upsample_logits(const Tensor2D& logits, int gh, int gw, int out_h, int out_w) {
  const int C = static_cast<int>(logits.cols());
  ImageTensor grid(C, gh, gw);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x)
      for (int c = 0; c < C; ++c) grid.at(c, y, x) = logits(static_cast<std::size_t>(y) * gw + x, static_cast<std::size_t>(c));
  return resize_bilinear(grid, out_h, out_w);
}

// Argmax over categories (ties to the lower index). With a background-aware
// text bank and a threshold, pixels whose top softmax probability falls below
// it become category 0.
inline SegmentationMap labels_from_canvas(const Tensor2D& canvas, int height, int width, const TextBank& text,
                                          const PipelineConfig& cfg) {
  const int C = static_cast<int>(canvas.rows());
  const std::size_t HW = static_cast<std::size_t>(height) * width;
  if (canvas.cols() != HW) throw ShapeError("labels_from_canvas: canvas does not match image size");
  SegmentationMap seg{height, width, C, std::vector<int>(HW, 0), std::nullopt};
  for (std::size_t p = 0; p < HW; ++p) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (canvas(static_cast<std::size_t>(c), p) > canvas(static_cast<std::size_t>(best), p)) best = c;
    if (text.has_background && cfg.background_threshold) {
      const double top = cfg.logit_scale * canvas(static_cast<std::size_t>(best), p);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) sum += std::exp(cfg.logit_scale * canvas(static_cast<std::size_t>(c), p) - top);
      if (1.0 / sum < *cfg.background_threshold) best = 0;
    }
    seg.labels[p] = best;
  }
  return seg;
}

struct WindowLogits {
  int y0 = 0;
  int x0 = 0;
  Tensor2D logits;  // (grid*grid) x C
};

// Upsamples each window's patch logits to pixels, sums them into a C x (H*W)
// canvas in the order given, and divides pixels covered more than once by
// their hit count.
inline Tensor2D blend_windows(const std::vector<WindowLogits>& windows, int grid, int window, int height, int width,
                              std::vector<int>* hit_counts = nullptr) {
  if (windows.empty()) throw ParameterError("blend_windows: no windows");
  const int C = static_cast<int>(windows.front().logits.cols());
  const std::size_t HW = static_cast<std::size_t>(height) * width;
  Tensor2D canvas(static_cast<std::size_t>(C), HW);
  std::vector<int> hits(HW, 0);
  for (const auto& win : windows) {
    const ImageTensor up = upsample_logits(win.logits, grid, grid, window, window);
    const int h = std::min(window, height - win.y0);
    const int wd = std::min(window, width - win.x0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < wd; ++x) {
        const std::size_t p = static_cast<std::size_t>(win.y0 + y) * width + (win.x0 + x);
        ++hits[p];
        for (int c = 0; c < C; ++c) canvas(static_cast<std::size_t>(c), p) += up.at(c, y, x);
      }
  }
  for (std::size_t p = 0; p < HW; ++p) {
    if (hits[p] <= 1) continue;
    const float inv = static_cast<float>(hits[p]);
    for (int c = 0; c < C; ++c) canvas(static_cast<std::size_t>(c), p) /= inv;
  }
  if (hit_counts) *hit_counts = std::move(hits);
  return canvas;
}

// Windows run in parallel; their logits are blended in canonical row-major
// window order, so the result does not depend on `jobs`.
inline SegmentationMap slide_inference(const ImageTensor& image, const EncoderWeights& w, const TextBank& text,
                                       const PipelineConfig& cfg, const SlideOptions& opt = {},
                                       SlideStats* stats = nullptr) {
  const auto ys = window_origins(image.height, opt.window, opt.stride);
  const auto xs = window_origins(image.width, opt.window, opt.stride);
  struct Job {
    int y0, x0;
    WindowOutput out;
    ForwardTrace trace;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (int y : ys)
    for (int x : xs) jobs.push_back({y, x, {}, {}, nullptr});

  if (opt.window % w.shape.patch != 0) {
    throw ParameterError("slide: window " + std::to_string(opt.window) + " is not a multiple of the patch size");
  }
  const int grid = opt.window / w.shape.patch;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      Job& j = jobs[i];
      try {
        j.out = forward_window(image.crop(j.y0, j.x0, opt.window, opt.window), w, text, cfg, &j.trace);
      } catch (...) {
        j.error = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(opt.jobs, 1, static_cast<int>(jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const Job& j : jobs)
    if (j.error) std::rethrow_exception(j.error);

  std::vector<WindowLogits> windows;
  windows.reserve(jobs.size());
  for (Job& j : jobs) windows.push_back({j.y0, j.x0, std::move(j.out.logits)});
  std::vector<int> hits;
  Tensor2D canvas = blend_windows(windows, grid, opt.window, image.height, image.width, &hits);
  const std::size_t HW = hits.size();
  SegmentationMap seg = labels_from_canvas(canvas, image.height, image.width, text, cfg);
  if (opt.keep_logits) seg.logits = std::move(canvas);

  if (stats) {
    stats->windows = static_cast<int>(jobs.size());
    const auto [mn, mx] = std::minmax_element(hits.begin(), hits.end());
    stats->min_hits = HW ? *mn : 0;
    stats->max_hits = HW ? *mx : 0;
    for (const Job& j : jobs)
      for (const auto& [k, v] : j.trace.stage_ms) stats->stage_ms[k] += v;
  }
  return seg;
}


// Preprocess, slide, and bring the averaged logits back to the input size.
inline SegmentationMap segment_image(const RgbImage& image, const EncoderWeights& w, const TextBank& text,
                                     const PipelineConfig& cfg, int short_side, const SlideOptions& opt,
                                     SlideStats* stats = nullptr) {
  const ImageTensor input = preprocess(image, short_side);
  SlideOptions o = opt;
  o.keep_logits = true;
  SegmentationMap seg = slide_inference(input, w, text, cfg, o, stats);
  if (seg.height != image.height || seg.width != image.width) {
    const int C = seg.num_classes;
    ImageTensor planes(C, seg.height, seg.width);
    planes.data = std::move(seg.logits->data());
    const ImageTensor resized = resize_bilinear(planes, image.height, image.width);
    Tensor2D canvas(static_cast<std::size_t>(C), static_cast<std::size_t>(image.height) * image.width, resized.data);
    seg = labels_from_canvas(canvas, image.height, image.width, text, cfg);
    seg.logits = std::move(canvas);
  }
  if (!opt.keep_logits) seg.logits.reset();
  return seg;
}

}  // namespace sccal
