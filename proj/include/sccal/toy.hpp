#pragma once

// Seeded random encoders, text banks and synthetic labelled scenes for tests,
// demos and the determinism harness. Nothing here is pretrained.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sccal/image.hpp"
#include "sccal/numerics.hpp"
#include "sccal/pipeline.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal::toy {

inline ModelShape small_shape(int depth = 12) {
  ModelShape s;
  s.depth = depth;
  s.width = 32;
  s.heads = 4;
  s.patch = 4;
  s.image_size = 32;
  s.proj_dim = 16;
  return s;
}

class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  float operator()(double stddev) { return static_cast<float>(dist_(rng_) * stddev); }
  std::mt19937_64& engine() { return rng_; }

  Tensor2D matrix(std::size_t rows, std::size_t cols, double stddev) {
    Tensor2D t(rows, cols);
    for (float& v : t.data()) v = (*this)(stddev);
    return t;
  }
  std::vector<float> vector(std::size_t n, double stddev, float mean = 0.0f) {
    std::vector<float> v(n);
    for (float& x : v) x = mean + (*this)(stddev);
    return v;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

inline EncoderWeights random_weights(const ModelShape& shape, std::uint64_t seed) {
  Gaussian g(seed);
  const auto W = static_cast<std::size_t>(shape.width);
  const auto M = static_cast<std::size_t>(shape.mlp_width());
  const auto G = static_cast<std::size_t>(shape.grid());
  const double w_std = 1.0 / std::sqrt(static_cast<double>(W));
  EncoderWeights w;
  w.shape = shape;
  w.patch_kernel = g.matrix(W, static_cast<std::size_t>(3 * shape.patch * shape.patch),
                            1.0 / std::sqrt(3.0 * shape.patch * shape.patch));
  w.class_embedding = g.vector(W, 0.5);
  w.positional = g.matrix(1 + G * G, W, 0.1);
  w.ln_pre_gain = g.vector(W, 0.05, 1.0f);
  w.ln_pre_bias = g.vector(W, 0.02);
  for (int l = 0; l < shape.depth; ++l) {
    LayerWeights L;
    L.ln1_gain = g.vector(W, 0.05, 1.0f);
    L.ln1_bias = g.vector(W, 0.02);
    L.in_proj = g.matrix(3 * W, W, 3.0 * w_std);  // sharp attention keeps tokens local
    L.in_proj_bias = g.vector(3 * W, 0.02);
    L.out_proj = g.matrix(W, W, 0.5 * w_std);
    L.out_proj_bias = g.vector(W, 0.02);
    L.ln2_gain = g.vector(W, 0.05, 1.0f);
    L.ln2_bias = g.vector(W, 0.02);
    L.fc = g.matrix(M, W, w_std);
    L.fc_bias = g.vector(M, 0.02);
    L.fc_proj = g.matrix(W, M, 0.5 / std::sqrt(static_cast<double>(M)));
    L.fc_proj_bias = g.vector(W, 0.02);
    w.layers.push_back(std::move(L));
  }
  w.ln_post_gain = g.vector(W, 0.05, 1.0f);
  w.ln_post_bias = g.vector(W, 0.02);
  w.visual_proj = g.matrix(W, static_cast<std::size_t>(shape.proj_dim), w_std);
  w.validate();
  return w;
}

inline TextBank random_text_bank(int categories, int proj_dim, std::uint64_t seed, bool has_background = false) {
  Gaussian g(seed);
  TextBank t;
  t.has_background = has_background;
  t.embeddings = g.matrix(static_cast<std::size_t>(categories), static_cast<std::size_t>(proj_dim), 1.0);
  for (int c = 0; c < categories; ++c) {
    auto r = t.embeddings.row(static_cast<std::size_t>(c));
    const double n = norm(r);
    for (float& v : r) v = static_cast<float>(v / n);
    t.names.push_back((has_background && c == 0) ? "background" : "class_" + std::to_string(c));
  }
  return t;
}

// Class colours used by random_scene and prototype_text_bank.
inline std::vector<std::array<int, 3>> random_palette(int categories, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<std::array<int, 3>> palette;
  for (int c = 0; c < categories; ++c) palette.push_back({byte(rng), byte(rng), byte(rng)});
  return palette;
}

// A text bank whose row c points at the centred mean feature that `cfg`
// produces for a flat image in palette colour c, so random encoders still
// give readable maps.
inline TextBank prototype_text_bank(const EncoderWeights& w, const std::vector<std::array<int, 3>>& palette,
                                    const PipelineConfig& cfg = PipelineConfig::sc_clip()) {
  const int size = w.shape.image_size;
  const auto C = palette.size();
  const auto D = static_cast<std::size_t>(w.shape.proj_dim);
  Tensor2D protos(C, D);
  for (std::size_t c = 0; c < C; ++c) {
    RgbImage flat{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
    for (std::size_t i = 0; i < flat.pixels.size(); ++i) flat.pixels[i] = static_cast<std::uint8_t>(palette[c][i % 3]);
    TextBank probe;
    probe.embeddings = Tensor2D(1, D);
    const TokenGrid out = forward_window(preprocess(flat, size), w, probe, cfg).features;
    for (std::size_t t = 0; t < out.tokens.rows(); ++t)
      for (std::size_t d = 0; d < D; ++d) protos(c, d) += out.tokens(t, d) / static_cast<float>(out.tokens.rows());
  }
  TextBank t;
  t.embeddings = protos;
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += protos(c, d);
    mean /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) t.embeddings(c, d) = static_cast<float>(protos(c, d) - mean);
  }
  for (std::size_t c = 0; c < C; ++c) {
    auto r = t.embeddings.row(c);
    const double n = norm(r);
    if (n == 0.0) throw DataError("prototype_text_bank: palette colours are not distinguishable");
    for (float& v : r) v = static_cast<float>(v / n);
    t.names.push_back("class_" + std::to_string(c));
  }
  return t;
}

struct Scene {
  RgbImage image;
  LabelMap labels;
};

// Axis-aligned coloured rectangles on a class-0 backdrop, with pixel noise.
inline Scene random_scene(int height, int width, const std::vector<std::array<int, 3>>& palette, std::uint64_t seed,
                          int rectangles = 4) {
  std::mt19937_64 rng(seed);
  const int categories = static_cast<int>(palette.size());

  Scene s{RgbImage{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width * 3)},
          LabelMap{height, width, std::vector<int>(static_cast<std::size_t>(height) * width, 0)}};
  std::uniform_int_distribution<int> cat(0, categories - 1);
  for (int r = 0; r < rectangles; ++r) {
    const int c = cat(rng);
    const int y0 = std::uniform_int_distribution<int>(0, height - 1)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, width - 1)(rng);
    const int y1 = std::uniform_int_distribution<int>(y0, height - 1)(rng);
    const int x1 = std::uniform_int_distribution<int>(x0, width - 1)(rng);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) s.labels.at(y, x) = c;
  }
  std::uniform_int_distribution<int> noise(-12, 12);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto& col = palette[static_cast<std::size_t>(s.labels.at(y, x))];
      for (int ch = 0; ch < 3; ++ch) {
        s.image.pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch] =
            static_cast<std::uint8_t>(std::clamp(col[static_cast<std::size_t>(ch)] + noise(rng), 0, 255));
      }
    }
  return s;
}

}  // namespace sccal::toy
