#pragma once

// CLIP-style ViT visual tower: patch embedding, pre-LN transformer blocks with
// per-layer capture, and the last-layer variants the calibration pipeline
// swaps in (fixed attention, with or without residual + FFN).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sccal/attention.hpp"
#include "sccal/error.hpp"
#include "sccal/image.hpp"
#include "sccal/numerics.hpp"
#include "sccal/tensor_container.hpp"

namespace sccal {

struct GridCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
  friend auto operator<=>(const GridCoord&, const GridCoord&) = default;
};

// Spatial grid of patch tokens; the class token rides along separately and
// never takes part in spatial operations.
struct TokenGrid {
  int h = 0;
  int w = 0;
  Tensor2D tokens;  // (h*w) x dim, row-major over the grid
  std::optional<std::vector<float>> cls;

  std::size_t count() const { return tokens.rows(); }
  std::size_t dim() const { return tokens.cols(); }
  std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * w + c; }
  std::span<float> at(int r, int c) { return tokens.row(index(r, c)); }
  std::span<const float> at(int r, int c) const { return tokens.row(index(r, c)); }

  bool same_shape(const TokenGrid& o) const { return h == o.h && w == o.w && tokens.same_shape(o.tokens); }
};

inline TokenGrid add(const TokenGrid& a, const TokenGrid& b) {
  if (!a.same_shape(b)) throw ShapeError("TokenGrid add: shape mismatch");
  return TokenGrid{a.h, a.w, add(a.tokens, b.tokens), a.cls};
}

// Layer outputs X^1..X^depth. Layer numbers are 1-based throughout.
struct LayerStack {
  std::vector<TokenGrid> per_layer;

  int depth() const { return static_cast<int>(per_layer.size()); }
  int penultimate_index() const { return depth() - 1; }
  int last_index() const { return depth(); }

  const TokenGrid& layer(int l) const {
    if (l < 1 || l > depth()) {
      throw ParameterError("layer " + std::to_string(l) + " not captured (depth " + std::to_string(depth()) + ")");
    }
    return per_layer[static_cast<std::size_t>(l - 1)];
  }
  TokenGrid& layer(int l) { return const_cast<TokenGrid&>(std::as_const(*this).layer(l)); }
  const TokenGrid& penultimate() const { return layer(penultimate_index()); }
  const TokenGrid& last() const { return layer(last_index()); }
};

struct ModelShape {
  int depth = 12;
  int width = 768;
  int heads = 12;
  int patch = 16;
  int image_size = 224;
  int proj_dim = 512;

  int grid() const { return image_size / patch; }
  int head_dim() const { return width / heads; }
  int mlp_width() const { return 4 * width; }
};

struct LayerWeights {
  std::vector<float> ln1_gain, ln1_bias;
  Tensor2D in_proj;  // 3W x W, rows ordered [q; k; v]
  std::vector<float> in_proj_bias;
  Tensor2D out_proj;  // W x W
  std::vector<float> out_proj_bias;
  std::vector<float> ln2_gain, ln2_bias;
  Tensor2D fc;  // 4W x W
  std::vector<float> fc_bias;
  Tensor2D fc_proj;  // W x 4W
  std::vector<float> fc_proj_bias;
};

struct EncoderWeights {
  ModelShape shape;
  Tensor2D patch_kernel;  // W x (3 * P * P), channel-major like a conv kernel
  std::vector<float> class_embedding;
  Tensor2D positional;  // (1 + G*G) x W
  std::vector<float> ln_pre_gain, ln_pre_bias;
  std::vector<LayerWeights> layers;
  std::vector<float> ln_post_gain, ln_post_bias;
  Tensor2D visual_proj;  // W x proj_dim

  const LayerWeights& last_layer() const { return layers.back(); }

  void validate() const {
    const auto& s = shape;
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ShapeError("encoder weights: " + what);
    };
    need(s.depth >= 1 && s.width >= 1 && s.heads >= 1 && s.patch >= 1, "non-positive hyperparameter");
    need(s.width % s.heads == 0, "width not divisible by heads");
    need(static_cast<int>(layers.size()) == s.depth, "layer count != depth");
    const auto W = static_cast<std::size_t>(s.width);
    need(patch_kernel.rows() == W && patch_kernel.cols() == static_cast<std::size_t>(3 * s.patch * s.patch),
         "conv1.weight shape");
    need(class_embedding.size() == W, "class_embedding length");
    need(positional.cols() == W && positional.rows() >= 2, "positional_embedding shape");
    need(ln_pre_gain.size() == W && ln_pre_bias.size() == W, "ln_pre shape");
    need(ln_post_gain.size() == W && ln_post_bias.size() == W, "ln_post shape");
    need(visual_proj.rows() == W && visual_proj.cols() == static_cast<std::size_t>(s.proj_dim), "proj shape");
    for (const auto& L : layers) {
      need(L.in_proj.rows() == 3 * W && L.in_proj.cols() == W && L.in_proj_bias.size() == 3 * W, "in_proj shape");
      need(L.out_proj.rows() == W && L.out_proj.cols() == W && L.out_proj_bias.size() == W, "out_proj shape");
      need(L.ln1_gain.size() == W && L.ln1_bias.size() == W && L.ln2_gain.size() == W && L.ln2_bias.size() == W,
           "block layer-norm shape");
      need(L.fc.cols() == W && L.fc_bias.size() == L.fc.rows(), "mlp.c_fc shape");
      need(L.fc_proj.rows() == W && L.fc_proj.cols() == L.fc.rows() && L.fc_proj_bias.size() == W, "mlp.c_proj shape");
    }
  }

  static std::string block_prefix(int i) { return "transformer.resblocks." + std::to_string(i) + "."; }

  static EncoderWeights from_container(const TensorContainer& c) {
    EncoderWeights w;
    auto meta = [&](const char* name) { return static_cast<int>(std::lround(c.scalar(name))); };
    w.shape.depth = meta("meta.depth");
    w.shape.width = meta("meta.width");
    w.shape.heads = meta("meta.heads");
    w.shape.patch = meta("meta.patch_size");
    w.shape.image_size = meta("meta.image_size");
    w.shape.proj_dim = meta("meta.proj_dim");
    w.patch_kernel = c.matrix("conv1.weight");
    w.class_embedding = c.vector("class_embedding");
    w.positional = c.matrix("positional_embedding");
    w.ln_pre_gain = c.vector("ln_pre.weight");
    w.ln_pre_bias = c.vector("ln_pre.bias");
    for (int i = 0; i < w.shape.depth; ++i) {
      const std::string p = block_prefix(i);
      LayerWeights L;
      L.ln1_gain = c.vector(p + "ln_1.weight");
      L.ln1_bias = c.vector(p + "ln_1.bias");
      L.in_proj = c.matrix(p + "attn.in_proj_weight");
      L.in_proj_bias = c.vector(p + "attn.in_proj_bias");
      L.out_proj = c.matrix(p + "attn.out_proj.weight");
      L.out_proj_bias = c.vector(p + "attn.out_proj.bias");
      L.ln2_gain = c.vector(p + "ln_2.weight");
      L.ln2_bias = c.vector(p + "ln_2.bias");
      L.fc = c.matrix(p + "mlp.c_fc.weight");
      L.fc_bias = c.vector(p + "mlp.c_fc.bias");
      L.fc_proj = c.matrix(p + "mlp.c_proj.weight");
      L.fc_proj_bias = c.vector(p + "mlp.c_proj.bias");
      w.layers.push_back(std::move(L));
    }
    w.ln_post_gain = c.vector("ln_post.weight");
    w.ln_post_bias = c.vector("ln_post.bias");
    w.visual_proj = c.matrix("proj");
    w.validate();
    return w;
  }

  TensorContainer to_container() const {
    TensorContainer c;
    c.add_scalar("meta.depth", static_cast<float>(shape.depth));
    c.add_scalar("meta.width", static_cast<float>(shape.width));
    c.add_scalar("meta.heads", static_cast<float>(shape.heads));
    c.add_scalar("meta.patch_size", static_cast<float>(shape.patch));
    c.add_scalar("meta.image_size", static_cast<float>(shape.image_size));
    c.add_scalar("meta.proj_dim", static_cast<float>(shape.proj_dim));
    const auto W = static_cast<std::uint32_t>(shape.width);
    const auto P = static_cast<std::uint32_t>(shape.patch);
    c.add("conv1.weight", {W, 3, P, P}, patch_kernel.data());
    c.add_vector("class_embedding", class_embedding);
    c.add("positional_embedding", positional);
    c.add_vector("ln_pre.weight", ln_pre_gain);
    c.add_vector("ln_pre.bias", ln_pre_bias);
    for (int i = 0; i < shape.depth; ++i) {
      const std::string p = block_prefix(i);
      const auto& L = layers[static_cast<std::size_t>(i)];
      c.add_vector(p + "ln_1.weight", L.ln1_gain);
      c.add_vector(p + "ln_1.bias", L.ln1_bias);
      c.add(p + "attn.in_proj_weight", L.in_proj);
      c.add_vector(p + "attn.in_proj_bias", L.in_proj_bias);
      c.add(p + "attn.out_proj.weight", L.out_proj);
      c.add_vector(p + "attn.out_proj.bias", L.out_proj_bias);
      c.add_vector(p + "ln_2.weight", L.ln2_gain);
      c.add_vector(p + "ln_2.bias", L.ln2_bias);
      c.add(p + "mlp.c_fc.weight", L.fc);
      c.add_vector(p + "mlp.c_fc.bias", L.fc_bias);
      c.add(p + "mlp.c_proj.weight", L.fc_proj);
      c.add_vector(p + "mlp.c_proj.bias", L.fc_proj_bias);
    }
    c.add_vector("ln_post.weight", ln_post_gain);
    c.add_vector("ln_post.bias", ln_post_bias);
    c.add("proj", visual_proj);
    return c;
  }
};

namespace detail {

inline Tensor2D column_block(const Tensor2D& m, std::size_t offset, std::size_t width) {
  Tensor2D out(m.rows(), width);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = m(i, offset + j);
  return out;
}

inline Tensor2D merge_heads(const std::vector<Tensor2D>& heads) {
  const std::size_t rows = heads.front().rows(), d = heads.front().cols();
  Tensor2D out(rows, d * heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, h * d + j) = heads[h](i, j);
  return out;
}

inline void quick_gelu(Tensor2D& m) {
  for (float& v : m.data()) v = static_cast<float>(v / (1.0 + std::exp(-1.702 * v)));
}

inline Tensor2D feed_forward(const Tensor2D& x, const LayerWeights& L) {
  Tensor2D hidden = linear(layer_norm(x, L.ln2_gain, L.ln2_bias), L.fc, L.fc_bias);
  quick_gelu(hidden);
  return linear(hidden, L.fc_proj, L.fc_proj_bias);
}

}  // namespace detail

// Per-head projections of already layer-normed tokens.
struct HeadProjections {
  std::vector<Tensor2D> q, k, v;
};

inline HeadProjections project_heads(const Tensor2D& normed, const LayerWeights& L, int heads) {
  const Tensor2D qkv = linear(normed, L.in_proj, L.in_proj_bias);
  const std::size_t width = L.in_proj.cols();
  const std::size_t d = width / static_cast<std::size_t>(heads);
  HeadProjections p;
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * d;
    p.q.push_back(detail::column_block(qkv, off, d));
    p.k.push_back(detail::column_block(qkv, width + off, d));
    p.v.push_back(detail::column_block(qkv, 2 * width + off, d));
  }
  return p;
}

// Projections of the last block for a grid's patch tokens (class token excluded).
inline HeadProjections last_layer_projections(const TokenGrid& x, const EncoderWeights& w) {
  const auto& L = w.last_layer();
  return project_heads(layer_norm(x.tokens, L.ln1_gain, L.ln1_bias), L, w.shape.heads);
}

// One standard pre-LN block over a full sequence.
inline Tensor2D standard_block(const Tensor2D& seq, const LayerWeights& L, int heads) {
  const HeadProjections p = project_heads(layer_norm(seq, L.ln1_gain, L.ln1_bias), L, heads);
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(p.q.front().cols())));
  std::vector<Tensor2D> outs;
  for (int h = 0; h < heads; ++h) {
    const auto hi = static_cast<std::size_t>(h);
    const Tensor2D attn = row_softmax(scaled(matmul_bt(p.q[hi], p.k[hi]), scale));
    outs.push_back(matmul(attn, p.v[hi]));
  }
  const Tensor2D z = add(seq, linear(detail::merge_heads(outs), L.out_proj, L.out_proj_bias));
  return add(z, detail::feed_forward(z, L));
}

// Position embeddings for a gh x gw grid; bilinear resampling of the stored
// square grid when the window is not the native resolution.
inline Tensor2D positional_for_grid(const EncoderWeights& w, int gh, int gw) {
  const std::size_t stored = w.positional.rows() - 1;
  if (stored == static_cast<std::size_t>(gh) * gw && gh == gw) return w.positional;
  const int gs = static_cast<int>(std::lround(std::sqrt(static_cast<double>(stored))));
  if (static_cast<std::size_t>(gs) * gs != stored) throw ShapeError("positional embedding grid is not square");
  const std::size_t W = w.positional.cols();
  ImageTensor grid(static_cast<int>(W), gs, gs);
  for (int y = 0; y < gs; ++y)
    for (int x = 0; x < gs; ++x)
      for (std::size_t c = 0; c < W; ++c) grid.at(static_cast<int>(c), y, x) = w.positional(1 + y * gs + x, c);
  const ImageTensor resized = resize_bilinear(grid, gh, gw);
  Tensor2D out(1 + static_cast<std::size_t>(gh) * gw, W);
  for (std::size_t c = 0; c < W; ++c) out(0, c) = w.positional(0, c);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x)
      for (std::size_t c = 0; c < W; ++c) out(1 + y * gw + x, c) = resized.at(static_cast<int>(c), y, x);
  return out;
}

// [cls; patches] + positions, then ln_pre. Returns (1 + N) x W.
inline Tensor2D embed_image(const ImageTensor& image, const EncoderWeights& w) {
  const int P = w.shape.patch;
  if (image.channels != 3) throw ShapeError("embed_image: expected 3 channels");
  if (image.height % P != 0 || image.width % P != 0 || image.height == 0 || image.width == 0) {
    throw ShapeError("embed_image: " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " not divisible by patch size " + std::to_string(P));
  }
  const int gh = image.height / P, gw = image.width / P;
  const std::size_t W = static_cast<std::size_t>(w.shape.width);
  Tensor2D patches(static_cast<std::size_t>(gh) * gw, static_cast<std::size_t>(3 * P * P));
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      auto r = patches.row(static_cast<std::size_t>(gy) * gw + gx);
      std::size_t k = 0;
      for (int c = 0; c < 3; ++c)
        for (int ky = 0; ky < P; ++ky)
          for (int kx = 0; kx < P; ++kx) r[k++] = image.at(c, gy * P + ky, gx * P + kx);
    }
  const Tensor2D embedded = matmul_bt(patches, w.patch_kernel);
  const Tensor2D pos = positional_for_grid(w, gh, gw);
  Tensor2D seq(1 + embedded.rows(), W);
  for (std::size_t c = 0; c < W; ++c) seq(0, c) = w.class_embedding[c] + pos(0, c);
  for (std::size_t i = 0; i < embedded.rows(); ++i)
    for (std::size_t c = 0; c < W; ++c) seq(1 + i, c) = embedded(i, c) + pos(1 + i, c);
  return layer_norm(seq, w.ln_pre_gain, w.ln_pre_bias);
}

inline TokenGrid split_sequence(const Tensor2D& seq, int gh, int gw) {
  TokenGrid g{gh, gw, Tensor2D(seq.rows() - 1, seq.cols()), std::vector<float>(seq.row(0).begin(), seq.row(0).end())};
  std::copy(seq.data().begin() + static_cast<std::ptrdiff_t>(seq.cols()), seq.data().end(), g.tokens.data().begin());
  return g;
}

inline Tensor2D join_sequence(const TokenGrid& g) {
  if (!g.cls || g.cls->size() != g.dim()) throw ShapeError("token grid has no class token of matching width");
  Tensor2D seq(1 + g.count(), g.dim());
  std::copy(g.cls->begin(), g.cls->end(), seq.data().begin());
  std::copy(g.tokens.data().begin(), g.tokens.data().end(), seq.data().begin() + static_cast<std::ptrdiff_t>(g.dim()));
  return seq;
}

inline LayerStack encode_all_layers(const ImageTensor& image, const EncoderWeights& w) {
  const int gh = image.height / w.shape.patch, gw = image.width / w.shape.patch;
  Tensor2D seq = embed_image(image, w);
  LayerStack stack;
  stack.per_layer.reserve(w.layers.size());
  for (const auto& L : w.layers) {
    seq = standard_block(seq, L, w.shape.heads);
    stack.per_layer.push_back(split_sequence(seq, gh, gw));
  }
  return stack;
}

// Final LN followed by the visual projection.
inline Tensor2D project_tokens(const Tensor2D& tokens, const EncoderWeights& w) {
  return matmul(layer_norm(tokens, w.ln_post_gain, w.ln_post_bias), w.visual_proj);
}

inline TokenGrid project_grid(const TokenGrid& g, const EncoderWeights& w) {
  return TokenGrid{g.h, g.w, project_tokens(g.tokens, w), g.cls};
}

namespace detail {

inline Tensor2D fixed_attention_output(const TokenGrid& x, const EncoderWeights& w,
                                       std::span<const AttentionWeights> attn) {
  const int heads = w.shape.heads;
  if (attn.size() != 1 && attn.size() != static_cast<std::size_t>(heads)) {
    throw ShapeError("last layer: expected 1 or " + std::to_string(heads) + " attention matrices, got " +
                     std::to_string(attn.size()));
  }
  for (const auto& a : attn)
    if (a.values.rows() != x.count() || a.values.cols() != x.count()) {
      throw ShapeError("last layer: attention is " + std::to_string(a.values.rows()) + "x" +
                       std::to_string(a.values.cols()) + ", tokens " + std::to_string(x.count()));
    }
  const HeadProjections p = last_layer_projections(x, w);
  std::vector<Tensor2D> outs;
  for (int h = 0; h < heads; ++h) {
    const auto& a = attn.size() == 1 ? attn[0] : attn[static_cast<std::size_t>(h)];
    outs.push_back(matmul(a.values, p.v[static_cast<std::size_t>(h)]));
  }
  const auto& L = w.last_layer();
  return linear(merge_heads(outs), L.out_proj, L.out_proj_bias);
}

}  // namespace detail

// Last block with the supplied attention, no residual and no FFN, then final
// LN + projection. A single attention matrix is shared by every head.
inline TokenGrid modified_last_layer(const TokenGrid& x, const EncoderWeights& w,
                                     std::span<const AttentionWeights> attn) {
  return TokenGrid{x.h, x.w, project_tokens(detail::fixed_attention_output(x, w, attn), w), x.cls};
}

// Same fixed attention, but keeping the residual path and the FFN.
inline TokenGrid residual_last_layer(const TokenGrid& x, const EncoderWeights& w,
                                     std::span<const AttentionWeights> attn) {
  const Tensor2D z = add(x.tokens, detail::fixed_attention_output(x, w, attn));
  const Tensor2D out = add(z, detail::feed_forward(z, w.last_layer()));
  return TokenGrid{x.h, x.w, project_tokens(out, w), x.cls};
}

// The unmodified last block (class token included in attention), projected.
inline TokenGrid standard_last_layer(const TokenGrid& x, const EncoderWeights& w) {
  const Tensor2D seq = standard_block(join_sequence(x), w.last_layer(), w.shape.heads);
  return project_grid(split_sequence(seq, x.h, x.w), w);
}

}  // namespace sccal
