#pragma once

// Mid-layer similarity used two ways: as convex aggregation weights over deep
// tokens, and as an additive softmax term on the last layer's attention.

#include <cmath>
#include <string>
#include <vector>

#include "sccal/attention.hpp"
#include "sccal/error.hpp"
#include "sccal/numerics.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal {

enum class NormKind { ROW_SOFTMAX };

struct AdjustConfig {
  int pre_source_layer = 9;   // similarity for X^penul aggregation and attention enhancement
  int post_source_layer = 4;  // similarity for aggregation of the final features
  NormKind norm_kind = NormKind::ROW_SOFTMAX;
  double norm_temperature = 1.0;
  double simi_scale = 2.0;
};

// Row-normalised aggregation weights: softmax(scale * Simi / temperature).
inline Tensor2D aggregation_weights(const SimilarityMap& simi, const AdjustConfig& cfg) {
  if (!(cfg.simi_scale > 0.0)) throw ParameterError("aggregation: simi_scale must be positive");
  return row_softmax(scaled(simi.values, static_cast<float>(cfg.simi_scale)), cfg.norm_temperature);
}

inline TokenGrid aggregate_features(const TokenGrid& deep, const SimilarityMap& simi, const AdjustConfig& cfg = {}) {
  if (simi.n != deep.count() || simi.values.rows() != simi.n || simi.values.cols() != simi.n) {
    throw ShapeError("aggregate_features: similarity is " + std::to_string(simi.n) + "x" + std::to_string(simi.n) +
                     " but grid has " + std::to_string(deep.count()) + " tokens");
  }
  return TokenGrid{deep.h, deep.w, matmul(aggregation_weights(simi, cfg), deep.tokens), deep.cls};
}

namespace detail {

inline Tensor2D self_softmax(const Tensor2D& a, const Tensor2D& b, const AttentionMode& mode) {
  Tensor2D logits = matmul_bt(a, b);
  if (mode.scale_qk) logits = scaled(logits, static_cast<float>(1.0 / std::sqrt(static_cast<double>(a.cols()))));
  return row_softmax(logits);
}

}  // namespace detail

// Attention for one head. `q` is only read by the query modes; `simi` only
// by the similarity modes (and may be null otherwise).
inline AttentionWeights attention_for_mode(const Tensor2D& q, const Tensor2D& k, const SimilarityMap* simi,
                                           const AttentionMode& mode) {
  const std::size_t n = k.rows();
  if (mode.uses_similarity()) {
    if (!simi) throw ParameterError(std::string("attention mode ") + std::string(to_string(mode.kind)) +
                                    " needs a similarity map");
    if (simi->n != n) {
      throw ShapeError("attention: similarity n=" + std::to_string(simi->n) + " vs " + std::to_string(n) + " tokens");
    }
    if (!(mode.simi_temperature > 0.0)) throw ParameterError("attention: simi_temperature must be positive");
  }
  if (mode.uses_query() && (q.rows() != n || q.cols() != k.cols())) {
    throw ShapeError("attention: query/key projections differ in shape");
  }

  AttentionWeights out{Tensor2D(), mode.row_mass()};
  switch (mode.kind) {
    case AttentionKind::QK_BASELINE:
      out.values = detail::self_softmax(q, k, mode);
      break;
    case AttentionKind::QQ_PLUS_KK:
      out.values = add(detail::self_softmax(q, q, mode), detail::self_softmax(k, k, mode));
      break;
    case AttentionKind::KK_ONLY:
      out.values = detail::self_softmax(k, k, mode);
      break;
    case AttentionKind::SIMI_ONLY:
      out.values = row_softmax(simi->values, mode.simi_temperature);
      break;
    case AttentionKind::KK_PLUS_SIMI:
      out.values = add(detail::self_softmax(k, k, mode), row_softmax(simi->values, mode.simi_temperature));
      break;
    default:
      throw ParameterError("unknown attention mode");
  }
  return out;
}

// Key-only modes; the similarity term is shared by every head.
inline AttentionWeights enhanced_attention(const Tensor2D& k_proj, const SimilarityMap& simi,
                                           const AttentionMode& mode) {
  if (mode.uses_query()) {
    throw ParameterError(std::string("enhanced_attention: mode ") + std::string(to_string(mode.kind)) +
                         " needs query projections; use attention_for_mode");
  }
  return attention_for_mode(k_proj, k_proj, &simi, mode);
}

// One attention matrix per head from the last block's projections.
inline std::vector<AttentionWeights> last_layer_attention(const HeadProjections& p, const SimilarityMap* simi,
                                                          const AttentionMode& mode) {
  std::vector<AttentionWeights> out;
  out.reserve(p.k.size());
  for (std::size_t h = 0; h < p.k.size(); ++h) out.push_back(attention_for_mode(p.q[h], p.k[h], simi, mode));
  return out;
}

}  // namespace sccal
