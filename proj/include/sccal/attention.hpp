#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "sccal/error.hpp"
#include "sccal/numerics.hpp"

namespace sccal {

enum class AttentionKind {
  QK_BASELINE,   // softmax(Q K^T)
  QQ_PLUS_KK,    // softmax(Q Q^T) + softmax(K K^T)
  KK_ONLY,       // softmax(K K^T)
  SIMI_ONLY,     // softmax(Simi / t)
  KK_PLUS_SIMI,  // softmax(K K^T) + softmax(Simi / t)
};

struct AttentionMode {
  AttentionKind kind = AttentionKind::KK_PLUS_SIMI;
  bool scale_qk = true;           // 1/sqrt(d_head) inside every projection softmax
  double simi_temperature = 1.0;  // divides Simi before its softmax

  bool uses_similarity() const {
    return kind == AttentionKind::SIMI_ONLY || kind == AttentionKind::KK_PLUS_SIMI;
  }
  bool uses_query() const { return kind == AttentionKind::QK_BASELINE || kind == AttentionKind::QQ_PLUS_KK; }

  // Number of softmax terms summed, i.e. the mass of every attention row.
  double row_mass() const {
    return (kind == AttentionKind::QQ_PLUS_KK || kind == AttentionKind::KK_PLUS_SIMI) ? 2.0 : 1.0;
  }
};

inline std::string_view to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::QK_BASELINE: return "qk_baseline";
    case AttentionKind::QQ_PLUS_KK: return "qq_plus_kk";
    case AttentionKind::KK_ONLY: return "kk_only";
    case AttentionKind::SIMI_ONLY: return "simi_only";
    case AttentionKind::KK_PLUS_SIMI: return "kk_plus_simi";
  }
  return "unknown";
}

inline AttentionKind attention_kind_from_string(std::string_view s) {
  for (auto k : {AttentionKind::QK_BASELINE, AttentionKind::QQ_PLUS_KK, AttentionKind::KK_ONLY,
                 AttentionKind::SIMI_ONLY, AttentionKind::KK_PLUS_SIMI})
    if (to_string(k) == s) return k;
  throw ParameterError("unknown attention mode '" + std::string(s) + "'");
}

// One head's N x N attention over patch tokens. Rows sum to row_mass.
struct AttentionWeights {
  Tensor2D values;
  double row_mass = 1.0;
};

}  // namespace sccal
