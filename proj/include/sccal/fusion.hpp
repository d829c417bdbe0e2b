#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "sccal/error.hpp"
#include "sccal/numerics.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal {

enum class FusionStrategy { NONE, DIRECT_SUM, ONE_PASS, TWO_PASS };

inline std::string_view to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::NONE: return "none";
    case FusionStrategy::DIRECT_SUM: return "direct_sum";
    case FusionStrategy::ONE_PASS: return "one_pass";
    case FusionStrategy::TWO_PASS: return "two_pass";
  }
  return "unknown";
}

inline FusionStrategy fusion_strategy_from_string(std::string_view s) {
  for (auto f : {FusionStrategy::NONE, FusionStrategy::DIRECT_SUM, FusionStrategy::ONE_PASS, FusionStrategy::TWO_PASS})
    if (to_string(f) == s) return f;
  throw ParameterError("unknown fusion strategy '" + std::string(s) + "'");
}

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::TWO_PASS;
  std::vector<int> levels = {4, 5, 6, 7, 8, 9, 10};  // 1-based layer numbers
};

using LastLayerFn = std::function<TokenGrid(const TokenGrid&)>;

// Elementwise sum of the selected layers, accumulated in ascending layer order.
inline TokenGrid multilevel_sum(const LayerStack& stack, const FusionConfig& cfg) {
  if (cfg.levels.empty()) throw ParameterError("multilevel_sum: empty level set");
  std::vector<int> order = cfg.levels;
  std::sort(order.begin(), order.end());
  for (int l : order) {
    if (l < 1 || l > stack.depth()) {
      throw ParameterError("multilevel_sum: layer " + std::to_string(l) + " not captured (depth " +
                           std::to_string(stack.depth()) + ")");
    }
  }
  TokenGrid out = stack.layer(order.front());
  for (std::size_t i = 1; i < order.size(); ++i) out = add(out, stack.layer(order[i]));
  return out;
}

inline TokenGrid fuse(const TokenGrid& x_penul, const TokenGrid& ml_sum, const LastLayerFn& last,
                      const FusionConfig& cfg) {
  switch (cfg.strategy) {
    case FusionStrategy::NONE:
      return last(x_penul);
    case FusionStrategy::DIRECT_SUM:
      return add(last(x_penul), ml_sum);
    case FusionStrategy::ONE_PASS:
      return last(add(x_penul, ml_sum));
    case FusionStrategy::TWO_PASS:
      return add(last(x_penul), last(ml_sum));
  }
  throw ParameterError("fuse: unknown strategy");
}

// Mean over tokens of the per-token cosine similarity between two grids.
inline double feature_compatibility(const TokenGrid& a, const TokenGrid& b) {
  if (!a.same_shape(b)) throw ShapeError("feature_compatibility: shape mismatch");
  if (a.count() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i) {
    const double na = norm(a.tokens.row(i)), nb = norm(b.tokens.row(i));
    if (na > 0.0 && nb > 0.0) acc += dot(a.tokens.row(i), b.tokens.row(i)) / (na * nb);
  }
  return acc / static_cast<double>(a.count());
}

}  // namespace sccal
