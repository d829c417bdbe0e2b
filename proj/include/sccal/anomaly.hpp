#pragma once

// Anomaly tokens: Local Outlier Factor scoring over patch tokens, top-K
// selection, and masked 3x3 neighbour interpolation of the flagged tokens.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "sccal/error.hpp"
#include "sccal/numerics.hpp"
#include "sccal/vit_encoder.hpp"

namespace sccal {

struct LofConfig {
  int k_neighbors = 0;  // 0 -> min(20, N - 1)
  int anomaly_count = 10;

  int effective_k(std::size_t n) const {
    if (k_neighbors > 0) return k_neighbors;
    return static_cast<int>(std::min<std::size_t>(20, n > 0 ? n - 1 : 0));
  }
};

struct AnomalySet {
  std::vector<GridCoord> coords;  // highest score first
  std::vector<double> scores;

  std::size_t size() const { return coords.size(); }
  bool contains(GridCoord c) const { return std::find(coords.begin(), coords.end(), c) != coords.end(); }
};

// LOF with the original definitions: k-distance neighbourhoods include every
// point tied at the k-distance, reachability distance max(k-dist(o), d(p,o)),
// lrd the inverse mean reachability. A zero reachability sum (duplicate
// clusters) means infinite density; inf/inf ratios count as 1.
inline std::vector<double> lof_scores(const Tensor2D& tokens, const LofConfig& cfg = {}) {
  const std::size_t n = tokens.rows();
  const int k = cfg.effective_k(n);
  if (k < 1 || static_cast<std::size_t>(k) >= n) {
    throw ParameterError("lof_scores: need 1 <= k < N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
  }

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = tokens.row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto b = tokens.row(j);
      double acc = 0.0;
      for (std::size_t c = 0; c < a.size(); ++c) {
        const double d = static_cast<double>(a[c]) - b[c];
        acc += d * d;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(acc);
    }
  }

  std::vector<double> kdist(n);
  std::vector<std::vector<std::size_t>> neighbors(n);
  std::vector<double> sorted;
  for (std::size_t i = 0; i < n; ++i) {
    sorted.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sorted.push_back(dist[i * n + j]);
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
    kdist[i] = sorted[static_cast<std::size_t>(k - 1)];
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && dist[i * n + j] <= kdist[i]) neighbors[i].push_back(j);
  }

  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> lrd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double reach = 0.0;
    for (std::size_t j : neighbors[i]) reach += std::max(kdist[j], dist[i * n + j]);
    lrd[i] = reach > 0.0 ? static_cast<double>(neighbors[i].size()) / reach : kInf;
  }

  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j : neighbors[i]) {
      if (std::isinf(lrd[i])) {
        acc += std::isinf(lrd[j]) ? 1.0 : 0.0;
      } else {
        acc += lrd[j] / lrd[i];
      }
    }
    scores[i] = acc / static_cast<double>(neighbors[i].size());
  }
  return scores;
}

// The `count` highest scores; equal scores resolve to the lower row-major index.
inline AnomalySet select_anomalies(const std::vector<double>& scores, int grid_h, int grid_w, int count) {
  const std::size_t n = scores.size();
  if (n != static_cast<std::size_t>(grid_h) * grid_w) throw ShapeError("select_anomalies: scores do not match grid");
  if (count < 0 || static_cast<std::size_t>(count) >= n) {
    throw ParameterError("select_anomalies: count " + std::to_string(count) + " must be in [0, N)");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  AnomalySet out;
  for (int i = 0; i < count; ++i) {
    const std::size_t idx = order[static_cast<std::size_t>(i)];
    out.coords.push_back({static_cast<int>(idx) / grid_w, static_cast<int>(idx) % grid_w});
    out.scores.push_back(scores[idx]);
  }
  return out;
}

inline AnomalySet detect_anomalies(const TokenGrid& grid, const LofConfig& cfg) {
  if (cfg.anomaly_count == 0) return {};
  return select_anomalies(lof_scores(grid.tokens, cfg), grid.h, grid.w, cfg.anomaly_count);
}

// Replaces every flagged token by the mean of its in-bounds, non-flagged 3x3
// neighbours, reading only from the original grid. Tokens with no usable
// neighbour stay as they are and are appended to `isolated`.
inline TokenGrid resolve_anomalies(const TokenGrid& grid, const AnomalySet& anomalies,
                                   std::vector<GridCoord>* isolated = nullptr) {
  std::vector<char> flagged(grid.count(), 0);
  for (const auto& c : anomalies.coords) {
    if (c.row < 0 || c.row >= grid.h || c.col < 0 || c.col >= grid.w) {
      throw ParameterError("resolve_anomalies: coordinate (" + std::to_string(c.row) + "," +
                           std::to_string(c.col) + ") outside grid");
    }
    flagged[grid.index(c.row, c.col)] = 1;
  }

  TokenGrid out = grid;
  std::vector<double> acc(grid.dim());
  for (const auto& c : anomalies.coords) {
    std::fill(acc.begin(), acc.end(), 0.0);
    int used = 0;
    for (int di = -1; di <= 1; ++di)
      for (int dj = -1; dj <= 1; ++dj) {
        const int r = c.row + di, q = c.col + dj;
        if ((di == 0 && dj == 0) || r < 0 || r >= grid.h || q < 0 || q >= grid.w) continue;
        if (flagged[grid.index(r, q)]) continue;
        const auto src = grid.at(r, q);
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += src[d];
        ++used;
      }
    if (used == 0) {
      if (isolated) isolated->push_back(c);
      continue;
    }
    auto dst = out.at(c.row, c.col);
    for (std::size_t d = 0; d < acc.size(); ++d) dst[d] = static_cast<float>(acc[d] / used);
  }
  return out;
}

}  // namespace sccal
