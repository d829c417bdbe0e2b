#pragma once

// Segmentation metrics and the pairwise semantic-coherence ROC analysis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sccal/error.hpp"
#include "sccal/image.hpp"
#include "sccal/numerics.hpp"
#include "sccal/pipeline.hpp"

namespace sccal {

inline constexpr int kIgnoreLabel = 255;
inline constexpr int kExcludedPatch = -1;

class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int num_classes, int ignore_index = kIgnoreLabel)
      : num_classes_(num_classes), ignore_index_(ignore_index),
        matrix_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw ParameterError("ConfusionAccumulator: need at least one class");
  }

  int num_classes() const { return num_classes_; }
  int ignore_index() const { return ignore_index_; }

  // matrix[gt][pred]
  std::uint64_t count(int gt, int pred) const {
    return matrix_[static_cast<std::size_t>(gt) * num_classes_ + pred];
  }

  void add(std::span<const int> pred, std::span<const int> gt) {
    if (pred.size() != gt.size()) throw ShapeError("confusion: prediction and ground truth sizes differ");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int g = gt[i];
      if (g == ignore_index_) continue;
      const int p = pred[i];
      if (g < 0 || g >= num_classes_) throw DataError("ground-truth label " + std::to_string(g) + " out of range");
      if (p < 0 || p >= num_classes_) throw DataError("predicted label " + std::to_string(p) + " out of range");
      ++matrix_[static_cast<std::size_t>(g) * num_classes_ + p];
    }
  }

  void merge(const ConfusionAccumulator& o) {
    if (o.num_classes_ != num_classes_) throw ShapeError("confusion: class count mismatch in merge");
    for (std::size_t i = 0; i < matrix_.size(); ++i) matrix_[i] += o.matrix_[i];
  }

  // Per-class IoU; classes absent from both ground truth and prediction are nullopt.
  std::vector<std::optional<double>> per_class_iou() const {
    std::vector<std::optional<double>> out(static_cast<std::size_t>(num_classes_));
    for (int c = 0; c < num_classes_; ++c) {
      std::uint64_t tp = count(c, c), fp = 0, fn = 0;
      for (int o = 0; o < num_classes_; ++o) {
        if (o == c) continue;
        fn += count(c, o);
        fp += count(o, c);
      }
      const std::uint64_t denom = tp + fp + fn;
      if (denom > 0) out[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return out;
  }

  // NaN when nothing has been accumulated.
  double miou() const {
    double acc = 0.0;
    int n = 0;
    for (const auto& v : per_class_iou())
      if (v) {
        acc += *v;
        ++n;
      }
    return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
  }

  std::uint64_t total() const { return std::accumulate(matrix_.begin(), matrix_.end(), std::uint64_t{0}); }

 private:
  int num_classes_;
  int ignore_index_;
  std::vector<std::uint64_t> matrix_;
};

inline void accumulate_miou(const SegmentationMap& pred, const LabelMap& gt, ConfusionAccumulator& acc) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("accumulate_miou: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  acc.add(pred.labels, gt.labels);
}

// Modal category per patch. Remainder pixels belong to the last patch row or
// column; ignore pixels do not vote; ties go to the lower category; patches
// with no votes are kExcludedPatch.
inline std::vector<int> patch_majority_labels(const LabelMap& gt, int grid_h, int grid_w,
                                              int ignore_index = kIgnoreLabel) {
  if (grid_h < 1 || grid_w < 1 || gt.height < grid_h || gt.width < grid_w) {
    throw ShapeError("patch_majority_labels: " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                     " label map cannot cover a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  const int ph = gt.height / grid_h, pw = gt.width / grid_w;
  std::vector<int> out(static_cast<std::size_t>(grid_h) * grid_w, kExcludedPatch);
  std::vector<std::pair<int, int>> votes;  // (label, count), kept sorted by label
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      votes.clear();
      const int y1 = r == grid_h - 1 ? gt.height : (r + 1) * ph;
      const int x1 = c == grid_w - 1 ? gt.width : (c + 1) * pw;
      for (int y = r * ph; y < y1; ++y)
        for (int x = c * pw; x < x1; ++x) {
          const int l = gt.at(y, x);
          if (l == ignore_index) continue;
          auto it = std::lower_bound(votes.begin(), votes.end(), std::make_pair(l, 0),
                                     [](const auto& a, const auto& b) { return a.first < b.first; });
          if (it != votes.end() && it->first == l) {
            ++it->second;
          } else {
            votes.insert(it, {l, 1});
          }
        }
      int best = kExcludedPatch, best_n = 0;
      for (const auto& [l, n] : votes)
        if (n > best_n) {
          best = l;
          best_n = n;
        }
      out[static_cast<std::size_t>(r) * grid_w + c] = best;
    }
  return out;
}

struct CoherenceSample {
  std::vector<double> scores;
  std::vector<std::uint8_t> same_category;
};

// Rank-statistic AUC with half credit for ties; nullopt without both classes.
inline std::optional<double> auc_mann_whitney(const std::vector<double>& scores,
                                              const std::vector<std::uint8_t>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::uint64_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (positive[order[t]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct CoherenceOptions {
  std::size_t exhaustive_limit = 1024;  // all pairs up to this many valid patches
  std::size_t sampled_pairs = 500000;
  std::uint64_t seed = 0;
};

// Unordered off-diagonal pairs of non-excluded patches, scored by similarity.
inline CoherenceSample coherence_sample(const SimilarityMap& simi, const std::vector<int>& labels,
                                        const CoherenceOptions& opt = {}) {
  if (labels.size() != simi.n) throw ShapeError("coherence: label count != similarity size");
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kExcludedPatch) valid.push_back(i);
  CoherenceSample s;
  auto push = [&](std::size_t a, std::size_t b) {
    s.scores.push_back(simi.values(a, b));
    s.same_category.push_back(labels[a] == labels[b] ? 1 : 0);
  };
  if (valid.size() <= opt.exhaustive_limit) {
    for (std::size_t i = 0; i < valid.size(); ++i)
      for (std::size_t j = i + 1; j < valid.size(); ++j) push(valid[i], valid[j]);
  } else {
    std::mt19937_64 rng(opt.seed);
    std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
    for (std::size_t t = 0; t < opt.sampled_pairs; ++t) {
      std::size_t a = pick(rng), b = pick(rng);
      while (b == a) b = pick(rng);
      push(valid[a], valid[b]);
    }
  }
  return s;
}

inline std::optional<double> coherence_auc(const SimilarityMap& simi, const std::vector<int>& labels,
                                           const CoherenceOptions& opt = {}) {
  const CoherenceSample s = coherence_sample(simi, labels, opt);
  return auc_mann_whitney(s.scores, s.same_category);
}

}  // namespace sccal
