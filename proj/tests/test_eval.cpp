#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sccal/eval.hpp"

using sccal::ConfusionAccumulator;
using sccal::LabelMap;

namespace {

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int classes, double ignore_rate) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> out(n);
  for (int& v : out) v = u(rng) < ignore_rate ? sccal::kIgnoreLabel : cls(rng);
  return out;
}

double miou_of(const std::vector<int>& pred, const std::vector<int>& gt, int classes) {
  ConfusionAccumulator acc(classes);
  acc.add(pred, gt);
  return acc.miou();
}

}  // namespace

TEST(Miou, PerfectPrediction) {
  const std::vector<int> gt = {0, 1, 2, 2, sccal::kIgnoreLabel, 1};
  std::vector<int> pred = gt;
  pred[4] = 0;
  EXPECT_DOUBLE_EQ(miou_of(pred, gt, 3), 1.0);
}

TEST(Miou, HandCase) {
  // Class 0: 2 / 4. Class 1: 0 / 2.
  EXPECT_DOUBLE_EQ(miou_of({0, 0, 0, 0}, {0, 0, 1, 1}, 2), 0.25);
}

TEST(Miou, AbsentClassesAreSkipped) {
  ConfusionAccumulator acc(5);
  acc.add(std::vector<int>{0, 1}, std::vector<int>{0, 1});
  const auto per = acc.per_class_iou();
  EXPECT_FALSE(per[2].has_value());
  EXPECT_DOUBLE_EQ(acc.miou(), 1.0);
}

TEST(Miou, AllIgnoredIsNan) {
  const std::vector<int> gt(6, sccal::kIgnoreLabel);
  EXPECT_TRUE(std::isnan(miou_of(std::vector<int>(6, 1), gt, 3)));
}

TEST(Miou, OutOfRangeLabelsAreDataErrors) {
  ConfusionAccumulator acc(3);
  EXPECT_THROW(acc.add(std::vector<int>{0}, std::vector<int>{3}), sccal::DataError);
  EXPECT_THROW(acc.add(std::vector<int>{-1}, std::vector<int>{0}), sccal::DataError);
  EXPECT_THROW(acc.add(std::vector<int>{0, 1}, std::vector<int>{0}), sccal::ShapeError);
  // An ignored pixel may carry any prediction.
  EXPECT_NO_THROW(acc.add(std::vector<int>{17}, std::vector<int>{sccal::kIgnoreLabel}));
}

TEST(Miou, MatchesOracleOnRandomMaps) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const int classes = 2 + t % 7;
    const auto gt = random_labels(rng, 500, classes, 0.1);
    const auto pred = random_labels(rng, 500, classes, 0.0);
    ConfusionAccumulator acc(classes);
    acc.add(pred, gt);
    const auto want = oracle::iou(pred, gt, classes, sccal::kIgnoreLabel);
    const auto got = acc.per_class_iou();
    for (int c = 0; c < classes; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      ASSERT_EQ(got[ci].has_value(), !std::isnan(want[ci]));
      if (got[ci]) {
        EXPECT_EQ(*got[ci], want[ci]);
      }
    }
    EXPECT_NEAR(acc.miou(), oracle::miou(want), 1e-15);
  }
}

TEST(Miou, MergeEqualsSingleAccumulation) {
  std::mt19937_64 rng(2);
  const auto gt = random_labels(rng, 900, 5, 0.1);
  const auto pred = random_labels(rng, 900, 5, 0.0);
  ConfusionAccumulator whole(5), a(5), b(5);
  whole.add(pred, gt);
  // Image order does not matter either: accumulate the second half first.
  b.add(std::span(pred).subspan(450), std::span(gt).subspan(450));
  a.add(std::span(pred).first(450), std::span(gt).first(450));
  b.merge(a);
  EXPECT_EQ(b.miou(), whole.miou());
  EXPECT_EQ(b.total(), whole.total());
  EXPECT_THROW(b.merge(ConfusionAccumulator(4)), sccal::ShapeError);
}

TEST(Miou, AccumulateChecksShape) {
  ConfusionAccumulator acc(2);
  sccal::SegmentationMap pred{2, 2, 2, {0, 1, 1, 0}, std::nullopt};
  EXPECT_THROW(sccal::accumulate_miou(pred, LabelMap{2, 3, std::vector<int>(6, 0)}, acc), sccal::ShapeError);
  sccal::accumulate_miou(pred, LabelMap{2, 2, {0, 1, 1, 0}}, acc);
  EXPECT_DOUBLE_EQ(acc.miou(), 1.0);
}

TEST(PatchMajority, UniformPatches) {
  LabelMap gt{4, 4, std::vector<int>(16, 0)};
  for (int y = 0; y < 4; ++y)
    for (int x = 2; x < 4; ++x) gt.at(y, x) = 3;
  EXPECT_EQ(sccal::patch_majority_labels(gt, 2, 2), (std::vector<int>{0, 3, 0, 3}));
}

TEST(PatchMajority, SplitTieAndIgnore) {
  // 60/40 split, an exact tie, an ignore-dominated patch and an all-ignore patch.
  LabelMap gt{5, 20, std::vector<int>(100, 0)};
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) gt.at(y, x) = y < 3 ? 2 : 1;
    for (int x = 5; x < 10; ++x) gt.at(y, x) = (y * 5 + x) % 2 ? 4 : 6;
    for (int x = 10; x < 15; ++x) gt.at(y, x) = (y == 0 && x == 10) ? 5 : sccal::kIgnoreLabel;
    for (int x = 15; x < 20; ++x) gt.at(y, x) = sccal::kIgnoreLabel;
  }
  gt.at(4, 9) = 1;  // 12 x 4, 12 x 6, 1 x 1 in the second patch
  gt.at(4, 8) = 6;
  const auto got = sccal::patch_majority_labels(gt, 1, 4);
  EXPECT_EQ(got[0], 2);
  EXPECT_EQ(got[2], 5);
  EXPECT_EQ(got[3], sccal::kExcludedPatch);
  int n4 = 0, n6 = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 5; x < 10; ++x) {
      n4 += gt.at(y, x) == 4;
      n6 += gt.at(y, x) == 6;
    }
  ASSERT_EQ(n4, n6);
  EXPECT_EQ(got[1], 4);
}

TEST(PatchMajority, RemainderGoesToLastPatch) {
  // 5x5 map on a 2x2 grid: patches are 2x2, 2x3, 3x2 and 3x3.
  LabelMap gt{5, 5, std::vector<int>(25, 0)};
  for (int y = 2; y < 5; ++y)
    for (int x = 2; x < 5; ++x) gt.at(y, x) = 1;
  gt.at(4, 0) = 1;
  gt.at(4, 1) = 1;  // 2 of the 6 pixels in the bottom-left patch
  EXPECT_EQ(sccal::patch_majority_labels(gt, 2, 2), (std::vector<int>{0, 0, 0, 1}));
  EXPECT_THROW(sccal::patch_majority_labels(gt, 6, 1), sccal::ShapeError);
}

TEST(Auc, Extremes) {
  EXPECT_DOUBLE_EQ(*sccal::auc_mann_whitney({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(*sccal::auc_mann_whitney({0.1, 0.2, 0.9, 0.8}, {1, 1, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(*sccal::auc_mann_whitney({0.5, 0.5, 0.5}, {1, 0, 0}), 0.5);
  EXPECT_FALSE(sccal::auc_mann_whitney({0.1, 0.2}, {1, 1}).has_value());
  EXPECT_THROW(sccal::auc_mann_whitney({0.1}, {1, 0}), sccal::ShapeError);
}

TEST(Auc, HandCase) {
  // Positives {0.9, 0.6}, negatives {0.8, 0.3, 0.2, 0.1}: 7 of 8 pairs ordered.
  EXPECT_DOUBLE_EQ(*sccal::auc_mann_whitney({0.9, 0.6, 0.8, 0.3, 0.2, 0.1}, {1, 1, 0, 0, 0, 0}), 7.0 / 8.0);
}

TEST(Auc, MatchesPairCountAndSymmetries) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> bucket(0, 9);  // coarse scores force ties
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(t) * 2;
    std::vector<double> s(n), flipped(n), warped(n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = bucket(rng) / 10.0;
      pos[i] = static_cast<std::uint8_t>(i % 2 == 0 ? 1 : bucket(rng) < 3);
      flipped[i] = -s[i];
      warped[i] = std::exp(3.0 * s[i]) - 7.0;
    }
    pos[1] = 0;
    const double a = *sccal::auc_mann_whitney(s, pos);
    EXPECT_NEAR(a, oracle::auc_pairs(s, pos), 1e-12);
    EXPECT_NEAR(*sccal::auc_mann_whitney(warped, pos), a, 1e-12);
    EXPECT_NEAR(*sccal::auc_mann_whitney(flipped, pos), 1.0 - a, 1e-12);
  }
}

TEST(Coherence, ExhaustivePairs) {
  std::mt19937_64 rng(4);
  const sccal::Tensor2D x = oracle::random_tensor(rng, 12, 5, 1.0);
  const auto simi = sccal::cosine_similarity_map(x);
  std::vector<int> labels = {0, 0, 1, 1, 2, sccal::kExcludedPatch, 0, 1, 2, 2, 0, sccal::kExcludedPatch};
  const auto s = sccal::coherence_sample(simi, labels);
  EXPECT_EQ(s.scores.size(), 45u);  // 10 valid patches
  const auto cos = oracle::cosine(oracle::to_matrix(x));
  std::vector<double> scores;
  std::vector<std::uint8_t> same;
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = i + 1; j < 12; ++j) {
      if (labels[i] < 0 || labels[j] < 0) continue;
      scores.push_back(cos[i][j]);
      same.push_back(labels[i] == labels[j]);
    }
  EXPECT_NEAR(*sccal::coherence_auc(simi, labels), oracle::auc_pairs(scores, same), 1e-6);
}

TEST(Coherence, SamplesAboveLimit) {
  std::mt19937_64 rng(5);
  const sccal::Tensor2D x = oracle::random_tensor(rng, 40, 4, 1.0);
  const auto simi = sccal::cosine_similarity_map(x);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[static_cast<std::size_t>(i)] = i % 3;
  sccal::CoherenceOptions opt{30, 2000, 9};
  const auto s = sccal::coherence_sample(simi, labels, opt);
  EXPECT_EQ(s.scores.size(), 2000u);
  EXPECT_EQ(sccal::coherence_sample(simi, labels, opt).scores, s.scores);  // seeded
  const double exhaustive = *sccal::coherence_auc(simi, labels);
  EXPECT_NEAR(*sccal::coherence_auc(simi, labels, opt), exhaustive, 0.05);
}
