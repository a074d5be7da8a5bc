#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "tagcot/metrics.hpp"
#include "tagcot/rng.hpp"

using namespace tagcot;

namespace {

// Oracle: count concordant pairs directly, ties worth one half.
double auroc_pairwise_oracle(const ScoredSet& s) {
  double num = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (s.labels[i] != 1) continue;
    for (std::size_t j = 0; j < s.labels.size(); ++j) {
      if (s.labels[j] != 0) continue;
      ++pairs;
      if (s.scores[i] > s.scores[j]) {
        num += 1.0;
      } else if (s.scores[i] == s.scores[j]) {
        num += 0.5;
      }
    }
  }
  return num / static_cast<double>(pairs);
}

// Oracle: exhaustive sweep over every distinct score threshold, descending;
// accumulate (delta recall) x precision.
double auprc_sweep_oracle(const ScoredSet& s) {
  std::set<double, std::greater<double>> thresholds(s.scores.begin(), s.scores.end());
  std::size_t n_pos = 0;
  for (int y : s.labels) n_pos += static_cast<std::size_t>(y == 1);
  double ap = 0.0, recall_prev = 0.0;
  for (double th : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      if (s.scores[i] >= th) {
        if (s.labels[i] == 1) {
          ++tp;
        } else {
          ++fp;
        }
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
  }
  return ap;
}

ScoredSet random_set(Rng& rng, std::size_t max_len = 12) {
  while (true) {
    const std::size_t n = 2 + rng.below(max_len - 1);
    ScoredSet s;
    for (std::size_t i = 0; i < n; ++i) {
      // quantized scores so ties actually happen
      s.scores.push_back(static_cast<double>(rng.below(8)) / 8.0);
      s.labels.push_back(static_cast<int>(rng.below(2)));
    }
    const auto pos = std::count(s.labels.begin(), s.labels.end(), 1);
    if (pos > 0 && pos < static_cast<long>(n)) return s;
  }
}

}  // namespace

TEST_CASE("macro_f1 worked examples") {
  CHECK(macro_f1({1, 0, 1, 0}, {1, 0, 1, 0}) == 1.0);
  CHECK(macro_f1({1, 0, 1}, {1, 1, 0}) == doctest::Approx(0.25).epsilon(1e-12));
  // all-ones predictions on balanced labels: class1 F1 = 2/3, class0 F1 = 0
  CHECK(macro_f1({1, 1}, {1, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(macro_f1({}, {}), ContractError);
  CHECK_THROWS_AS(macro_f1({1}, {1, 0}), DimensionError);
}

TEST_CASE("macro_f1 symmetric under simultaneous class relabeling") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto s = random_set(rng);
    auto preds = binarize(s.scores);
    std::vector<int> flipped_preds, flipped_labels;
    for (int p : preds) flipped_preds.push_back(1 - p);
    for (int y : s.labels) flipped_labels.push_back(1 - y);
    CHECK(macro_f1(preds, s.labels) ==
          doctest::Approx(macro_f1(flipped_preds, flipped_labels)).epsilon(1e-12));
  }
}

TEST_CASE("auroc worked examples") {
  CHECK(auroc({{0.9, 0.1}, {1, 0}}) == 1.0);
  CHECK(auroc({{0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}}) == 0.5);
  CHECK(auroc({{0.8, 0.7, 0.6, 0.5}, {1, 0, 1, 0}}) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_THROWS_AS(auroc({{0.5, 0.6}, {1, 1}}), ContractError);
}

TEST_CASE("auprc worked examples") {
  CHECK(auprc({{0.9, 0.1}, {1, 0}}) == 1.0);
  CHECK(auprc({{0.9, 0.1}, {0, 1}}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(auprc({{0.5, 0.6}, {0, 0}}), ContractError);
}

TEST_CASE("auroc equals pairwise oracle on random sets") {
  Rng rng(17);
  for (int t = 0; t < 1000; ++t) {
    auto s = random_set(rng);
    CHECK(auroc(s) == doctest::Approx(auroc_pairwise_oracle(s)).epsilon(1e-12));
  }
}

TEST_CASE("auprc equals exhaustive threshold-sweep oracle on random sets") {
  Rng rng(19);
  for (int t = 0; t < 1000; ++t) {
    auto s = random_set(rng);
    CHECK(auprc(s) == doctest::Approx(auprc_sweep_oracle(s)).epsilon(1e-12));
  }
}

TEST_CASE("auroc invariant under strictly increasing transforms") {
  Rng rng(23);
  for (int t = 0; t < 100; ++t) {
    auto s = random_set(rng);
    ScoredSet mapped = s;
    for (auto& x : mapped.scores) x = 1.0 / (1.0 + std::exp(-(3.0 * x + 0.5)));
    CHECK(auroc(s) == doctest::Approx(auroc(mapped)).epsilon(1e-12));
  }
}

TEST_CASE("auroc flip complement for tie-free scores") {
  Rng rng(29);
  for (int t = 0; t < 100; ++t) {
    ScoredSet s;
    for (int i = 0; i < 10; ++i) {
      s.scores.push_back(rng.real01());
      s.labels.push_back(i < 5 ? 1 : 0);
    }
    ScoredSet flipped = s;
    for (auto& y : flipped.labels) y = 1 - y;
    CHECK(auroc(s) + auroc(flipped) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("auprc endpoints: perfect ranker 1.0, all-equal scores = prevalence") {
  ScoredSet perfect{{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}};
  CHECK(auprc(perfect) == 1.0);
  ScoredSet flat{{0.4, 0.4, 0.4, 0.4, 0.4}, {1, 0, 0, 1, 0}};
  CHECK(auprc(flat) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("binarize thresholds at one half") {
  auto preds = binarize({0.49, 0.5, 0.51});
  CHECK(preds == std::vector<int>{0, 1, 1});
}
