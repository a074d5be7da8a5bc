#pragma once

#include <vector>

#include "tagcot/errors.hpp"

namespace tagcot {

struct ScoredSet {
  std::vector<double> scores;  // in [0, 1]
  std::vector<int> labels;     // binary
};

// Per-class F1 averaged over classes {0, 1}, with the 0/0 := 0 convention.
double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels);

// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
// correctly, ties counting one half. Requires both classes present.
double auroc(const ScoredSet& scored);

// Average-precision step form: sum over score-descending tie blocks of
// (delta recall) x (precision at the block). Requires at least one positive.
double auprc(const ScoredSet& scored);

// score >= 0.5 maps to class 1
std::vector<int> binarize(const std::vector<double>& scores, double threshold = 0.5);

}  // namespace tagcot
