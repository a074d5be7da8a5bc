#include "tagcot/metrics.hpp"

#include <algorithm>
#include <numeric>

namespace tagcot {

namespace {

void check_scored(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size()) {
    throw DimensionError("scored set: scores and labels differ in length");
  }
  if (s.scores.empty()) throw ContractError("scored set is empty");
}

}  // namespace

double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("macro_f1: predictions and labels differ in length");
  }
  if (predictions.empty()) throw ContractError("macro_f1: empty input");

  double f1_sum = 0.0;
  for (int cls = 0; cls <= 1; ++cls) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool pred_c = predictions[i] == cls;
      const bool true_c = labels[i] == cls;
      if (pred_c && true_c) ++tp;
      if (pred_c && !true_c) ++fp;
      if (!pred_c && true_c) ++fn;
    }
    const double precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    const double recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    const double f1 =
        (precision + recall) == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    f1_sum += f1;
  }
  return f1_sum / 2.0;
}

double auroc(const ScoredSet& scored) {
  check_scored(scored);
  const std::size_t n = scored.labels.size();
  std::size_t n_pos = 0;
  for (int y : scored.labels) n_pos += static_cast<std::size_t>(y == 1);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractError("auroc undefined: both classes must be present");
  }

  // rank-sum with average ranks for ties; equals the pairwise count with
  // ties weighted one half
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scored.scores[a] < scored.scores[b];
  });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scored.scores[order[j]] == scored.scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (scored.labels[order[k]] == 1) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double auprc(const ScoredSet& scored) {
  check_scored(scored);
  const std::size_t n = scored.labels.size();
  std::size_t n_pos = 0;
  for (int y : scored.labels) n_pos += static_cast<std::size_t>(y == 1);
  if (n_pos == 0) throw ContractError("auprc undefined: no positives present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scored.scores[a] > scored.scores[b];
  });

  double ap = 0.0;
  double recall_prev = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scored.scores[order[j]] == scored.scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (scored.labels[order[k]] == 1) {
        ++tp;
      } else {
        ++fp;
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return ap;
}

std::vector<int> binarize(const std::vector<double>& scores, double threshold) {
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1 : 0;
  return out;
}

}  // namespace tagcot
