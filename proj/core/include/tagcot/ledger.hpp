#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tagcot {

enum class Phase : int { kCacheBuild = 0, kTrain = 1, kValidate = 2, kPredict = 3 };
constexpr int kPhaseCount = 4;

struct LedgerRow {
  int epoch = 0;  // 0 = cache build
  std::uint64_t fresh_encoder_calls = 0;
  std::uint64_t cache_reads = 0;
  double wall_time_ms = 0.0;
  std::size_t peak_batch = 0;
};

// Instrumented counters for the cost accounting: a "fresh encoder call" is
// one full encoder forward pass with current parameters, a cache read is one
// embedding fetched from the frozen store. Counters are monotone within a
// run and reset only between runs.
class CallLedger {
 public:
  void add_fresh(Phase p, std::uint64_t n = 1) { fresh_[idx(p)] += n; }
  void add_cache_read(Phase p, std::uint64_t n = 1) { cache_[idx(p)] += n; }
  void add_aggregation(Phase p, std::uint64_t n = 1) { agg_[idx(p)] += n; }

  std::uint64_t fresh(Phase p) const { return fresh_[idx(p)]; }
  std::uint64_t cache_reads(Phase p) const { return cache_[idx(p)]; }
  std::uint64_t aggregations(Phase p) const { return agg_[idx(p)]; }
  std::uint64_t total_fresh() const;

  void push_row(LedgerRow row) { rows_.push_back(row); }
  const std::vector<LedgerRow>& rows() const { return rows_; }

  // columns: epoch,fresh_encoder_calls,cache_reads,wall_time_ms,peak_batch
  std::string to_csv() const;

  void reset();

 private:
  static std::size_t idx(Phase p) { return static_cast<std::size_t>(p); }
  std::uint64_t fresh_[kPhaseCount] = {};
  std::uint64_t cache_[kPhaseCount] = {};
  std::uint64_t agg_[kPhaseCount] = {};
  std::vector<LedgerRow> rows_;
};

}  // namespace tagcot
