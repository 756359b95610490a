#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pixeldino {

// Foreground-class pixel confusion counters, micro-averaged over everything
// passed to update().
class MetricsAccumulator {
 public:
  // Counts pixels where valid != 0. All three spans must have equal length;
  // nonzero means foreground/valid. Throws DimensionError otherwise.
  void update(std::span<const uint8_t> pred, std::span<const uint8_t> truth, std::span<const uint8_t> valid);
  void update(std::span<const uint8_t> pred, std::span<const uint8_t> truth);
  void merge(const MetricsAccumulator& other);

  uint64_t tp() const { return tp_; }
  uint64_t fp() const { return fp_; }
  uint64_t fn() const { return fn_; }
  uint64_t tn() const { return tn_; }
  uint64_t total() const { return tp_ + fp_ + fn_ + tn_; }

  static MetricsAccumulator from_counts(uint64_t tp, uint64_t fp, uint64_t fn, uint64_t tn);

 private:
  uint64_t tp_ = 0;
  uint64_t fp_ = 0;
  uint64_t fn_ = 0;
  uint64_t tn_ = 0;
};

// 0/0 ratios are reported as 0 with the matching undefined_* flag set.
struct Metrics {
  double iou = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  bool undefined_iou = false;
  bool undefined_f1 = false;
  bool undefined_precision = false;
  bool undefined_recall = false;

  bool any_undefined() const { return undefined_iou || undefined_f1 || undefined_precision || undefined_recall; }
};

Metrics finalize(const MetricsAccumulator& acc);

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample std, n - 1 denominator
  int64_t runs = 0;
  bool single_run = false;  // std reported as 0
};

// Throws UsageError on an empty list.
Aggregate aggregate_runs(std::span<const double> values);

// One row of a results table: a method evaluated on a split, possibly over
// several seeds.
struct ResultRow {
  std::string method;
  std::string split;
  std::vector<Metrics> runs;
};

// CSV: method,split,runs,iou_mean,iou_std,f1_mean,...,recall_std,flags
std::string results_csv(const std::vector<ResultRow>& rows);
// Aligned text table, one column group per split and one row per method,
// cells "mean ± std" in percent.
std::string results_table(const std::vector<ResultRow>& rows);

}  // namespace pixeldino
