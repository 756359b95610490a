#include "pixeldino/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "pixeldino/errors.hpp"

namespace pixeldino {

void MetricsAccumulator::update(std::span<const uint8_t> pred, std::span<const uint8_t> truth,
                                std::span<const uint8_t> valid) {
  if (pred.size() != truth.size() || pred.size() != valid.size()) {
    throw DimensionError("metrics update: pred/true/valid sizes " + std::to_string(pred.size()) + "/" +
                         std::to_string(truth.size()) + "/" + std::to_string(valid.size()) + " differ");
  }
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    const bool p = pred[i] != 0, t = truth[i] != 0;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
    tn += !p && !t;
  }
  tp_ += tp;
  fp_ += fp;
  fn_ += fn;
  tn_ += tn;
}

void MetricsAccumulator::update(std::span<const uint8_t> pred, std::span<const uint8_t> truth) {
  const std::vector<uint8_t> all(pred.size(), 1);
  update(pred, truth, all);
}

void MetricsAccumulator::merge(const MetricsAccumulator& o) {
  tp_ += o.tp_;
  fp_ += o.fp_;
  fn_ += o.fn_;
  tn_ += o.tn_;
}

MetricsAccumulator MetricsAccumulator::from_counts(uint64_t tp, uint64_t fp, uint64_t fn, uint64_t tn) {
  MetricsAccumulator a;
  a.tp_ = tp;
  a.fp_ = fp;
  a.fn_ = fn;
  a.tn_ = tn;
  return a;
}

namespace {

double ratio(uint64_t num, uint64_t den, bool& undefined) {
  if (den == 0) {
    undefined = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

Metrics finalize(const MetricsAccumulator& a) {
  Metrics m;
  m.iou = ratio(a.tp(), a.tp() + a.fp() + a.fn(), m.undefined_iou);
  m.precision = ratio(a.tp(), a.tp() + a.fp(), m.undefined_precision);
  m.recall = ratio(a.tp(), a.tp() + a.fn(), m.undefined_recall);
  // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); P+R = 0 iff tp = 0.
  if (m.precision + m.recall == 0.0) {
    m.undefined_f1 = true;
    m.f1 = 0.0;
  } else {
    m.f1 = ratio(2 * a.tp(), 2 * a.tp() + a.fp() + a.fn(), m.undefined_f1);
  }
  return m;
}

Aggregate aggregate_runs(std::span<const double> values) {
  if (values.empty()) throw UsageError("aggregate_runs needs at least one run");
  Aggregate g;
  g.runs = static_cast<int64_t>(values.size());
  double s = 0.0;
  for (double v : values) s += v;
  g.mean = s / static_cast<double>(values.size());
  if (values.size() == 1) {
    g.single_run = true;
    return g;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - g.mean) * (v - g.mean);
  g.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return g;
}

namespace {

struct RowStats {
  Aggregate iou, f1, precision, recall;
  bool undefined = false;
};

RowStats row_stats(const ResultRow& r) {
  std::vector<double> iou, f1, p, rc;
  RowStats s;
  for (const auto& m : r.runs) {
    iou.push_back(m.iou);
    f1.push_back(m.f1);
    p.push_back(m.precision);
    rc.push_back(m.recall);
    s.undefined = s.undefined || m.any_undefined();
  }
  s.iou = aggregate_runs(iou);
  s.f1 = aggregate_runs(f1);
  s.precision = aggregate_runs(p);
  s.recall = aggregate_runs(rc);
  return s;
}

std::string fmt(const char* f, double a, double b) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

}  // namespace

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out =
      "method,split,runs,iou_mean,iou_std,f1_mean,f1_std,precision_mean,precision_std,recall_mean,recall_std,flags\n";
  for (const auto& r : rows) {
    const RowStats s = row_stats(r);
    std::string flags;
    if (s.iou.single_run) flags += "single_run";
    if (s.undefined) flags += flags.empty() ? "undefined_ratio" : ";undefined_ratio";
    out += r.method + "," + r.split + "," + std::to_string(s.iou.runs);
    for (const Aggregate* g : {&s.iou, &s.f1, &s.precision, &s.recall}) out += fmt(",%.9g,%.9g", g->mean, g->stddev);
    out += "," + flags + "\n";
  }
  return out;
}

std::string results_table(const std::vector<ResultRow>& rows) {
  std::vector<std::string> methods, splits;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);
  }
  std::map<std::pair<std::string, std::string>, RowStats> cells;
  for (const auto& r : rows) cells[{r.method, r.split}] = row_stats(r);

  const char* names[] = {"IoU", "F1", "Precision", "Recall"};
  size_t mw = 6;
  for (const auto& m : methods) mw = std::max(mw, m.size());
  const size_t cw = 14;
  auto pad = [](std::string s, size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  std::string line1 = std::string(mw, ' '), line2 = pad("Method", mw);
  for (const auto& sp : splits) {
    std::string head = " " + sp;
    const size_t width = 4 * (cw + 1);
    head += std::string(width > head.size() ? width - head.size() : 0, ' ');
    line1 += " |" + head;
    line2 += " |";
    for (const char* n : names) line2 += " " + pad(n, cw);
  }
  std::string out = line1 + "\n" + line2 + "\n" + std::string(line2.size(), '-') + "\n";
  for (const auto& m : methods) {
    std::string line = pad(m, mw);
    for (const auto& sp : splits) {
      line += " |";
      auto it = cells.find({m, sp});
      if (it == cells.end()) {
        for (int i = 0; i < 4; ++i) line += " " + pad("-", cw);
        continue;
      }
      for (const Aggregate* g : {&it->second.iou, &it->second.f1, &it->second.precision, &it->second.recall}) {
        // The two-byte "±" occupies one column, hence the extra pad byte.
        line += " " + pad(fmt("%.1f \xC2\xB1 %.1f", 100.0 * g->mean, 100.0 * g->stddev), cw + 1);
      }
    }
    out += line + "\n";
  }
  return out;
}

}  // namespace pixeldino
