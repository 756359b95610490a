#include "pixeldino/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "pixeldino/errors.hpp"
#include "pixeldino/ops.hpp"
#include "pixeldino/unet.hpp"

#ifndef PIXELDINO_GIT_DESCRIBE
#define PIXELDINO_GIT_DESCRIBE "unknown"
#endif

namespace pixeldino {

using nlohmann::json;
namespace fs = std::filesystem;

TrainState init_state(const RunConfig& config) {
  TrainState s;
  s.model = config.model;
  s.student = init_params(config.model, config.seed);
  s.student.set_requires_grad(true);
  if (config.method == Method::kPixelDino) {
    s.teacher = s.student.clone();
    s.teacher.set_requires_grad(false);
    s.center.assign(static_cast<size_t>(config.model.out_channels), 0.0f);
  }
  s.adam = Adam(s.student);
  return s;
}

Tensor centered_softmax(const Tensor& logits, std::span<const float> center, float tau) {
  if (logits.rank() != 4 || static_cast<int64_t>(center.size()) != logits.dim(1)) {
    throw DimensionError("centered_softmax: center has " + std::to_string(center.size()) + " entries for logits " +
                         shape_str(logits.shape()));
  }
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<float> z(logits.data().begin(), logits.data().end());
  const float inv_tau = 1.0f / tau;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t c = 0; c < k; ++c) {
      float* p = z.data() + (b * k + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = (p[i] - center[static_cast<size_t>(c)]) * inv_tau;
    }
  }
  NoGradScope no_grad;
  return ops::softmax_channel(Tensor::from(logits.shape(), std::move(z)));
}

Tensor teacher_label(const UNetConfig& model, const ModelParams& teacher, const Tensor& weak_images,
                     std::span<const float> center, float tau, Tensor* logits_out) {
  NoGradScope no_grad;
  Tensor logits = unet_forward(model, teacher, weak_images);
  require_finite(logits.data(), "teacher logits");
  if (logits_out) *logits_out = logits;
  return centered_softmax(logits, center, tau);
}

std::vector<float> logits_center(const Tensor& logits) {
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<float> out(static_cast<size_t>(k));
  const auto d = logits.data();
  for (int64_t c = 0; c < k; ++c) {
    double acc = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      const float* p = d.data() + (b * k + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
    }
    out[static_cast<size_t>(c)] = static_cast<float>(acc / static_cast<double>(n * hw));
  }
  return out;
}

namespace {

Tensor stack_soft_labels(const std::vector<AugmentSample>& samples) {
  const auto& f = samples.front();
  std::vector<float> data;
  data.reserve(samples.size() * f.soft_label.size());
  for (const auto& s : samples) data.insert(data.end(), s.soft_label.begin(), s.soft_label.end());
  return Tensor::from({static_cast<int64_t>(samples.size()), f.label_channels, f.height, f.width}, std::move(data));
}

}  // namespace

StrongView strong_view_soft(const UnlabelledBatch& batch, const Tensor& soft_labels) {
  const int64_t n = static_cast<int64_t>(batch.weak.size());
  if (soft_labels.rank() != 4 || soft_labels.dim(0) != n) {
    throw DimensionError("strong_view_soft: labels " + shape_str(soft_labels.shape()) + " for batch of " +
                         std::to_string(n));
  }
  const int64_t k = soft_labels.dim(1), per = k * soft_labels.dim(2) * soft_labels.dim(3);
  std::vector<AugmentSample> out;
  for (int64_t i = 0; i < n; ++i) {
    const AugmentSample& w = batch.weak[static_cast<size_t>(i)];
    const float* lab = soft_labels.data().data() + i * per;
    AugmentSample s = AugmentSample::with_soft(w.channels, w.height, w.width, w.image, k, std::vector<float>(lab, lab + per));
    out.push_back(apply_strong(s, batch.strong[static_cast<size_t>(i)]));
  }
  return {stack_images(out), stack_soft_labels(out), stack_valid(out)};
}

StrongView strong_view_hard(const UnlabelledBatch& batch, const std::vector<uint8_t>& labels,
                            const std::vector<uint8_t>& keep) {
  const auto n = batch.weak.size();
  const int64_t plane = n ? batch.weak.front().plane() : 0;
  if (labels.size() != n * static_cast<size_t>(plane) || keep.size() != labels.size()) {
    throw DimensionError("strong_view_hard: label planes do not match the batch");
  }
  std::vector<AugmentSample> out;
  for (size_t i = 0; i < n; ++i) {
    const AugmentSample& w = batch.weak[i];
    auto first = labels.begin() + static_cast<std::ptrdiff_t>(i) * plane;
    AugmentSample s = AugmentSample::with_hard(w.channels, w.height, w.width, w.image, std::vector<uint8_t>(first, first + plane));
    auto kfirst = keep.begin() + static_cast<std::ptrdiff_t>(i) * plane;
    s.valid.assign(kfirst, kfirst + plane);
    out.push_back(apply_strong(s, batch.strong[i]));
  }
  return {stack_images(out), stack_hard_labels(out), stack_valid(out)};
}

std::vector<uint8_t> predict_foreground(const Tensor& logits, int64_t fg_channel) {
  const int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<uint8_t> out(static_cast<size_t>(n * hw));
  const auto d = logits.data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t i = 0; i < hw; ++i) {
      int64_t best = 0;
      float bv = d[static_cast<size_t>(b * k * hw + i)];
      for (int64_t c = 1; c < k; ++c) {
        const float v = d[static_cast<size_t>((b * k + c) * hw + i)];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[static_cast<size_t>(b * hw + i)] = best == fg_channel ? 1 : 0;
    }
  }
  return out;
}

namespace {

double grad_norm(const ModelParams& params) {
  double acc = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

[[noreturn]] void rethrow_with_diagnostics(const NumericError& e, int64_t step, const LossBreakdown& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, " [step %lld: loss_total=%.9g loss_sup=%.9g loss_unsup=%.9g grad_norm=%.9g]",
                static_cast<long long>(step + 1), l.total, l.sup, l.unsup, l.grad_norm);
  throw NumericError(std::string(e.what()) + buf);
}

// Backward, gradient norm, one Adam step on the student; advances the step.
void apply_update(TrainState& st, const RunConfig& cfg, Tape& tape, const Tensor& loss, LossBreakdown& out) {
  tape.backward(loss);
  out.grad_norm = grad_norm(st.student);
  const float lr = cosine_lr(cfg.optim.lr, cfg.optim.lr_min, st.step, cfg.steps);
  st.adam.step(st.student, lr, cfg.optim);
  st.student.zero_grads();
  ++st.step;
}

int64_t fg_channel(const RunConfig& cfg) { return cfg.pixeldino.rts_channel; }

}  // namespace

LossBreakdown supervised_step(TrainState& st, const RunConfig& cfg, const LabelledBatch& lb) {
  LossBreakdown out;
  try {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      Tensor logits = unet_forward(st.model, st.student, lb.images);
      loss = ops::foreground_cross_entropy(logits, static_cast<int>(fg_channel(cfg)), lb.mask, lb.valid);
    }
    out.sup = out.total = loss.item();
    apply_update(st, cfg, tape, loss, out);
  } catch (const NumericError& e) {
    rethrow_with_diagnostics(e, st.step, out);
  }
  return out;
}

LossBreakdown pixeldino_step(TrainState& st, const RunConfig& cfg, const LabelledBatch& lb, const UnlabelledBatch& ub,
                             StepTrace* trace) {
  if (ub.empty()) throw UsageError("pixeldino_step needs an unlabelled batch");
  if (!st.student.same_structure(st.teacher)) throw UsageError("teacher and student differ in structure");
  const auto& pd = cfg.pixeldino;
  LossBreakdown out;
  try {
    Tape tape;
    Tensor total, t_logits, label;
    StrongView sv;
    {
      TapeScope scope(tape);
      Tensor logits_l = unet_forward(st.model, st.student, lb.images);
      Tensor sup = ops::foreground_cross_entropy(logits_l, static_cast<int>(pd.rts_channel), lb.mask, lb.valid);
      label = teacher_label(st.model, st.teacher, ub.weak_images, st.center, pd.tau, &t_logits);
      sv = strong_view_soft(ub, label);
      Tensor logits_u = unet_forward(st.model, st.student, sv.images);
      Tensor unsup = ops::cross_entropy_soft(ops::softmax_channel(logits_u), sv.labels, sv.valid);
      total = ops::add(sup, ops::mul_scalar(unsup, pd.beta));
      out.sup = sup.item();
      out.unsup = unsup.item();
      out.total = total.item();
    }
    apply_update(st, cfg, tape, total, out);

    ema_blend(st.teacher, st.student, pd.teacher_momentum);
    const std::vector<float> bc = logits_center(t_logits);
    if (trace) {
      trace->center_before = st.center;
      trace->teacher_logits = t_logits;
      trace->teacher_label = label;
      trace->batch_center = bc;
      trace->strong_images = sv.images;
      trace->strong_labels = sv.labels;
      trace->strong_valid = sv.valid;
    }
    const float c = pd.center_momentum;
    for (size_t i = 0; i < st.center.size(); ++i) st.center[i] = c * st.center[i] + (1.0f - c) * bc[i];
    require_finite(st.center, "center");
  } catch (const NumericError& e) {
    rethrow_with_diagnostics(e, st.step, out);
  }
  return out;
}

LossBreakdown fixmatchseg_step(TrainState& st, const RunConfig& cfg, const LabelledBatch& lb, const UnlabelledBatch& ub,
                               StepTrace* trace) {
  if (ub.empty()) throw UsageError("fixmatchseg_step needs an unlabelled batch");
  const int rts = static_cast<int>(cfg.pixeldino.rts_channel);
  const float threshold = cfg.fixmatch.threshold;
  LossBreakdown out;
  try {
    Tape tape;
    Tensor total;
    StrongView sv;
    {
      TapeScope scope(tape);
      Tensor logits_l = unet_forward(st.model, st.student, lb.images);
      Tensor sup = ops::foreground_cross_entropy(logits_l, rts, lb.mask, lb.valid);

      std::vector<uint8_t> pseudo, keep;
      {
        NoGradScope no_grad;
        Tensor logits_w = unet_forward(st.model, st.student, ub.weak_images);
        Tensor prob = ops::softmax_channel(logits_w);
        pseudo = predict_foreground(logits_w, rts);
        const int64_t n = prob.dim(0), k = prob.dim(1), hw = prob.dim(2) * prob.dim(3);
        keep.resize(static_cast<size_t>(n * hw));
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t i = 0; i < hw; ++i) {
            const float pf = prob.data()[static_cast<size_t>((b * k + rts) * hw + i)];
            keep[static_cast<size_t>(b * hw + i)] = std::max(pf, 1.0f - pf) >= threshold ? 1 : 0;
          }
        }
      }
      sv = strong_view_hard(ub, pseudo, keep);
      Tensor logits_s = unet_forward(st.model, st.student, sv.images);
      Tensor unsup = ops::foreground_cross_entropy(logits_s, rts, sv.labels, sv.valid);
      total = ops::add(sup, ops::mul_scalar(unsup, cfg.fixmatch.beta));
      out.sup = sup.item();
      out.unsup = unsup.item();
      out.total = total.item();
    }
    apply_update(st, cfg, tape, total, out);
    if (trace) {
      trace->strong_images = sv.images;
      trace->strong_labels = sv.labels;
      trace->strong_valid = sv.valid;
    }
  } catch (const NumericError& e) {
    rethrow_with_diagnostics(e, st.step, out);
  }
  return out;
}

LossBreakdown train_step(TrainState& st, const RunConfig& cfg, const StepBatch& batch, StepTrace* trace) {
  switch (cfg.method) {
    case Method::kBaseline:
    case Method::kBaselineAug: return supervised_step(st, cfg, batch.labelled);
    case Method::kFixMatchSeg: return fixmatchseg_step(st, cfg, batch.labelled, batch.unlabelled, trace);
    case Method::kPixelDino: return pixeldino_step(st, cfg, batch.labelled, batch.unlabelled, trace);
  }
  throw UsageError("unknown method");
}

MetricsAccumulator evaluate(const UNetConfig& model, const ModelParams& params, const TileStore& store,
                            const Normalization& norm, int64_t patch_size, int64_t batch_size, int64_t fg,
                            std::vector<PatchPrediction>* dump) {
  if (store.channels() != model.in_channels) {
    throw ConfigError("store " + store.dir().string() + " has " + std::to_string(store.channels()) +
                      " channels, model expects " + std::to_string(model.in_channels));
  }
  PatchSpec spec;
  spec.patch_size = patch_size;
  spec.validate(model.spatial_multiple());
  const auto origins = grid_origins(store, spec);
  MetricsAccumulator acc;
  NoGradScope no_grad;
  const int64_t plane = patch_size * patch_size;
  for (size_t first = 0; first < origins.size(); first += static_cast<size_t>(batch_size)) {
    const size_t last = std::min(origins.size(), first + static_cast<size_t>(batch_size));
    std::vector<float> images;
    std::vector<RasterPatch> patches;
    for (size_t i = first; i < last; ++i) {
      const auto& o = origins[i];
      RasterPatch p = crop_patch(store.tiles()[static_cast<size_t>(o.tile_index)], o.tile_index, o.x0, o.y0, patch_size, norm);
      if (p.mask.empty()) throw ConfigError("evaluation store " + store.dir().string() + " has no masks");
      images.insert(images.end(), p.image.begin(), p.image.end());
      p.image.clear();
      patches.push_back(std::move(p));
    }
    const int64_t n = static_cast<int64_t>(patches.size());
    Tensor logits = unet_forward(model, params, Tensor::from({n, model.in_channels, patch_size, patch_size}, std::move(images)));
    const auto pred = predict_foreground(logits, fg);
    for (int64_t b = 0; b < n; ++b) {
      std::span<const uint8_t> pb(pred.data() + b * plane, static_cast<size_t>(plane));
      acc.update(pb, patches[static_cast<size_t>(b)].mask);
      if (dump) {
        dump->push_back({origins[first + static_cast<size_t>(b)], patch_size, std::vector<uint8_t>(pb.begin(), pb.end()),
                         patches[static_cast<size_t>(b)].mask});
      }
    }
  }
  return acc;
}

namespace {

void add_params(Checkpoint& ck, const std::string& prefix, const ModelParams& params) {
  for (const auto& [name, t] : params) {
    ck.arrays.push_back({prefix + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
}

void add_moments(Checkpoint& ck, const std::string& prefix, const ModelParams& params,
                 const std::vector<std::vector<float>>& moments) {
  size_t i = 0;
  for (const auto& [name, t] : params) ck.arrays.push_back({prefix + name, t.shape(), moments.at(i++)});
}

void load_params(const Checkpoint& ck, const std::string& prefix, ModelParams& params) {
  for (auto& [name, t] : params) {
    const NamedArray* a = ck.find(prefix + name);
    if (!a) throw IoError("checkpoint lacks tensor " + prefix + name);
    if (a->shape != t.shape()) throw IoError("checkpoint tensor " + prefix + name + " has shape " + shape_str(a->shape));
    std::copy(a->data.begin(), a->data.end(), t.mutable_data().begin());
  }
}

void load_moments(const Checkpoint& ck, const std::string& prefix, const ModelParams& params,
                  std::vector<std::vector<float>>& moments) {
  size_t i = 0;
  for (const auto& [name, t] : params) {
    const NamedArray* a = ck.find(prefix + name);
    if (!a || a->shape != t.shape()) throw IoError("checkpoint lacks or misshapes " + prefix + name);
    moments.at(i++) = a->data;
  }
}

}  // namespace

Checkpoint state_to_checkpoint(const TrainState& st, const RunConfig& cfg) {
  Checkpoint ck;
  ck.model = st.model;
  ck.step = st.step;
  ck.meta_json = json{{"method", method_name(cfg.method)},
                      {"seed", cfg.seed},
                      {"adam_step", st.adam.step_count()},
                      {"best_iou", st.best_iou},
                      {"rts_channel", cfg.pixeldino.rts_channel}}
                     .dump();
  add_params(ck, "student/", st.student);
  if (st.teacher.size()) add_params(ck, "teacher/", st.teacher);
  add_moments(ck, "adam_m/", st.student, st.adam.first_moments());
  add_moments(ck, "adam_v/", st.student, st.adam.second_moments());
  if (!st.center.empty()) ck.arrays.push_back({"center", {static_cast<int64_t>(st.center.size())}, st.center});
  return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg) {
  if (!(ck.model == cfg.model)) throw ConfigError("checkpoint model config does not match the run config");
  TrainState st = init_state(cfg);
  load_params(ck, "student/", st.student);
  if (st.teacher.size()) load_params(ck, "teacher/", st.teacher);
  load_moments(ck, "adam_m/", st.student, st.adam.first_moments());
  load_moments(ck, "adam_v/", st.student, st.adam.second_moments());
  if (!st.center.empty()) {
    const NamedArray* c = ck.find("center");
    if (!c || c->data.size() != st.center.size()) throw IoError("checkpoint lacks the center vector");
    st.center = c->data;
  }
  const json meta = json::parse(ck.meta_json);
  st.adam.set_step_count(meta.at("adam_step").get<int64_t>());
  st.best_iou = meta.at("best_iou").get<double>();
  st.step = ck.step;
  return st;
}

ModelParams student_from_checkpoint(const Checkpoint& ck) {
  ModelParams p = init_params(ck.model, 0);
  load_params(ck, "student/", p);
  return p;
}

namespace {

std::string iso_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string csv_row(int64_t step, const LossBreakdown& l, const Metrics* m) {
  char buf[256];
  int n = std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,", static_cast<long long>(step), l.total, l.sup, l.unsup);
  if (m) {
    std::snprintf(buf + n, sizeof buf - static_cast<size_t>(n), "%.9g,%.9g,%.9g,%.9g", m->iou, m->f1, m->precision,
                  m->recall);
  } else {
    std::snprintf(buf + n, sizeof buf - static_cast<size_t>(n), ",,,");
  }
  return std::string(buf) + "\n";
}

// Keeps the header and every row whose step is <= `step`.
std::string truncate_csv(const std::string& text, int64_t step) {
  std::istringstream in(text);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= step) out += line + "\n";
  }
  return out;
}

json metrics_json(const Metrics& m) {
  return {{"iou", m.iou},           {"f1", m.f1},
          {"precision", m.precision}, {"recall", m.recall},
          {"undefined", m.any_undefined()}};
}

}  // namespace

TrainResult train(const RunConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  const auto started = std::chrono::system_clock::now();
  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + opt.out_dir.string() + ": " + ec.message());

  const TileStore labelled = TileStore::open(cfg.data.store_path(cfg.data.labelled));
  std::optional<TileStore> unlabelled;
  if (cfg.semi_supervised()) unlabelled = TileStore::open(cfg.data.store_path(cfg.data.unlabelled));
  std::vector<TileStore> evals;
  for (const auto& name : cfg.data.eval) evals.push_back(TileStore::open(cfg.data.store_path(name)));
  if (labelled.channels() != cfg.model.in_channels) {
    throw ConfigError("labelled store has " + std::to_string(labelled.channels()) + " channels, model.in_channels is " +
                      std::to_string(cfg.model.in_channels));
  }
  Normalization norm = labelled.manifest().normalization;
  if (norm.empty()) norm = compute_normalization(labelled.tiles(), "labelled");

  BatchSettings bs;
  bs.patch_size = cfg.data.patch_size;
  bs.batch_size_labelled = cfg.data.batch_size_labelled;
  bs.batch_size_unlabelled = cfg.semi_supervised() ? cfg.data.batch_size_unlabelled : 0;
  bs.augment_labelled = cfg.augments_labelled();
  bs.augment = cfg.augment;
  bs.seed = cfg.seed;
  const BatchSource source(&labelled, unlabelled ? &*unlabelled : nullptr, norm, bs);

  const fs::path config_path = opt.out_dir / "config.json", csv_path = opt.out_dir / "metrics.csv",
                 last_path = opt.out_dir / "last.ckpt", best_path = opt.out_dir / "best.ckpt",
                 final_path = opt.out_dir / "final.ckpt", manifest_path = opt.out_dir / "run_manifest.json";

  TrainResult result;
  TrainState& st = result.state;
  bool resumed = false;
  if (opt.resume && fs::exists(last_path)) {
    if (fs::exists(config_path) && read_file(config_path) != cfg.source_text) {
      throw ConfigError("config differs from the snapshot of the run being resumed in " + opt.out_dir.string());
    }
    st = state_from_checkpoint(read_checkpoint(last_path), cfg);
    write_file_atomic(csv_path, truncate_csv(fs::exists(csv_path) ? read_file(csv_path) : std::string(kMetricsCsvHeader) + "\n", st.step));
    resumed = true;
  } else {
    if (opt.resume) std::cerr << "warning: no checkpoint in " << opt.out_dir.string() << ", starting fresh\n";
    st = init_state(cfg);
    for (const auto& p : {last_path, best_path, final_path, manifest_path}) fs::remove(p, ec);
    write_file_atomic(config_path, cfg.source_text);
    write_file_atomic(csv_path, std::string(kMetricsCsvHeader) + "\n");
  }

  // Checkpoints also carry what standalone evaluation needs.
  const auto snapshot = [&] {
    Checkpoint ck = state_to_checkpoint(st, cfg);
    json meta = json::parse(ck.meta_json);
    meta["patch_size"] = cfg.data.patch_size;
    meta["eval_batch_size"] = cfg.data.eval_batch_size;
    meta["normalization"] = {{"source", norm.source}, {"mean", norm.mean}, {"std", norm.stddev}};
    ck.meta_json = meta.dump();
    return ck;
  };

  std::ofstream csv(csv_path, std::ios::app);
  if (!csv) throw IoError("cannot append to " + csv_path.string());

  std::vector<double> iteration_seconds;
  {
    BatchIterator batches(source, st.step, cfg.steps, cfg.data.prefetch, cfg.data.workers);
    for (;;) {
      const auto t0 = std::chrono::steady_clock::now();
      std::optional<StepBatch> batch = batches.next();
      if (!batch) break;
      StepTrace trace;
      const LossBreakdown losses = train_step(st, cfg, *batch, opt.trace ? &trace : nullptr);
      iteration_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

      const int64_t s = st.step;
      const bool do_eval = s % cfg.eval_interval == 0 || s == cfg.steps;
      std::optional<Metrics> m;
      if (do_eval) {
        m = finalize(evaluate(st.model, st.student, evals.front(), norm, cfg.data.patch_size, cfg.data.eval_batch_size,
                              cfg.pixeldino.rts_channel));
        if (m->iou > st.best_iou) {
          st.best_iou = m->iou;
          write_checkpoint(best_path, snapshot());
        }
      }
      if (do_eval || s % cfg.log_interval == 0) {
        csv << csv_row(s, losses, m ? &*m : nullptr);
        csv.flush();
        if (opt.progress) {
          std::fprintf(stderr, "[%s] step %lld/%lld loss %.4f (sup %.4f unsup %.4f)%s\n", method_name(cfg.method),
                       static_cast<long long>(s), static_cast<long long>(cfg.steps), losses.total, losses.sup,
                       losses.unsup, m ? (" eval_iou " + std::to_string(m->iou)).c_str() : "");
        }
      }
      if (s % cfg.effective_checkpoint_interval() == 0 || s == cfg.steps) {
        write_checkpoint(last_path, snapshot());
      }
      if (opt.observer) opt.observer({s, &st, losses, opt.trace ? &trace : nullptr});
      if (opt.halt_after >= 0 && s >= opt.halt_after && s < cfg.steps) {
        result.halted = true;
        break;
      }
    }
  }
  csv.close();

  const int64_t n = static_cast<int64_t>(iteration_seconds.size());
  if (n > kTimingWarmupSteps) {
    double acc = 0.0;
    for (int64_t i = kTimingWarmupSteps; i < n; ++i) acc += iteration_seconds[static_cast<size_t>(i)];
    result.timed_steps = n - kTimingWarmupSteps;
    result.mean_step_seconds = acc / static_cast<double>(result.timed_steps);
  }
  if (result.halted) return result;

  write_checkpoint(final_path, snapshot());
  json final_eval = json::object();
  if (cfg.steps > 0) {
    for (size_t i = 0; i < evals.size(); ++i) {
      const Metrics m = finalize(evaluate(st.model, st.student, evals[i], norm, cfg.data.patch_size,
                                          cfg.data.eval_batch_size, cfg.pixeldino.rts_channel));
      result.final_eval[cfg.data.eval[i]] = m;
      final_eval[cfg.data.eval[i]] = metrics_json(m);
    }
  }
  json outputs = {{"config", "config.json"}, {"metrics", "metrics.csv"}, {"final_checkpoint", "final.ckpt"}};
  if (fs::exists(last_path)) outputs["last_checkpoint"] = "last.ckpt";
  if (fs::exists(best_path)) outputs["best_checkpoint"] = "best.ckpt";
  json manifest = {{"method", method_name(cfg.method)},
                   {"seed", cfg.seed},
                   {"steps", cfg.steps},
                   {"git_describe", PIXELDINO_GIT_DESCRIBE},
                   {"config_snapshot", cfg.source_text},
                   {"start_time", iso_utc(started)},
                   {"end_time", iso_utc(std::chrono::system_clock::now())},
                   {"resumed", resumed},
                   {"timing",
                    {{"warmup_steps", kTimingWarmupSteps},
                     {"timed_steps", result.timed_steps},
                     {"mean_step_seconds", result.mean_step_seconds}}},
                   {"best_eval_iou", st.best_iou},
                   {"final_eval", final_eval},
                   {"outputs", outputs}};
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
  return result;
}

}  // namespace pixeldino
