#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pixeldino/batches.hpp"
#include "pixeldino/checkpoint.hpp"
#include "pixeldino/config.hpp"
#include "pixeldino/metrics.hpp"
#include "pixeldino/optim.hpp"
#include "pixeldino/params.hpp"

namespace pixeldino {

// Owned by the training thread. The teacher and center are used by PixelDINO
// only; for other methods they stay empty.
struct TrainState {
  UNetConfig model;
  ModelParams student;
  ModelParams teacher;
  std::vector<float> center;
  Adam adam;
  int64_t step = 0;  // completed steps
  double best_iou = -1.0;
};

// Student from init_params(model, seed); teacher is a copy that never
// requires grad; center is zero.
TrainState init_state(const RunConfig& config);

struct LossBreakdown {
  float total = 0.0f;
  float sup = 0.0f;
  float unsup = 0.0f;
  double grad_norm = 0.0;
};

// Optional per-step internals for observers and tests.
struct StepTrace {
  Tensor teacher_logits;            // raw teacher output on the weak view
  Tensor teacher_label;             // centred, sharpened softmax of teacher_logits
  std::vector<float> batch_center;  // mean of teacher_logits over N, H, W
  std::vector<float> center_before;
  Tensor strong_images;
  Tensor strong_labels;  // soft [N,K,H,W] (PixelDINO) or hard [N,H,W] (FixMatchSeg)
  Tensor strong_valid;
};

// softmax((z - center) / tau) over channels of [N,K,H,W] logits (no tape).
Tensor centered_softmax(const Tensor& logits, std::span<const float> center, float tau);

// Teacher forward on the weak view without gradient; optionally returns the
// raw logits.
Tensor teacher_label(const UNetConfig& model, const ModelParams& teacher, const Tensor& weak_images,
                     std::span<const float> center, float tau, Tensor* logits_out = nullptr);

// Mean of [N,K,H,W] logits over N, H and W (double accumulation).
std::vector<float> logits_center(const Tensor& logits);

// Strong view of every weak unlabelled sample with its label transported
// through the same draw. Soft labels are [N,K,H,W]; hard labels are [N,H,W]
// with `keep` [N,H,W] entering as the valid mask.
struct StrongView {
  Tensor images;
  Tensor labels;
  Tensor valid;
};
StrongView strong_view_soft(const UnlabelledBatch& batch, const Tensor& soft_labels);
StrongView strong_view_hard(const UnlabelledBatch& batch, const std::vector<uint8_t>& labels,
                            const std::vector<uint8_t>& keep);

// Foreground iff argmax over channels equals `fg_channel` (first max wins).
std::vector<uint8_t> predict_foreground(const Tensor& logits, int64_t fg_channel);

LossBreakdown supervised_step(TrainState& state, const RunConfig& config, const LabelledBatch& labelled);
LossBreakdown pixeldino_step(TrainState& state, const RunConfig& config, const LabelledBatch& labelled,
                             const UnlabelledBatch& unlabelled, StepTrace* trace = nullptr);
LossBreakdown fixmatchseg_step(TrainState& state, const RunConfig& config, const LabelledBatch& labelled,
                               const UnlabelledBatch& unlabelled, StepTrace* trace = nullptr);
// Dispatches on config.method.
LossBreakdown train_step(TrainState& state, const RunConfig& config, const StepBatch& batch, StepTrace* trace = nullptr);

// Deterministic grid evaluation of the student. `dump`, if given, receives
// per-patch predictions in grid order.
struct PatchPrediction {
  PatchOrigin origin;
  int64_t size = 0;
  std::vector<uint8_t> pred;
  std::vector<uint8_t> truth;
};
MetricsAccumulator evaluate(const UNetConfig& model, const ModelParams& params, const TileStore& store,
                            const Normalization& norm, int64_t patch_size, int64_t batch_size, int64_t fg_channel,
                            std::vector<PatchPrediction>* dump = nullptr);

Checkpoint state_to_checkpoint(const TrainState& state, const RunConfig& config);
TrainState state_from_checkpoint(const Checkpoint& checkpoint, const RunConfig& config);
// Student only, for evaluation.
ModelParams student_from_checkpoint(const Checkpoint& checkpoint);

struct StepEvent {
  int64_t step = 0;  // completed steps, 1-based
  const TrainState* state = nullptr;
  LossBreakdown losses;
  const StepTrace* trace = nullptr;  // null unless TrainOptions::trace
};

struct TrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  // Stops after this many completed steps as if interrupted, without writing
  // the final checkpoint or run manifest. Negative disables.
  int64_t halt_after = -1;
  bool trace = false;
  std::function<void(const StepEvent&)> observer;
  bool progress = false;  // one status line per log row on stderr
};

struct TrainResult {
  TrainState state;
  bool halted = false;
  int64_t timed_steps = 0;
  double mean_step_seconds = 0.0;  // after a 20-step warmup
  std::map<std::string, Metrics> final_eval;
};

inline constexpr int64_t kTimingWarmupSteps = 20;
inline constexpr const char* kMetricsCsvHeader =
    "step,loss_total,loss_sup,loss_unsup,eval_iou,eval_f1,eval_precision,eval_recall";

// Runs the configured method for exactly config.steps steps (or until
// halt_after), writing into out_dir: config.json (byte copy of the input),
// metrics.csv, last.ckpt, best.ckpt, final.ckpt and run_manifest.json.
TrainResult train(const RunConfig& config, const TrainOptions& options);

}  // namespace pixeldino
