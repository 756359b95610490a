#pragma once

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "pixeldino/augment.hpp"
#include "pixeldino/patches.hpp"
#include "pixeldino/tensor.hpp"
#include "pixeldino/tile.hpp"

namespace pixeldino {

struct BatchSettings {
  int64_t patch_size = 192;
  int64_t batch_size_labelled = 8;
  int64_t batch_size_unlabelled = 8;  // 0 leaves the unlabelled store untouched
  bool augment_labelled = true;
  AugmentConfig augment;
  uint64_t seed = 0;
};

// Labelled images after A(alpha(.)) (or raw when augmentation is off), the
// transported mask and the valid mask, as [B,C,P,P], [B,P,P] and [B,P,P].
struct LabelledBatch {
  Tensor images;
  Tensor mask;
  Tensor valid;
  std::vector<PatchOrigin> origins;
  std::vector<AugmentParams> params;
};

// Unlabelled images after the weak view alpha(.) only. The strong parameters
// are pre-drawn here but applied by the trainer, which must transport the
// teacher's label or pseudo-label through the same draw.
struct UnlabelledBatch {
  Tensor weak_images;
  std::vector<AugmentSample> weak;
  std::vector<WeakParams> weak_params;
  std::vector<StrongParams> strong;
  std::vector<PatchOrigin> origins;

  bool empty() const { return weak.empty(); }
};

struct StepBatch {
  int64_t step = 0;
  LabelledBatch labelled;
  UnlabelledBatch unlabelled;
};

// Pure function of (stores, settings, step): every draw uses a random stream
// keyed by (seed, stream, step, sample), so any step can be rebuilt alone.
class BatchSource {
 public:
  // Throws ConfigError if the labelled store is null or empty, or if
  // unlabelled items are requested without an unlabelled store.
  BatchSource(const TileStore* labelled, const TileStore* unlabelled, Normalization norm, BatchSettings settings);

  StepBatch make(int64_t step) const;
  LabelledBatch make_labelled(int64_t step) const;
  UnlabelledBatch make_unlabelled(int64_t step) const;

  const BatchSettings& settings() const { return settings_; }
  const Normalization& normalization() const { return norm_; }

 private:
  const TileStore* labelled_;
  const TileStore* unlabelled_;
  Normalization norm_;
  BatchSettings settings_;
  std::vector<int64_t> labelled_eligible_;
  std::vector<int64_t> unlabelled_eligible_;
};

// Yields batches for steps [first, end) in step order. Workers build batches
// ahead of the consumer, at most `capacity` claimed but unconsumed; workers = 0
// builds each batch on the calling thread.
class BatchIterator {
 public:
  BatchIterator(const BatchSource& source, int64_t first, int64_t end, int64_t capacity = 4, int64_t workers = 1);
  ~BatchIterator();
  BatchIterator(const BatchIterator&) = delete;
  BatchIterator& operator=(const BatchIterator&) = delete;

  // Rethrows any exception raised while building a batch.
  std::optional<StepBatch> next();

 private:
  void worker_loop();

  const BatchSource& source_;
  int64_t next_claim_;
  int64_t next_consume_;
  int64_t end_;
  int64_t capacity_;
  bool inline_ = false;
  std::map<int64_t, StepBatch> ready_;
  std::mutex mu_;
  std::condition_variable produce_cv_;
  std::condition_variable consume_cv_;
  bool stop_ = false;
  std::exception_ptr error_;
  std::vector<std::thread> threads_;
};

// Stacks equally sized samples into [B,C,H,W] images and [B,H,W] planes.
Tensor stack_images(const std::vector<AugmentSample>& samples);
Tensor stack_valid(const std::vector<AugmentSample>& samples);
Tensor stack_hard_labels(const std::vector<AugmentSample>& samples);

}  // namespace pixeldino
