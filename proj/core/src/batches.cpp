#include "pixeldino/batches.hpp"

#include <algorithm>

#include "pixeldino/errors.hpp"

namespace pixeldino {

namespace {

void require_same_dims(const std::vector<AugmentSample>& samples) {
  if (samples.empty()) throw DimensionError("cannot stack an empty batch");
  for (const auto& s : samples) {
    if (s.channels != samples[0].channels || s.height != samples[0].height || s.width != samples[0].width) {
      throw DimensionError("batch samples differ in shape");
    }
  }
}

}  // namespace

Tensor stack_images(const std::vector<AugmentSample>& samples) {
  require_same_dims(samples);
  const auto& f = samples.front();
  std::vector<float> data;
  data.reserve(samples.size() * f.image.size());
  for (const auto& s : samples) data.insert(data.end(), s.image.begin(), s.image.end());
  return Tensor::from({static_cast<int64_t>(samples.size()), f.channels, f.height, f.width}, std::move(data));
}

Tensor stack_valid(const std::vector<AugmentSample>& samples) {
  require_same_dims(samples);
  const auto& f = samples.front();
  std::vector<float> data;
  data.reserve(samples.size() * static_cast<size_t>(f.plane()));
  for (const auto& s : samples) {
    for (uint8_t v : s.valid) data.push_back(v ? 1.0f : 0.0f);
  }
  return Tensor::from({static_cast<int64_t>(samples.size()), f.height, f.width}, std::move(data));
}

Tensor stack_hard_labels(const std::vector<AugmentSample>& samples) {
  require_same_dims(samples);
  const auto& f = samples.front();
  std::vector<float> data;
  data.reserve(samples.size() * static_cast<size_t>(f.plane()));
  for (const auto& s : samples) {
    if (s.label_kind != LabelKind::kHard) throw UsageError("stack_hard_labels: sample has no hard label");
    for (uint8_t v : s.hard_label) data.push_back(v ? 1.0f : 0.0f);
  }
  return Tensor::from({static_cast<int64_t>(samples.size()), f.height, f.width}, std::move(data));
}

BatchSource::BatchSource(const TileStore* labelled, const TileStore* unlabelled, Normalization norm,
                         BatchSettings settings)
    : labelled_(labelled), unlabelled_(unlabelled), norm_(std::move(norm)), settings_(std::move(settings)) {
  if (labelled_ == nullptr || labelled_->empty()) throw ConfigError("labelled store is empty");
  if (settings_.batch_size_labelled < 1) throw ConfigError("batch_size_labelled must be >= 1");
  for (const auto& t : labelled_->tiles()) {
    if (!t.has_mask()) throw ConfigError("labelled store contains unlabelled tile " + t.id);
  }
  labelled_eligible_ = eligible_tiles(*labelled_, settings_.patch_size);
  if (labelled_eligible_.empty()) throw ConfigError("labelled store has no tile large enough for the patch size");
  if (settings_.batch_size_unlabelled > 0) {
    if (unlabelled_ == nullptr || unlabelled_->empty()) throw ConfigError("unlabelled store is empty");
    if (unlabelled_->manifest().provenance == "labelled" || labelled_->manifest().provenance != "labelled") {
      throw ConfigError("labelled and unlabelled stores must have distinct provenance");
    }
    if (std::filesystem::equivalent(labelled_->dir(), unlabelled_->dir())) {
      throw ConfigError("labelled and unlabelled stores must be distinct directories");
    }
    unlabelled_eligible_ = eligible_tiles(*unlabelled_, settings_.patch_size);
    if (unlabelled_eligible_.empty()) throw ConfigError("unlabelled store has no tile large enough for the patch size");
  }
}

LabelledBatch BatchSource::make_labelled(int64_t step) const {
  const auto s = static_cast<uint64_t>(step);
  Rng draw = make_rng(settings_.seed, Stream::kLabelledDraw, {s});
  LabelledBatch b;
  std::vector<AugmentSample> samples;
  for (int64_t i = 0; i < settings_.batch_size_labelled; ++i) {
    const PatchOrigin o = random_origin(draw, *labelled_, labelled_eligible_, settings_.patch_size);
    RasterPatch p = crop_patch(labelled_->tiles()[static_cast<size_t>(o.tile_index)], o.tile_index, o.x0, o.y0,
                               settings_.patch_size, norm_);
    AugmentSample sample = AugmentSample::with_hard(p.channels, p.size, p.size, std::move(p.image), std::move(p.mask));
    if (settings_.augment_labelled) {
      Rng aug = make_rng(settings_.seed, Stream::kLabelledAugment, {s, static_cast<uint64_t>(i)});
      auto [out, params] = chain(sample, aug, settings_.augment);
      sample = std::move(out);
      b.params.push_back(params);
    } else {
      b.params.push_back({});
    }
    b.origins.push_back(o);
    samples.push_back(std::move(sample));
  }
  b.images = stack_images(samples);
  b.mask = stack_hard_labels(samples);
  b.valid = stack_valid(samples);
  return b;
}

UnlabelledBatch BatchSource::make_unlabelled(int64_t step) const {
  UnlabelledBatch b;
  if (settings_.batch_size_unlabelled == 0) return b;
  const auto s = static_cast<uint64_t>(step);
  Rng draw = make_rng(settings_.seed, Stream::kUnlabelledDraw, {s});
  for (int64_t i = 0; i < settings_.batch_size_unlabelled; ++i) {
    const PatchOrigin o = random_origin(draw, *unlabelled_, unlabelled_eligible_, settings_.patch_size);
    RasterPatch p = crop_patch(unlabelled_->tiles()[static_cast<size_t>(o.tile_index)], o.tile_index, o.x0, o.y0,
                               settings_.patch_size, norm_);
    AugmentSample sample = AugmentSample::image_only(p.channels, p.size, p.size, std::move(p.image));
    // Same draw order as chain(): weak, then strong on the weak view's dims.
    Rng aug = make_rng(settings_.seed, Stream::kUnlabelledAugment, {s, static_cast<uint64_t>(i)});
    const WeakParams wp = sample_weak(aug, settings_.augment);
    AugmentSample weak = apply_weak(sample, wp);
    b.strong.push_back(sample_strong(aug, settings_.augment, weak.height, weak.width));
    b.weak_params.push_back(wp);
    b.weak.push_back(std::move(weak));
    b.origins.push_back(o);
  }
  b.weak_images = stack_images(b.weak);
  return b;
}

StepBatch BatchSource::make(int64_t step) const {
  StepBatch b;
  b.step = step;
  b.labelled = make_labelled(step);
  b.unlabelled = make_unlabelled(step);
  return b;
}

BatchIterator::BatchIterator(const BatchSource& source, int64_t first, int64_t end, int64_t capacity, int64_t workers)
    : source_(source), next_claim_(first), next_consume_(first), end_(end), capacity_(std::max<int64_t>(1, capacity)) {
  inline_ = workers <= 0;
  if (!inline_) {
    for (int64_t i = 0; i < workers; ++i) threads_.emplace_back([this] { worker_loop(); });
  }
}

BatchIterator::~BatchIterator() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  produce_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void BatchIterator::worker_loop() {
  for (;;) {
    int64_t step = 0;
    {
      std::unique_lock<std::mutex> lock(mu_);
      produce_cv_.wait(lock, [&] {
        return stop_ || error_ || next_claim_ >= end_ || next_claim_ < next_consume_ + capacity_;
      });
      if (stop_ || error_ || next_claim_ >= end_) return;
      step = next_claim_++;
    }
    try {
      StepBatch batch = source_.make(step);
      std::lock_guard<std::mutex> lock(mu_);
      ready_.emplace(step, std::move(batch));
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu_);
      if (!error_) error_ = std::current_exception();
    }
    consume_cv_.notify_all();
  }
}

std::optional<StepBatch> BatchIterator::next() {
  if (inline_) {
    if (next_consume_ >= end_) return std::nullopt;
    return source_.make(next_consume_++);
  }
  std::unique_lock<std::mutex> lock(mu_);
  if (next_consume_ >= end_) return std::nullopt;
  consume_cv_.wait(lock, [&] { return error_ || ready_.count(next_consume_) > 0; });
  if (ready_.count(next_consume_) == 0) std::rethrow_exception(error_);
  auto node = ready_.extract(next_consume_);
  ++next_consume_;
  lock.unlock();
  produce_cv_.notify_all();
  return std::move(node.mapped());
}

}  // namespace pixeldino
