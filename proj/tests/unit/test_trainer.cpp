#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "pixeldino/errors.hpp"
#include "pixeldino/ops.hpp"
#include "pixeldino/trainer.hpp"
#include "support.hpp"

namespace pixeldino {
namespace {

// The trainer rounds the product before the sum; the volatile keeps the
// compiler from contracting the expected value into one multiply-add.
float unfused_total(float sup, float unsup, float beta) {
  volatile float scaled = unsup * beta;
  return sup + scaled;
}

namespace fs = std::filesystem;
using testing::TempDir;
using testing::values;

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer");
    testing::generate_tiny(dir_->path(), 17);
    lab_ = new TileStore(TileStore::open(dir_->path() / "labelled"));
    un_ = new TileStore(TileStore::open(dir_->path() / "unlabelled"));
  }
  static void TearDownTestSuite() {
    delete lab_;
    delete un_;
    delete dir_;
  }

  static RunConfig config(const std::string& method, int64_t steps = 20, const std::string& extra = "") {
    return testing::tiny_run(dir_->path(), method, steps, extra);
  }
  static BatchSource source(const RunConfig& cfg) {
    BatchSettings bs;
    bs.patch_size = cfg.data.patch_size;
    bs.batch_size_labelled = cfg.data.batch_size_labelled;
    bs.batch_size_unlabelled = cfg.semi_supervised() ? cfg.data.batch_size_unlabelled : 0;
    bs.augment_labelled = cfg.augments_labelled();
    bs.augment = cfg.augment;
    bs.seed = cfg.seed;
    return BatchSource(lab_, cfg.semi_supervised() ? un_ : nullptr, lab_->manifest().normalization, bs);
  }

  static inline TempDir* dir_ = nullptr;
  static inline TileStore* lab_ = nullptr;
  static inline TileStore* un_ = nullptr;
};

TEST(CenteredSoftmax, ZeroCenterUnitTauIsSoftmax) {
  const Tensor z = Tensor::from({1, 2, 1, 2}, {0.0f, 1.0f, std::log(3.0f), -1.0f});
  const std::vector<float> c{0.0f, 0.0f};
  EXPECT_EQ(values(centered_softmax(z, c, 1.0f)), values(ops::softmax_channel(z)));
  EXPECT_NEAR(centered_softmax(z, c, 1.0f).data()[2], 0.75f, 1e-6f);
}

TEST(CenteredSoftmax, CenterSubtractsPerChannelAndTauSharpens) {
  const Tensor z = Tensor::from({1, 2, 1, 1}, {1.0f, 1.0f});
  const std::vector<float> c{0.0f, std::log(3.0f) * 0.5f};
  const Tensor p = centered_softmax(z, c, 0.5f);
  EXPECT_NEAR(p.data()[0], 0.75f, 1e-6f);
  const Tensor sharp = centered_softmax(Tensor::from({1, 2, 1, 1}, {0.1f, 0.0f}), std::vector<float>{0, 0}, 0.01f);
  EXPECT_GT(sharp.data()[0], 0.99f);
  EXPECT_THROW(centered_softmax(z, std::vector<float>{0.0f}, 1.0f), DimensionError);
}

TEST(CenteredSoftmax, EqualLogitsKGivesUniform) {
  const Tensor p = centered_softmax(Tensor::full({2, 5, 2, 2}, 3.0f), std::vector<float>(5, 1.0f), 0.06f);
  for (float v : p.data()) EXPECT_NEAR(v, 0.2f, 1e-6f);
}

TEST(DistillationLoss, TwoByTwoHandComputedValue) {
  // NCHW planes, per pixel (channel 0, channel 1).
  const Tensor s = Tensor::from({1, 2, 2, 2}, {0.5f, 1.0f, -1.5f, 0.3f, -0.25f, 2.0f, 0.0f, 0.3f});
  const Tensor t = Tensor::from({1, 2, 2, 2}, {2.0f, 0.0f, 0.25f, -2.0f, -1.0f, 0.5f, 0.75f, 1.0f});
  const Tensor target = centered_softmax(t, std::vector<float>{0.0f, 0.0f}, 1.0f);
  EXPECT_NEAR(ops::cross_entropy_soft(ops::softmax_channel(s), target).item(), 0.6435285356722751, 1e-6);
}

TEST(DistillationLoss, PerfectPredictorIsNearZero) {
  const Tensor t = Tensor::from({1, 3, 1, 2}, {4.0f, -1.0f, 0.0f, 2.0f, 1.0f, 0.5f});
  const Tensor target = centered_softmax(t, std::vector<float>(3, 0.0f), 0.01f);
  const Tensor student = Tensor::from({1, 3, 1, 2}, {400.0f, -100.0f, 0.0f, 200.0f, 100.0f, 50.0f});
  EXPECT_LT(ops::cross_entropy_soft(ops::softmax_channel(student), target).item(), 1e-6f);
}

TEST(DistillationLoss, InvalidPixelsDoNotContribute) {
  const Tensor s = Tensor::from({1, 2, 1, 3}, {0.1f, 0.5f, -1.0f, 0.3f, 0.2f, 0.0f});
  const Tensor t1 = Tensor::from({1, 2, 1, 3}, {0.9f, 0.2f, 0.5f, 0.1f, 0.8f, 0.5f});
  const Tensor t2 = Tensor::from({1, 2, 1, 3}, {0.9f, 0.7f, 0.5f, 0.1f, 0.3f, 0.5f});
  const Tensor w = Tensor::from({1, 1, 3}, {1.0f, 0.0f, 1.0f});
  const Tensor p = ops::softmax_channel(s);
  EXPECT_EQ(ops::cross_entropy_soft(p, t1, w).item(), ops::cross_entropy_soft(p, t2, w).item());
  const Tensor w2 = Tensor::from({1, 1, 3}, {1.0f, 1.0f, 1.0f});
  EXPECT_NE(ops::cross_entropy_soft(p, t1, w2).item(), ops::cross_entropy_soft(p, t2, w2).item());
}

TEST(LogitsCenter, MeanOverBatchAndPixels) {
  const Tensor z = Tensor::from({2, 2, 1, 2}, {1, 2, 10, 20, 3, 4, 30, 40});
  EXPECT_EQ(logits_center(z), (std::vector<float>{2.5f, 25.0f}));
}

TEST(PredictForeground, FirstMaximumWins) {
  const Tensor z = Tensor::from({1, 3, 1, 3}, {1, 0, 2, 1, 5, 2, 0, 5, 1});
  EXPECT_EQ(predict_foreground(z, 0), (std::vector<uint8_t>{1, 0, 1}));
  EXPECT_EQ(predict_foreground(z, 1), (std::vector<uint8_t>{0, 1, 0}));
}

TEST_F(TrainerTest, InitialTeacherEqualsStudentAndNeedsNoGrad) {
  const TrainState st = init_state(config("pixeldino"));
  EXPECT_TRUE(st.teacher.bitwise_equal(st.student));
  for (const auto& [n, t] : st.teacher) EXPECT_FALSE(t.requires_grad()) << n;
  EXPECT_EQ(st.center, std::vector<float>(16, 0.0f));
  EXPECT_TRUE(init_state(config("baseline")).teacher.size() == 0);
}

TEST_F(TrainerTest, PixelDinoStepInternals) {
  const RunConfig cfg = config("pixeldino");
  TrainState st = init_state(cfg);
  const BatchSource src = source(cfg);
  for (int64_t step = 0; step < 3; ++step) {
    const StepBatch b = src.make(step);
    const ModelParams teacher_before = st.teacher.clone();
    const std::vector<float> center_before = st.center;
    StepTrace tr;
    const LossBreakdown l = pixeldino_step(st, cfg, b.labelled, b.unlabelled, &tr);
    EXPECT_EQ(st.step, step + 1);
    // Loss decomposition in float, bit for bit.
    EXPECT_EQ(l.total, unfused_total(l.sup, l.unsup, cfg.pixeldino.beta));
    EXPECT_GT(l.unsup, 0.0f);
    for (const auto& [n, t] : st.teacher) ASSERT_FALSE(t.has_grad()) << n;
    // Teacher label is the centred, sharpened softmax of the logged logits.
    EXPECT_EQ(values(tr.teacher_label), values(centered_softmax(tr.teacher_logits, center_before, cfg.pixeldino.tau)));
    EXPECT_EQ(tr.center_before, center_before);
    // EMA after the optimiser step.
    ModelParams expect_teacher = teacher_before.clone();
    ema_blend(expect_teacher, st.student, cfg.pixeldino.teacher_momentum);
    EXPECT_TRUE(st.teacher.bitwise_equal(expect_teacher));
    const std::vector<float> bc = logits_center(tr.teacher_logits);
    EXPECT_EQ(tr.batch_center, bc);
    for (size_t k = 0; k < bc.size(); ++k) {
      const float m = cfg.pixeldino.center_momentum;
      EXPECT_EQ(st.center[k], m * center_before[k] + (1.0f - m) * bc[k]);
    }
    // Soft labels on the strong view stay normalised.
    const int64_t n = tr.strong_labels.dim(0), k = tr.strong_labels.dim(1), hw = tr.strong_labels.dim(2) * tr.strong_labels.dim(3);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < hw; ++p) {
        double s = 0.0;
        for (int64_t c = 0; c < k; ++c) s += tr.strong_labels.data()[static_cast<size_t>((i * k + c) * hw + p)];
        ASSERT_NEAR(s, 1.0, 1e-5);
      }
  }
}

TEST_F(TrainerTest, TeacherMomentumEndpoints) {
  for (float m : {0.0f, 1.0f}) {
    const RunConfig cfg = config("pixeldino", 20, ", \"pixeldino\": {\"teacher_momentum\": " + std::to_string(m) + "}");
    TrainState st = init_state(cfg);
    const ModelParams initial = st.teacher.clone();
    const BatchSource src = source(cfg);
    for (int64_t step = 0; step < 2; ++step) {
      const StepBatch b = src.make(step);
      pixeldino_step(st, cfg, b.labelled, b.unlabelled);
    }
    if (m == 1.0f) EXPECT_TRUE(st.teacher.bitwise_equal(initial));
    else EXPECT_TRUE(st.teacher.bitwise_equal(st.student));
  }
}

TEST_F(TrainerTest, CenterMomentumEndpoints) {
  const RunConfig one = config("pixeldino", 20, ", \"pixeldino\": {\"center_momentum\": 1.0}");
  const RunConfig zero = config("pixeldino", 20, ", \"pixeldino\": {\"center_momentum\": 0.0}");
  TrainState a = init_state(one), b = init_state(zero);
  const StepBatch batch = source(one).make(0);
  StepTrace tr;
  pixeldino_step(a, one, batch.labelled, batch.unlabelled);
  pixeldino_step(b, zero, batch.labelled, batch.unlabelled, &tr);
  EXPECT_EQ(a.center, std::vector<float>(16, 0.0f));
  EXPECT_EQ(b.center, tr.batch_center);
}

TEST_F(TrainerTest, ZeroBetaMatchesSupervisedStepBitwise) {
  const RunConfig pd = config("pixeldino", 20, ", \"pixeldino\": {\"beta\": 0.0}");
  RunConfig sup = config("baseline_aug");
  sup.model = pd.model;
  TrainState a = init_state(pd), b = init_state(sup);
  ASSERT_TRUE(a.student.bitwise_equal(b.student));
  const BatchSource src = source(pd);
  for (int64_t step = 0; step < 3; ++step) {
    const StepBatch batch = src.make(step);
    const LossBreakdown la = pixeldino_step(a, pd, batch.labelled, batch.unlabelled);
    const LossBreakdown lb = supervised_step(b, sup, batch.labelled);
    EXPECT_EQ(la.total, lb.total);
    EXPECT_EQ(la.sup, lb.sup);
  }
  EXPECT_TRUE(a.student.bitwise_equal(b.student));
}

TEST_F(TrainerTest, SupervisedOverfitsFixedBatch) {
  const RunConfig cfg = config("baseline", 200, ", \"optim\": {\"lr\": 0.01, \"lr_min\": 0.01}");
  TrainState st = init_state(cfg);
  const LabelledBatch b = source(cfg).make_labelled(0);
  float first = 0.0f, last = 0.0f;
  for (int i = 0; i < 200; ++i) {
    last = supervised_step(st, cfg, b).total;
    if (i == 0) first = last;
  }
  EXPECT_LT(last, 0.05f) << "first " << first;
  EXPECT_LT(last, first);
}

TEST_F(TrainerTest, BaselineConsumesNoAugmentationDraws) {
  const RunConfig base = config("baseline"), aug = config("baseline_aug");
  const LabelledBatch b = source(base).make_labelled(3);
  const LabelledBatch a = source(aug).make_labelled(3);
  EXPECT_EQ(a.origins, b.origins);
  for (size_t i = 0; i < b.origins.size(); ++i) {
    EXPECT_TRUE(b.params[i].weak.is_identity());
    EXPECT_TRUE(b.params[i].strong.photometric_identity() && b.params[i].strong.geometric_identity());
    const auto& o = b.origins[i];
    const RasterPatch p = crop_patch(lab_->tiles()[static_cast<size_t>(o.tile_index)], o.tile_index, o.x0, o.y0, 16,
                                     lab_->manifest().normalization);
    const size_t per = p.image.size();
    EXPECT_TRUE(std::equal(p.image.begin(), p.image.end(), b.images.data().begin() + static_cast<std::ptrdiff_t>(i * per)));
  }
}

TEST_F(TrainerTest, FixMatchThresholdAboveOneGivesZeroUnsupervisedLoss) {
  const RunConfig cfg = config("fixmatchseg", 20, ", \"fixmatch\": {\"threshold\": 1.5}");
  TrainState st = init_state(cfg);
  const StepBatch b = source(cfg).make(0);
  StepTrace tr;
  const LossBreakdown l = fixmatchseg_step(st, cfg, b.labelled, b.unlabelled, &tr);
  EXPECT_EQ(l.unsup, 0.0f);
  EXPECT_EQ(l.total, l.sup);
  for (float v : tr.strong_valid.data()) EXPECT_EQ(v, 0.0f);
}

TEST_F(TrainerTest, FixMatchZeroThresholdKeepsEveryInDomainPixel) {
  const RunConfig cfg = config("fixmatchseg", 20, ", \"fixmatch\": {\"threshold\": 0.0}");
  TrainState st = init_state(cfg);
  const StepBatch b = source(cfg).make(0);
  StepTrace tr;
  fixmatchseg_step(st, cfg, b.labelled, b.unlabelled, &tr);
  const int64_t plane = 16 * 16;
  for (size_t i = 0; i < b.unlabelled.weak.size(); ++i) {
    const SourceMap m = geometric_source_map(b.unlabelled.strong[i], 16, 16);
    for (int64_t p = 0; p < plane; ++p) {
      const bool expect = b.unlabelled.strong[i].geometric_identity() || m.in_domain[static_cast<size_t>(p)];
      if (!expect) continue;
      ASSERT_EQ(tr.strong_valid.data()[i * plane + static_cast<size_t>(p)], 1.0f);
    }
  }
}

TEST_F(TrainerTest, FixMatchPseudoLabelsFollowStrongGeometry) {
  const RunConfig cfg = config("fixmatchseg");
  TrainState st = init_state(cfg);
  const StepBatch b = source(cfg).make(1);
  Tensor logits;
  {
    NoGradScope ng;
    logits = unet_forward(st.model, st.student, b.unlabelled.weak_images);
  }
  const std::vector<uint8_t> pseudo = predict_foreground(logits, 0);
  std::vector<uint8_t> keep(pseudo.size(), 1);
  for (size_t i = 0; i < keep.size(); i += 3) keep[i] = 0;
  const StrongView sv = strong_view_hard(b.unlabelled, pseudo, keep);
  const int64_t plane = 16 * 16;
  for (size_t i = 0; i < b.unlabelled.weak.size(); ++i) {
    const AugmentSample& w = b.unlabelled.weak[i];
    const auto first = pseudo.begin() + static_cast<std::ptrdiff_t>(i) * plane;
    AugmentSample s = AugmentSample::with_hard(w.channels, w.height, w.width, w.image, std::vector<uint8_t>(first, first + plane));
    s.valid.assign(keep.begin() + static_cast<std::ptrdiff_t>(i) * plane, keep.begin() + static_cast<std::ptrdiff_t>(i + 1) * plane);
    const AugmentSample o = apply_strong(s, b.unlabelled.strong[i]);
    for (int64_t p = 0; p < plane; ++p) {
      const size_t j = i * plane + static_cast<size_t>(p);
      ASSERT_EQ(sv.labels.data()[j], static_cast<float>(o.hard_label[static_cast<size_t>(p)]));
      ASSERT_EQ(sv.valid.data()[j], static_cast<float>(o.valid[static_cast<size_t>(p)]));
    }
  }
}

TEST_F(TrainerTest, NonFiniteInputRaisesNumericErrorWithDiagnostics) {
  const RunConfig cfg = config("baseline");
  TrainState st = init_state(cfg);
  LabelledBatch b = source(cfg).make_labelled(0);
  b.images = b.images.detach();
  b.images.mutable_data()[5] = std::nanf("");
  try {
    supervised_step(st, cfg, b);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("step 1"), std::string::npos) << m;
    EXPECT_NE(m.find("grad_norm"), std::string::npos) << m;
  }
}

TEST_F(TrainerTest, CheckpointRoundTripRestoresFullState) {
  const RunConfig cfg = config("pixeldino");
  TrainState st = init_state(cfg);
  const BatchSource src = source(cfg);
  for (int64_t s = 0; s < 2; ++s) {
    const StepBatch b = src.make(s);
    pixeldino_step(st, cfg, b.labelled, b.unlabelled);
  }
  st.best_iou = 0.125;
  const fs::path path = dir_->path() / "rt.ckpt";
  write_checkpoint(path, state_to_checkpoint(st, cfg));
  const TrainState r = state_from_checkpoint(read_checkpoint(path), cfg);
  EXPECT_TRUE(r.student.bitwise_equal(st.student));
  EXPECT_TRUE(r.teacher.bitwise_equal(st.teacher));
  EXPECT_EQ(r.center, st.center);
  EXPECT_EQ(r.adam.first_moments(), st.adam.first_moments());
  EXPECT_EQ(r.adam.second_moments(), st.adam.second_moments());
  EXPECT_EQ(r.adam.step_count(), 2);
  EXPECT_EQ(r.step, 2);
  EXPECT_EQ(r.best_iou, 0.125);
  EXPECT_TRUE(student_from_checkpoint(read_checkpoint(path)).bitwise_equal(st.student));

  RunConfig other = cfg;
  other.model.base_width = 8;
  EXPECT_THROW(state_from_checkpoint(read_checkpoint(path), other), ConfigError);
}

TEST_F(TrainerTest, CorruptCheckpointRaisesIoError) {
  const RunConfig cfg = config("baseline");
  const fs::path path = dir_->path() / "bad.ckpt";
  write_checkpoint(path, state_to_checkpoint(init_state(cfg), cfg));
  std::string bytes = read_file(path);
  testing::write_text(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_checkpoint(path), IoError);
}

TEST_F(TrainerTest, ZeroStepsWritesFinalCheckpointOnly) {
  TempDir out("train0");
  const RunConfig cfg = config("baseline", 0);
  const TrainResult r = train(cfg, testing::options(out.path()));
  EXPECT_EQ(r.state.step, 0);
  EXPECT_TRUE(fs::exists(out / "final.ckpt"));
  EXPECT_FALSE(fs::exists(out / "last.ckpt"));
  EXPECT_FALSE(fs::exists(out / "best.ckpt"));
  EXPECT_EQ(testing::read_text(out / "metrics.csv"), std::string(kMetricsCsvHeader) + "\n");
  EXPECT_TRUE(read_checkpoint(out / "final.ckpt").find("student/head.weight") != nullptr);
}

TEST_F(TrainerTest, RunDirectoryContents) {
  TempDir out("train_files");
  const RunConfig cfg = config("pixeldino", 8);
  int events = 0;
  TrainOptions opt = testing::options(out.path());
  opt.observer = [&](const StepEvent& e) { EXPECT_EQ(e.step, ++events); };
  const TrainResult r = train(cfg, opt);
  EXPECT_EQ(events, 8);
  for (const char* f : {"config.json", "metrics.csv", "last.ckpt", "best.ckpt", "final.ckpt", "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(testing::read_text(out / "config.json"), cfg.source_text);
  EXPECT_EQ(r.final_eval.size(), 2u);
  const std::string csv = testing::read_text(out / "metrics.csv");
  EXPECT_NE(csv.find("\n2,"), std::string::npos);
  EXPECT_NE(csv.find("\n8,"), std::string::npos);
  const std::string manifest = testing::read_text(out / "run_manifest.json");
  for (const char* key : {"git_describe", "start_time", "end_time", "mean_step_seconds", "config_snapshot"}) {
    EXPECT_NE(manifest.find(key), std::string::npos) << key;
  }
}

TEST_F(TrainerTest, IdenticalRunsWriteIdenticalCsv) {
  TempDir a("det_a"), b("det_b");
  const RunConfig cfg = config("fixmatchseg", 10);
  train(cfg, testing::options(a.path()));
  train(cfg, testing::options(b.path()));
  EXPECT_EQ(testing::read_text(a / "metrics.csv"), testing::read_text(b / "metrics.csv"));
  EXPECT_EQ(read_file(a / "final.ckpt"), read_file(b / "final.ckpt"));
}

TEST_F(TrainerTest, ResumeAfterHaltMatchesUninterruptedRun) {
  TempDir whole("resume_whole"), split("resume_split");
  const RunConfig cfg = config("pixeldino", 12);
  train(cfg, testing::options(whole.path()));
  const TrainResult halted = train(cfg, testing::options(split.path(), false, 6));
  EXPECT_TRUE(halted.halted);
  EXPECT_FALSE(fs::exists(split / "final.ckpt"));
  const TrainResult resumed = train(cfg, testing::options(split.path(), true));
  EXPECT_FALSE(resumed.halted);
  EXPECT_EQ(testing::read_text(whole / "metrics.csv"), testing::read_text(split / "metrics.csv"));
  EXPECT_EQ(read_file(whole / "final.ckpt"), read_file(split / "final.ckpt"));
}

TEST_F(TrainerTest, ResumeWithDifferentConfigRaisesConfigError) {
  TempDir out("resume_cfg");
  train(config("baseline", 8), testing::options(out.path(), false, 4));
  EXPECT_THROW(train(config("baseline", 9), testing::options(out.path(), true)), ConfigError);
}

TEST_F(TrainerTest, ChannelMismatchInEvaluationRaisesConfigError) {
  RunConfig cfg = config("baseline");
  cfg.model.in_channels = 3;
  EXPECT_THROW(evaluate(cfg.model, init_params(cfg.model, 0), *lab_, lab_->manifest().normalization, 16, 4, 0), ConfigError);
}

TEST_F(TrainerTest, EvaluationIsDeterministicAndCoversGrid) {
  const RunConfig cfg = config("baseline");
  const ModelParams p = init_params(cfg.model, 3);
  std::vector<PatchPrediction> dump;
  const MetricsAccumulator a = evaluate(cfg.model, p, *lab_, lab_->manifest().normalization, 16, 3, 0, &dump);
  const MetricsAccumulator b = evaluate(cfg.model, p, *lab_, lab_->manifest().normalization, 16, 5, 0);
  EXPECT_EQ(a.tp(), b.tp());
  EXPECT_EQ(a.fp(), b.fp());
  EXPECT_EQ(a.total(), lab_->size() * 48u * 48u);
  EXPECT_EQ(dump.size(), lab_->size() * 9u);
}

}  // namespace
}  // namespace pixeldino
