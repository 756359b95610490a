#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pixeldino/augment.hpp"
#include "pixeldino/errors.hpp"

namespace pixeldino {
namespace {

constexpr int64_t kSize = 24;

AugmentSample random_hard_sample(uint64_t seed, int64_t channels = 3, int64_t h = kSize, int64_t w = kSize) {
  Rng rng = make_rng(seed, Stream::kHeldOut);
  std::vector<float> img(static_cast<size_t>(channels * h * w));
  for (float& v : img) v = static_cast<float>(normal(rng, 0.0, 1.0));
  std::vector<uint8_t> lab(static_cast<size_t>(h * w));
  for (auto& v : lab) v = bernoulli(rng, 0.2) ? 1 : 0;
  return AugmentSample::with_hard(channels, h, w, std::move(img), std::move(lab));
}

AugmentSample random_soft_sample(uint64_t seed, int64_t k = 3) {
  Rng rng = make_rng(seed, Stream::kHeldOut);
  const int64_t plane = kSize * kSize;
  std::vector<float> img(static_cast<size_t>(2 * plane));
  for (float& v : img) v = static_cast<float>(uniform(rng, -1.0, 1.0));
  std::vector<float> lab(static_cast<size_t>(k * plane));
  for (int64_t i = 0; i < plane; ++i) {
    double t = 0.0;
    for (int64_t c = 0; c < k; ++c) t += lab[static_cast<size_t>(c * plane + i)] = static_cast<float>(uniform(rng, 0.01, 1.0));
    for (int64_t c = 0; c < k; ++c) lab[static_cast<size_t>(c * plane + i)] /= static_cast<float>(t);
  }
  return AugmentSample::with_soft(2, kSize, kSize, std::move(img), k, std::move(lab));
}

StrongParams geometric_only(double angle, double warp, uint64_t warp_seed = 5) {
  StrongParams p;
  p.angle_deg = angle;
  p.warp_magnitude = warp;
  p.warp_seed = warp_seed;
  return p;
}

int64_t count(const std::vector<uint8_t>& v) { return std::accumulate(v.begin(), v.end(), int64_t{0}); }

TEST(WeakAugment, InverseRestoresEverySampleBitwise) {
  const AugmentSample s = random_hard_sample(1);
  for (int q = 0; q < 4; ++q) {
    for (int f = 0; f < 4; ++f) {
      const WeakParams p{(f & 1) != 0, (f & 2) != 0, q};
      const AugmentSample back = invert_weak(apply_weak(s, p), p);
      EXPECT_EQ(back.image, s.image);
      EXPECT_EQ(back.hard_label, s.hard_label);
    }
  }
}

TEST(WeakAugment, InverseOnNonSquareSoftSample) {
  Rng rng = make_rng(2, Stream::kHeldOut);
  std::vector<float> img(2 * 6 * 10), lab(2 * 6 * 10);
  for (float& v : img) v = static_cast<float>(normal(rng, 0, 1));
  for (float& v : lab) v = static_cast<float>(uniform(rng, 0, 1));
  const AugmentSample s = AugmentSample::with_soft(2, 6, 10, img, 2, lab);
  const WeakParams p{true, false, 1};
  const AugmentSample a = apply_weak(s, p);
  EXPECT_EQ(a.height, 10);
  EXPECT_EQ(a.width, 6);
  const AugmentSample back = invert_weak(a, p);
  EXPECT_EQ(back.image, img);
  EXPECT_EQ(back.soft_label, lab);
}

TEST(WeakAugment, FourQuarterTurnsAreIdentity) {
  const AugmentSample s = random_hard_sample(3);
  AugmentSample r = s;
  for (int i = 0; i < 4; ++i) r = apply_weak(r, WeakParams{false, false, 1});
  EXPECT_EQ(r.image, s.image);
  EXPECT_EQ(r.hard_label, s.hard_label);
}

TEST(WeakAugment, QuarterTurnIsCounterClockwise) {
  // 2x2 image [a b; c d] turned counter-clockwise is [b d; a c].
  const AugmentSample s = AugmentSample::image_only(1, 2, 2, {1, 2, 3, 4});
  EXPECT_EQ(apply_weak(s, WeakParams{false, false, 1}).image, (std::vector<float>{2, 4, 1, 3}));
}

TEST(WeakAugment, PreservesForegroundCount) {
  const AugmentSample s = random_hard_sample(4);
  Rng rng = make_rng(4, Stream::kLabelledAugment);
  for (int i = 0; i < 50; ++i) {
    const auto [out, p] = weak_augment(s, rng, AugmentConfig{});
    EXPECT_EQ(count(out.hard_label), count(s.hard_label));
    EXPECT_EQ(count(out.valid), kSize * kSize);
  }
}

TEST(StrongAugment, IdentityParametersAreIdentity) {
  const AugmentSample s = random_hard_sample(5);
  const AugmentSample out = apply_strong(s, StrongParams{});
  EXPECT_EQ(out.image, s.image);
  EXPECT_EQ(out.hard_label, s.hard_label);
  EXPECT_EQ(out.valid, s.valid);
}

TEST(StrongAugment, QuarterRotationOfSquareMatchesIndexPermutation) {
  const AugmentSample s = random_hard_sample(6, 1);
  const AugmentSample out = apply_strong(s, geometric_only(90.0, 0.0));
  for (int64_t y = 0; y < kSize; ++y) {
    for (int64_t x = 0; x < kSize; ++x) {
      const size_t o = static_cast<size_t>(y * kSize + x);
      const size_t i = static_cast<size_t>((kSize - 1 - x) * kSize + y);
      ASSERT_NEAR(out.image[o], s.image[i], 1e-5f);
      ASSERT_EQ(out.hard_label[o], s.hard_label[i]);
      ASSERT_EQ(out.valid[o], 1);
    }
  }
}

TEST(StrongAugment, ConstantImageStaysConstantUnderRotation) {
  const AugmentSample s = AugmentSample::image_only(2, kSize, kSize, std::vector<float>(2 * kSize * kSize, 0.7f));
  const AugmentSample out = apply_strong(s, geometric_only(33.0, 4.0));
  for (float v : out.image) EXPECT_NEAR(v, 0.7f, 1e-6f);
}

TEST(StrongAugment, SoftLabelsStayNormalised) {
  const AugmentSample s = random_soft_sample(7);
  Rng rng = make_rng(7, Stream::kUnlabelledAugment);
  const int64_t plane = kSize * kSize;
  for (int draw = 0; draw < 40; ++draw) {
    const auto [out, p] = strong_augment(s, rng, AugmentConfig{});
    for (int64_t i = 0; i < plane; ++i) {
      double t = 0.0;
      for (int64_t c = 0; c < 3; ++c) t += out.soft_label[static_cast<size_t>(c * plane + i)];
      ASSERT_NEAR(t, 1.0, 1e-5);
    }
  }
}

TEST(StrongAugment, SameSeedIsDeterministic) {
  const AugmentSample s = random_hard_sample(8);
  Rng a = make_rng(8, Stream::kUnlabelledAugment), b = make_rng(8, Stream::kUnlabelledAugment);
  for (int i = 0; i < 10; ++i) {
    const auto [x, px] = chain(s, a, AugmentConfig{});
    const auto [y, py] = chain(s, b, AugmentConfig{});
    EXPECT_EQ(x.image, y.image);
    EXPECT_EQ(x.hard_label, y.hard_label);
    EXPECT_EQ(x.valid, y.valid);
  }
}

TEST(StrongAugment, SampledDrawsKeepMinimumValidCoverage) {
  const AugmentConfig cfg;
  Rng rng = make_rng(9, Stream::kUnlabelledAugment);
  int geometric = 0;
  for (int i = 0; i < 1000; ++i) {
    const StrongParams p = sample_strong(rng, cfg, 32, 32);
    if (p.geometric_identity()) continue;
    ++geometric;
    ASSERT_GE(geometric_source_map(p, 32, 32).in_domain_fraction(), cfg.min_valid_fraction);
  }
  EXPECT_GT(geometric, 500);
}

TEST(StrongAugment, AppliedValidMaskMatchesCoverage) {
  const AugmentConfig cfg;
  const AugmentSample s = random_hard_sample(10, 1, 32, 32);
  Rng rng = make_rng(10, Stream::kUnlabelledAugment);
  for (int i = 0; i < 100; ++i) {
    const auto [out, p] = strong_augment(s, rng, cfg);
    EXPECT_GE(out.valid_fraction(), cfg.min_valid_fraction - 0.02);
  }
}

// A coordinate grid pushed through the image path tells where each output
// pixel samples from; soft and hard labels must follow the same map.
TEST(StrongAugment, LabelsTransportWithImageCoordinates) {
  const int64_t n = 32, plane = n * n;
  std::vector<float> grid(static_cast<size_t>(2 * plane)), soft(static_cast<size_t>(2 * plane));
  std::vector<uint8_t> hard(static_cast<size_t>(plane));
  for (int64_t y = 0; y < n; ++y) {
    for (int64_t x = 0; x < n; ++x) {
      const size_t i = static_cast<size_t>(y * n + x);
      grid[i] = static_cast<float>(x);
      grid[static_cast<size_t>(plane) + i] = static_cast<float>(y);
      const float u = static_cast<float>(x) / static_cast<float>(n - 1);
      soft[i] = u;
      soft[static_cast<size_t>(plane) + i] = 1.0f - u;
      hard[i] = (x + 2 * y) % 7 < 3 ? 1 : 0;
    }
  }
  const AugmentSample soft_s = AugmentSample::with_soft(2, n, n, grid, 2, soft);
  const AugmentSample hard_s = AugmentSample::with_hard(2, n, n, grid, hard);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const StrongParams p = geometric_only(-150.0 + 31.0 * static_cast<double>(seed), 0.6 * static_cast<double>(seed), seed);
    const AugmentSample a = apply_strong(soft_s, p);
    const AugmentSample b = apply_strong(hard_s, p);
    int64_t checked = 0;
    for (int64_t i = 0; i < plane; ++i) {
      const size_t ui = static_cast<size_t>(i);
      ASSERT_EQ(a.valid[ui], b.valid[ui]);
      if (!a.valid[ui]) continue;
      const double sx = a.image[ui], sy = a.image[static_cast<size_t>(plane) + ui];
      ASSERT_NEAR(a.soft_label[ui], sx / static_cast<double>(n - 1), 1e-4);
      const double rx = std::round(sx), ry = std::round(sy);
      if (std::abs(std::abs(sx - rx) - 0.5) < 1e-3 || std::abs(std::abs(sy - ry) - 0.5) < 1e-3) continue;
      const int64_t ix = static_cast<int64_t>(rx), iy = static_cast<int64_t>(ry);
      ASSERT_EQ(b.hard_label[ui], hard[static_cast<size_t>(iy * n + ix)]) << "seed " << seed << " pixel " << i;
      ++checked;
    }
    EXPECT_GT(checked, plane / 3);
  }
}

TEST(StrongAugment, PhotometricAndBlurNeverTouchLabels) {
  const AugmentSample hs = random_hard_sample(11);
  const AugmentSample ss = random_soft_sample(11);
  StrongParams p;
  p.brightness = 0.15;
  p.gamma = 1.3;
  p.contrast = 0.8;
  p.blur_sigma = 1.2;
  const AugmentSample h = apply_strong(hs, p);
  const AugmentSample s = apply_strong(ss, p);
  EXPECT_EQ(h.hard_label, hs.hard_label);
  EXPECT_EQ(h.valid, hs.valid);
  EXPECT_EQ(s.soft_label, ss.soft_label);
  EXPECT_NE(h.image, hs.image);
}

TEST(StrongAugment, OutputsStayFinite) {
  const AugmentSample s = random_hard_sample(12);
  AugmentConfig cfg;
  cfg.brightness_prob = cfg.gamma_prob = cfg.contrast_prob = cfg.blur_prob = 1.0;
  Rng rng = make_rng(12, Stream::kUnlabelledAugment);
  for (int i = 0; i < 100; ++i) {
    const auto [out, p] = chain(s, rng, cfg);
    for (float v : out.image) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Photometric, BrightnessShiftsWithinChannelRange) {
  std::vector<float> img{0.0f, 1.0f, 2.0f, 4.0f};
  StrongParams p;
  p.brightness = 0.25;
  apply_photometric(img, 1, 4, p);
  EXPECT_NEAR(img[0], 1.0f, 1e-6f);
  EXPECT_NEAR(img[3], 5.0f, 1e-6f);
}

TEST(Photometric, ConstantChannelIsLeftAlone) {
  std::vector<float> img(16, 3.0f);
  StrongParams p;
  p.gamma = 0.5;
  p.contrast = 1.2;
  apply_photometric(img, 1, 16, p);
  for (float v : img) EXPECT_EQ(v, 3.0f);
}

TEST(Blur, PreservesConstantPlane) {
  std::vector<float> img(2 * 9 * 9, -1.5f);
  gaussian_blur(img, 2, 9, 9, 1.4);
  for (float v : img) EXPECT_NEAR(v, -1.5f, 1e-5f);
}

TEST(AugmentConfigCheck, RejectsInvalidRanges) {
  AugmentConfig c;
  c.hflip_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.gamma_min = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.min_valid_fraction = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(AugmentConfig{}.validate());
}

}  // namespace
}  // namespace pixeldino
