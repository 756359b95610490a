#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pixeldino/rng.hpp"

namespace pixeldino {

// Ranges and probabilities for both augmentation families. Photometric ranges
// refer to data mapped to [0,1] per channel (per-patch min/max).
struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  bool quarter_turns = true;

  double brightness_prob = 0.5;
  double brightness_max = 0.2;
  double gamma_prob = 0.5;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double contrast_prob = 0.5;
  double contrast_min = 0.7;
  double contrast_max = 1.3;
  double rotate_prob = 0.5;
  double rotate_max_deg = 180.0;
  double warp_prob = 0.5;
  double warp_sigma = 8.0;
  double warp_max_magnitude = 6.0;
  double blur_prob = 0.5;
  double blur_sigma_max = 1.5;

  double min_valid_fraction = 0.5;
  int max_resample = 32;

  // Throws ConfigError if any range or probability is invalid.
  void validate() const;
};

struct WeakParams {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;  // counter-clockwise, 0..3

  bool is_identity() const { return !hflip && !vflip && quarter_turns == 0; }
};

struct StrongParams {
  double brightness = 0.0;
  double gamma = 1.0;
  double contrast = 1.0;
  double angle_deg = 0.0;
  uint64_t warp_seed = 0;
  double warp_magnitude = 0.0;  // max displacement in px; 0 disables the warp
  double warp_sigma = 8.0;
  double blur_sigma = 0.0;

  bool photometric_identity() const { return brightness == 0.0 && gamma == 1.0 && contrast == 1.0; }
  bool geometric_identity() const { return angle_deg == 0.0 && warp_magnitude == 0.0; }
};

struct AugmentParams {
  WeakParams weak;
  StrongParams strong;
};

enum class LabelKind { kNone, kHard, kSoft };

// One raster with its aligned dense label. Planes are row-major H*W; the image
// is C*H*W and a soft label K*H*W.
struct AugmentSample {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> image;
  LabelKind label_kind = LabelKind::kNone;
  std::vector<uint8_t> hard_label;
  int64_t label_channels = 0;
  std::vector<float> soft_label;
  std::vector<uint8_t> valid;

  static AugmentSample image_only(int64_t c, int64_t h, int64_t w, std::vector<float> image);
  static AugmentSample with_hard(int64_t c, int64_t h, int64_t w, std::vector<float> image, std::vector<uint8_t> label);
  static AugmentSample with_soft(int64_t c, int64_t h, int64_t w, std::vector<float> image, int64_t k,
                                 std::vector<float> label);
  int64_t plane() const { return height * width; }
  double valid_fraction() const;
};

WeakParams sample_weak(Rng& rng, const AugmentConfig& config);
AugmentSample apply_weak(const AugmentSample& sample, const WeakParams& params);
AugmentSample invert_weak(const AugmentSample& sample, const WeakParams& params);
std::pair<AugmentSample, WeakParams> weak_augment(const AugmentSample& sample, Rng& rng, const AugmentConfig& config);

// Draws strong parameters, resampling until the geometric part keeps at least
// min_valid_fraction of pixels in-domain. If max_resample draws all fail, the
// geometric part is disabled for this draw.
StrongParams sample_strong(Rng& rng, const AugmentConfig& config, int64_t height, int64_t width);
AugmentSample apply_strong(const AugmentSample& sample, const StrongParams& params);
std::pair<AugmentSample, StrongParams> strong_augment(const AugmentSample& sample, Rng& rng,
                                                      const AugmentConfig& config);

// Weak then strong with the composed valid mask.
std::pair<AugmentSample, AugmentParams> chain(const AugmentSample& sample, Rng& rng, const AugmentConfig& config);

// Source coordinate (x, y) in the input for every output pixel of the strong
// geometric transform (rotation about the centre after an elastic
// displacement), plus the in-domain flag.
struct SourceMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<uint8_t> in_domain;
  double in_domain_fraction() const;
};
SourceMap geometric_source_map(const StrongParams& params, int64_t height, int64_t width);

// Image-only photometric and blur stages, exposed for tests.
void apply_photometric(std::vector<float>& image, int64_t channels, int64_t plane, const StrongParams& params);
void gaussian_blur(std::vector<float>& image, int64_t channels, int64_t height, int64_t width, double sigma);

}  // namespace pixeldino
