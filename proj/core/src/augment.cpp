#include "pixeldino/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pixeldino/errors.hpp"

namespace pixeldino {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string("augment: ") + what);
}

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void AugmentConfig::validate() const {
  require(is_probability(hflip_prob) && is_probability(vflip_prob), "flip probabilities must be in [0,1]");
  require(is_probability(brightness_prob) && is_probability(gamma_prob) && is_probability(contrast_prob) &&
              is_probability(rotate_prob) && is_probability(warp_prob) && is_probability(blur_prob),
          "strong probabilities must be in [0,1]");
  require(brightness_max >= 0.0, "brightness_max must be >= 0");
  require(gamma_min > 0.0 && gamma_min <= gamma_max, "gamma range must satisfy 0 < min <= max");
  require(contrast_min >= 0.0 && contrast_min <= contrast_max, "contrast range must satisfy 0 <= min <= max");
  require(rotate_max_deg >= 0.0 && rotate_max_deg <= 180.0, "rotate_max_deg must be in [0,180]");
  require(warp_sigma > 0.0 && warp_max_magnitude >= 0.0, "warp sigma must be > 0 and magnitude >= 0");
  require(blur_sigma_max >= 0.0, "blur_sigma_max must be >= 0");
  require(min_valid_fraction >= 0.0 && min_valid_fraction <= 1.0, "min_valid_fraction must be in [0,1]");
  require(max_resample >= 1, "max_resample must be >= 1");
}

AugmentSample AugmentSample::image_only(int64_t c, int64_t h, int64_t w, std::vector<float> image) {
  if (static_cast<int64_t>(image.size()) != c * h * w) throw DimensionError("AugmentSample: image size mismatch");
  AugmentSample s;
  s.channels = c;
  s.height = h;
  s.width = w;
  s.image = std::move(image);
  s.valid.assign(static_cast<size_t>(h * w), 1);
  return s;
}

AugmentSample AugmentSample::with_hard(int64_t c, int64_t h, int64_t w, std::vector<float> image,
                                       std::vector<uint8_t> label) {
  if (static_cast<int64_t>(label.size()) != h * w) throw DimensionError("AugmentSample: hard label size mismatch");
  AugmentSample s = image_only(c, h, w, std::move(image));
  s.label_kind = LabelKind::kHard;
  s.hard_label = std::move(label);
  return s;
}

AugmentSample AugmentSample::with_soft(int64_t c, int64_t h, int64_t w, std::vector<float> image, int64_t k,
                                       std::vector<float> label) {
  if (static_cast<int64_t>(label.size()) != k * h * w) throw DimensionError("AugmentSample: soft label size mismatch");
  AugmentSample s = image_only(c, h, w, std::move(image));
  s.label_kind = LabelKind::kSoft;
  s.label_channels = k;
  s.soft_label = std::move(label);
  return s;
}

double AugmentSample::valid_fraction() const {
  if (valid.empty()) return 0.0;
  int64_t n = 0;
  for (auto v : valid) n += v ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(valid.size());
}

// ---------------------------------------------------------------------------
// Weak augmentations: exact pixel permutations.

namespace {

enum class PlaneOp { kHFlip, kVFlip, kRotCCW, kRotCW };

// Applies `op` to `planes` consecutive H*W planes; returns the new (h, w).
template <typename T>
std::vector<T> permute_planes(const std::vector<T>& src, int64_t planes, int64_t h, int64_t w, PlaneOp op) {
  std::vector<T> dst(src.size());
  const int64_t plane = h * w;
  for (int64_t p = 0; p < planes; ++p) {
    const T* s = src.data() + p * plane;
    T* d = dst.data() + p * plane;
    switch (op) {
      case PlaneOp::kHFlip:
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) d[y * w + x] = s[y * w + (w - 1 - x)];
        break;
      case PlaneOp::kVFlip:
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) d[y * w + x] = s[(h - 1 - y) * w + x];
        break;
      case PlaneOp::kRotCCW:
        // output is w x h: out(i, j) = in(j, w - 1 - i)
        for (int64_t i = 0; i < w; ++i)
          for (int64_t j = 0; j < h; ++j) d[i * h + j] = s[j * w + (w - 1 - i)];
        break;
      case PlaneOp::kRotCW:
        // output is w x h: out(i, j) = in(h - 1 - j, i)
        for (int64_t i = 0; i < w; ++i)
          for (int64_t j = 0; j < h; ++j) d[i * h + j] = s[(h - 1 - j) * w + i];
        break;
    }
  }
  return dst;
}

void apply_plane_op(AugmentSample& s, PlaneOp op) {
  s.image = permute_planes(s.image, s.channels, s.height, s.width, op);
  if (s.label_kind == LabelKind::kHard) s.hard_label = permute_planes(s.hard_label, 1, s.height, s.width, op);
  if (s.label_kind == LabelKind::kSoft) {
    s.soft_label = permute_planes(s.soft_label, s.label_channels, s.height, s.width, op);
  }
  s.valid = permute_planes(s.valid, 1, s.height, s.width, op);
  if (op == PlaneOp::kRotCCW || op == PlaneOp::kRotCW) std::swap(s.height, s.width);
}

}  // namespace

WeakParams sample_weak(Rng& rng, const AugmentConfig& config) {
  WeakParams p;
  p.hflip = bernoulli(rng, config.hflip_prob);
  p.vflip = bernoulli(rng, config.vflip_prob);
  p.quarter_turns = config.quarter_turns ? static_cast<int>(uniform_int(rng, 0, 3)) : 0;
  return p;
}

AugmentSample apply_weak(const AugmentSample& sample, const WeakParams& params) {
  AugmentSample s = sample;
  if (params.hflip) apply_plane_op(s, PlaneOp::kHFlip);
  if (params.vflip) apply_plane_op(s, PlaneOp::kVFlip);
  for (int i = 0; i < params.quarter_turns; ++i) apply_plane_op(s, PlaneOp::kRotCCW);
  return s;
}

AugmentSample invert_weak(const AugmentSample& sample, const WeakParams& params) {
  AugmentSample s = sample;
  for (int i = 0; i < params.quarter_turns; ++i) apply_plane_op(s, PlaneOp::kRotCW);
  if (params.vflip) apply_plane_op(s, PlaneOp::kVFlip);
  if (params.hflip) apply_plane_op(s, PlaneOp::kHFlip);
  return s;
}

std::pair<AugmentSample, WeakParams> weak_augment(const AugmentSample& sample, Rng& rng,
                                                  const AugmentConfig& config) {
  WeakParams p = sample_weak(rng, config);
  return {apply_weak(sample, p), p};
}

// ---------------------------------------------------------------------------
// Strong augmentations.

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[static_cast<size_t>(i + radius)];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Reflect-101 index into [0, n).
int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

template <typename T>
void separable_smooth(T* plane, int64_t h, int64_t w, const std::vector<double>& k) {
  const int64_t r = static_cast<int64_t>(k.size() / 2);
  std::vector<double> tmp(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int64_t i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * plane[y * w + reflect(x + i, w)];
      tmp[static_cast<size_t>(y * w + x)] = acc;
    }
  }
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int64_t i = -r; i <= r; ++i) {
        acc += k[static_cast<size_t>(i + r)] * tmp[static_cast<size_t>(reflect(y + i, h) * w + x)];
      }
      plane[y * w + x] = static_cast<T>(acc);
    }
  }
}

constexpr double kDomainTolerance = 1e-6;

}  // namespace

double SourceMap::in_domain_fraction() const {
  if (in_domain.empty()) return 0.0;
  int64_t n = 0;
  for (auto v : in_domain) n += v;
  return static_cast<double>(n) / static_cast<double>(in_domain.size());
}

SourceMap geometric_source_map(const StrongParams& params, int64_t height, int64_t width) {
  SourceMap m;
  m.height = height;
  m.width = width;
  const size_t n = static_cast<size_t>(height * width);
  m.x.resize(n);
  m.y.resize(n);
  m.in_domain.resize(n);
  std::vector<double> dx(n, 0.0), dy(n, 0.0);
  if (params.warp_magnitude > 0.0) {
    Rng rng = make_rng(params.warp_seed, Stream::kUnlabelledAugment, {0xE1A5ull});
    for (size_t i = 0; i < n; ++i) {
      dx[i] = normal(rng, 0.0, 1.0);
      dy[i] = normal(rng, 0.0, 1.0);
    }
    const auto k = gaussian_kernel(params.warp_sigma);
    separable_smooth(dx.data(), height, width, k);
    separable_smooth(dy.data(), height, width, k);
    double peak = 0.0;
    for (size_t i = 0; i < n; ++i) peak = std::max(peak, std::hypot(dx[i], dy[i]));
    const double scale = peak > 0.0 ? params.warp_magnitude / peak : 0.0;
    for (size_t i = 0; i < n; ++i) {
      dx[i] *= scale;
      dy[i] *= scale;
    }
  }
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = 0.5 * static_cast<double>(width - 1), cy = 0.5 * static_cast<double>(height - 1);
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      const size_t i = static_cast<size_t>(y * width + x);
      const double qx = static_cast<double>(x) + dx[i] - cx;
      const double qy = static_cast<double>(y) + dy[i] - cy;
      double sx = c * qx + s * qy + cx;
      double sy = -s * qx + c * qy + cy;
      const bool inside = sx >= -kDomainTolerance && sy >= -kDomainTolerance &&
                          sx <= static_cast<double>(width - 1) + kDomainTolerance &&
                          sy <= static_cast<double>(height - 1) + kDomainTolerance;
      sx = std::clamp(sx, 0.0, static_cast<double>(width - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(height - 1));
      m.x[i] = sx;
      m.y[i] = sy;
      m.in_domain[i] = inside ? 1 : 0;
    }
  }
  return m;
}

void apply_photometric(std::vector<float>& image, int64_t channels, int64_t plane, const StrongParams& p) {
  if (p.photometric_identity()) return;
  for (int64_t c = 0; c < channels; ++c) {
    float* v = image.data() + c * plane;
    const auto [lo_it, hi_it] = std::minmax_element(v, v + plane);
    const double lo = *lo_it, hi = *hi_it;
    const double range = hi - lo;
    if (!(range > 0.0)) continue;
    std::vector<double> u(static_cast<size_t>(plane));
    for (int64_t i = 0; i < plane; ++i) u[static_cast<size_t>(i)] = (v[i] - lo) / range;
    if (p.brightness != 0.0) {
      for (auto& x : u) x += p.brightness;
    }
    if (p.gamma != 1.0) {
      for (auto& x : u) x = std::pow(std::clamp(x, 0.0, 1.0), p.gamma);
    }
    if (p.contrast != 1.0) {
      double mean = 0.0;
      for (auto x : u) mean += x;
      mean /= static_cast<double>(plane);
      for (auto& x : u) x = (x - mean) * p.contrast + mean;
    }
    for (int64_t i = 0; i < plane; ++i) v[i] = static_cast<float>(u[static_cast<size_t>(i)] * range + lo);
  }
}

void gaussian_blur(std::vector<float>& image, int64_t channels, int64_t height, int64_t width, double sigma) {
  if (!(sigma > 1e-3)) return;
  const auto k = gaussian_kernel(sigma);
  for (int64_t c = 0; c < channels; ++c) separable_smooth(image.data() + c * height * width, height, width, k);
}

namespace {

StrongParams draw_strong(Rng& rng, const AugmentConfig& cfg) {
  StrongParams p;
  p.warp_sigma = cfg.warp_sigma;
  if (bernoulli(rng, cfg.brightness_prob)) p.brightness = uniform(rng, -cfg.brightness_max, cfg.brightness_max);
  if (bernoulli(rng, cfg.gamma_prob)) p.gamma = uniform(rng, cfg.gamma_min, cfg.gamma_max);
  if (bernoulli(rng, cfg.contrast_prob)) p.contrast = uniform(rng, cfg.contrast_min, cfg.contrast_max);
  if (bernoulli(rng, cfg.rotate_prob)) p.angle_deg = uniform(rng, -cfg.rotate_max_deg, cfg.rotate_max_deg);
  if (bernoulli(rng, cfg.warp_prob)) {
    p.warp_seed = rng();
    p.warp_magnitude = uniform(rng, 0.0, cfg.warp_max_magnitude);
  }
  if (bernoulli(rng, cfg.blur_prob)) p.blur_sigma = uniform(rng, 0.0, cfg.blur_sigma_max);
  return p;
}

}  // namespace

StrongParams sample_strong(Rng& rng, const AugmentConfig& config, int64_t height, int64_t width) {
  for (int attempt = 0; attempt < config.max_resample; ++attempt) {
    StrongParams p = draw_strong(rng, config);
    if (p.geometric_identity()) return p;
    if (geometric_source_map(p, height, width).in_domain_fraction() >= config.min_valid_fraction) return p;
  }
  StrongParams p = draw_strong(rng, config);
  p.angle_deg = 0.0;
  p.warp_magnitude = 0.0;
  return p;
}

AugmentSample apply_strong(const AugmentSample& sample, const StrongParams& params) {
  AugmentSample s = sample;
  const int64_t h = s.height, w = s.width, plane = s.plane();
  apply_photometric(s.image, s.channels, plane, params);

  if (!params.geometric_identity()) {
    const SourceMap map = geometric_source_map(params, h, w);
    std::vector<float> fill(static_cast<size_t>(s.channels));
    for (int64_t c = 0; c < s.channels; ++c) {
      double acc = 0.0;
      for (int64_t i = 0; i < plane; ++i) acc += s.image[static_cast<size_t>(c * plane + i)];
      fill[static_cast<size_t>(c)] = static_cast<float>(acc / static_cast<double>(plane));
    }
    AugmentSample out = s;
    for (int64_t i = 0; i < plane; ++i) {
      const size_t ui = static_cast<size_t>(i);
      const double sx = map.x[ui], sy = map.y[ui];
      const int64_t x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
      const int64_t nx = std::clamp<int64_t>(std::llround(sx), 0, w - 1);
      const int64_t ny = std::clamp<int64_t>(std::llround(sy), 0, h - 1);
      const bool ok = map.in_domain[ui] && s.valid[static_cast<size_t>(ny * w + nx)];
      out.valid[ui] = ok ? 1 : 0;
      auto bilinear = [&](const float* p) {
        return static_cast<float>(w00 * p[y0 * w + x0] + w01 * p[y0 * w + x1] + w10 * p[y1 * w + x0] +
                                  w11 * p[y1 * w + x1]);
      };
      for (int64_t c = 0; c < s.channels; ++c) {
        out.image[static_cast<size_t>(c * plane + i)] =
            map.in_domain[ui] ? bilinear(s.image.data() + c * plane) : fill[static_cast<size_t>(c)];
      }
      if (s.label_kind == LabelKind::kHard) {
        out.hard_label[ui] = ok ? s.hard_label[static_cast<size_t>(ny * w + nx)] : 0;
      } else if (s.label_kind == LabelKind::kSoft) {
        const int64_t k = s.label_channels;
        if (!ok) {
          for (int64_t c = 0; c < k; ++c) out.soft_label[static_cast<size_t>(c * plane + i)] = 1.0f / static_cast<float>(k);
          continue;
        }
        double total = 0.0;
        std::vector<double> vals(static_cast<size_t>(k));
        for (int64_t c = 0; c < k; ++c) {
          const float* p = s.soft_label.data() + c * plane;
          const double v = w00 * p[y0 * w + x0] + w01 * p[y0 * w + x1] + w10 * p[y1 * w + x0] + w11 * p[y1 * w + x1];
          vals[static_cast<size_t>(c)] = v;
          total += v;
        }
        for (int64_t c = 0; c < k; ++c) {
          out.soft_label[static_cast<size_t>(c * plane + i)] =
              total > 0.0 ? static_cast<float>(vals[static_cast<size_t>(c)] / total) : 1.0f / static_cast<float>(k);
        }
      }
    }
    s = std::move(out);
  }

  gaussian_blur(s.image, s.channels, h, w, params.blur_sigma);
  return s;
}

std::pair<AugmentSample, StrongParams> strong_augment(const AugmentSample& sample, Rng& rng,
                                                      const AugmentConfig& config) {
  StrongParams p = sample_strong(rng, config, sample.height, sample.width);
  return {apply_strong(sample, p), p};
}

std::pair<AugmentSample, AugmentParams> chain(const AugmentSample& sample, Rng& rng, const AugmentConfig& config) {
  AugmentParams params;
  params.weak = sample_weak(rng, config);
  AugmentSample weak = apply_weak(sample, params.weak);
  params.strong = sample_strong(rng, config, weak.height, weak.width);
  return {apply_strong(weak, params.strong), params};
}

}  // namespace pixeldino
