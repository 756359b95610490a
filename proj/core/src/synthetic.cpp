#include "pixeldino/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "pixeldino/config.hpp"
#include "pixeldino/errors.hpp"
#include "pixeldino/rng.hpp"

namespace pixeldino {

namespace {

// Stream keys below kSynthetic.
enum Key : uint64_t {
  kPalette = 1,
  kSignature = 2,
  kRegions = 3,
  kNoise = 4,
  kTargets = 5,
  kSensor = 6,
};

struct RegionType {
  std::vector<double> mean;
  double amplitude = 0.0;
};

struct Palette {
  std::vector<RegionType> types;
  double noise_scale = 0.0;
};

Palette make_palette(const SyntheticConfig& cfg, bool shifted) {
  Rng rng = make_rng(cfg.seed, Stream::kSynthetic, {kPalette, shifted ? 1u : 0u});
  const double s = shifted ? cfg.shift : 0.0;
  Palette p;
  p.noise_scale = cfg.noise_scale * (1.0 - 0.25 * std::min(s, 1.0));
  for (int64_t t = 0; t < cfg.region_types; ++t) {
    RegionType r;
    for (int64_t c = 0; c < cfg.channels; ++c) {
      // Shifted domains move odd and even bands in opposite directions so the
      // shift is not a global brightness change.
      const double dir = (c % 2 == 0) ? 1.0 : -0.5;
      r.mean.push_back(uniform(rng, 0.2, 0.6) + 0.12 * s * dir);
    }
    r.amplitude = cfg.texture_amplitude * uniform(rng, 0.6, 1.4) * (1.0 + 0.5 * s);
    p.types.push_back(std::move(r));
  }
  return p;
}

std::vector<double> make_signature(const SyntheticConfig& cfg) {
  Rng rng = make_rng(cfg.seed, Stream::kSynthetic, {kSignature});
  std::vector<double> sig;
  double peak = 0.0;
  for (int64_t c = 0; c < cfg.channels; ++c) {
    double v = uniform(rng, 0.3, 1.0) * (bernoulli(rng, 0.5) ? -1.0 : 1.0);
    if (c == 0) v = std::abs(v);
    sig.push_back(v);
    peak = std::max(peak, std::abs(v));
  }
  for (auto& v : sig) v /= peak;
  return sig;
}

// Fractal value noise in roughly [-1, 1].
std::vector<double> value_noise(Rng& rng, int64_t n, int octaves, double scale) {
  std::vector<double> out(static_cast<size_t>(n * n), 0.0);
  double amp = 1.0, total = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const double cell = std::max(2.0, scale / std::pow(2.0, o));
    const int64_t g = static_cast<int64_t>(std::ceil(static_cast<double>(n) / cell)) + 2;
    std::vector<double> lattice(static_cast<size_t>(g * g));
    for (auto& v : lattice) v = uniform(rng, -1.0, 1.0);
    const double ox = uniform(rng, 0.0, cell), oy = uniform(rng, 0.0, cell);
    for (int64_t y = 0; y < n; ++y) {
      const double fy = (static_cast<double>(y) + oy) / cell;
      const int64_t y0 = static_cast<int64_t>(fy);
      double ty = fy - static_cast<double>(y0);
      ty = ty * ty * (3.0 - 2.0 * ty);
      for (int64_t x = 0; x < n; ++x) {
        const double fx = (static_cast<double>(x) + ox) / cell;
        const int64_t x0 = static_cast<int64_t>(fx);
        double tx = fx - static_cast<double>(x0);
        tx = tx * tx * (3.0 - 2.0 * tx);
        auto at = [&](int64_t yy, int64_t xx) { return lattice[static_cast<size_t>(yy * g + xx)]; };
        const double top = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
        const double bot = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
        out[static_cast<size_t>(y * n + x)] += amp * (top * (1 - ty) + bot * ty);
      }
    }
    total += amp;
    amp *= 0.5;
  }
  for (auto& v : out) v /= total;
  return out;
}

// Region type per pixel from a Voronoi partition of warped coordinates.
std::vector<int64_t> region_map(const SyntheticConfig& cfg, const Palette& pal, Rng& rng, int64_t n) {
  struct Seed {
    double x, y;
    int64_t type;
  };
  std::vector<Seed> seeds;
  for (int64_t i = 0; i < cfg.regions_per_tile; ++i) {
    seeds.push_back({uniform(rng, 0.0, static_cast<double>(n)), uniform(rng, 0.0, static_cast<double>(n)),
                     uniform_int(rng, int64_t{0}, cfg.region_types - 1)});
  }
  const auto wx = value_noise(rng, n, 2, pal.noise_scale * 1.5);
  const auto wy = value_noise(rng, n, 2, pal.noise_scale * 1.5);
  const double warp = 0.35 * static_cast<double>(n) / std::sqrt(static_cast<double>(cfg.regions_per_tile));
  std::vector<int64_t> out(static_cast<size_t>(n * n));
  for (int64_t y = 0; y < n; ++y) {
    for (int64_t x = 0; x < n; ++x) {
      const size_t i = static_cast<size_t>(y * n + x);
      const double px = static_cast<double>(x) + warp * wx[i];
      const double py = static_cast<double>(y) + warp * wy[i];
      double best = std::numeric_limits<double>::infinity();
      int64_t type = 0;
      for (const auto& s : seeds) {
        const double d = (px - s.x) * (px - s.x) + (py - s.y) * (py - s.y);
        if (d < best) {
          best = d;
          type = s.type;
        }
      }
      out[i] = type;
    }
  }
  return out;
}

// Grows blobs by random walk until the running pixel budget is met. Blob
// pixels are never 8-adjacent to another blob, so every 4- or 8-connected
// component of the mask is exactly one blob with area in [min, max].
class BlobPlanter {
 public:
  BlobPlanter(int64_t n, std::vector<uint8_t>& mask, std::vector<int32_t>& owner)
      : n_(n), mask_(mask), owner_(owner) {}

  // Returns the area planted, 0 if growth got stuck below `min_area`.
  int64_t plant(Rng& rng, int32_t id, int64_t area, int64_t min_area) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int64_t sx = uniform_int(rng, int64_t{0}, n_ - 1);
      const int64_t sy = uniform_int(rng, int64_t{0}, n_ - 1);
      if (!free_for(sx, sy, id)) continue;
      std::vector<int64_t> pix{sy * n_ + sx};
      claim(pix.back(), id);
      const int64_t budget = 60 * area;
      for (int64_t tries = 0; static_cast<int64_t>(pix.size()) < area && tries < budget; ++tries) {
        const int64_t from = pix[static_cast<size_t>(uniform_int(rng, int64_t{0}, static_cast<int64_t>(pix.size()) - 1))];
        static constexpr std::array<int64_t, 4> dx{1, -1, 0, 0}, dy{0, 0, 1, -1};
        const int d = static_cast<int>(uniform_int(rng, int64_t{0}, int64_t{3}));
        const int64_t x = from % n_ + dx[static_cast<size_t>(d)], y = from / n_ + dy[static_cast<size_t>(d)];
        if (x < 0 || y < 0 || x >= n_ || y >= n_) continue;
        if (owner_[static_cast<size_t>(y * n_ + x)] == id) continue;
        if (!free_for(x, y, id)) continue;
        pix.push_back(y * n_ + x);
        claim(pix.back(), id);
      }
      if (static_cast<int64_t>(pix.size()) >= min_area) return static_cast<int64_t>(pix.size());
      for (int64_t p : pix) {
        mask_[static_cast<size_t>(p)] = 0;
        owner_[static_cast<size_t>(p)] = -1;
      }
    }
    return 0;
  }

 private:
  bool free_for(int64_t x, int64_t y, int32_t id) const {
    for (int64_t yy = std::max<int64_t>(0, y - 1); yy <= std::min(n_ - 1, y + 1); ++yy) {
      for (int64_t xx = std::max<int64_t>(0, x - 1); xx <= std::min(n_ - 1, x + 1); ++xx) {
        const int32_t o = owner_[static_cast<size_t>(yy * n_ + xx)];
        if (o >= 0 && o != id) return false;
      }
    }
    return owner_[static_cast<size_t>(y * n_ + x)] < 0;
  }
  void claim(int64_t p, int32_t id) {
    mask_[static_cast<size_t>(p)] = 1;
    owner_[static_cast<size_t>(p)] = id;
  }

  int64_t n_;
  std::vector<uint8_t>& mask_;
  std::vector<int32_t>& owner_;
};

uint64_t split_key(SyntheticSplit s) { return static_cast<uint64_t>(s) + 1; }

}  // namespace

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic config: " + m); };
  if (tile_size < 8) fail("tile_size must be >= 8");
  if (channels < 1) fail("channels must be >= 1");
  if (labelled_tiles < 1) fail("labelled_tiles must be >= 1");
  if (unlabelled_tiles < 0 || eval_tiles < 0 || eval_in_tiles < 0) fail("tile counts must be >= 0");
  if (!(target_density > 0.0 && target_density <= 0.05)) fail("target_density must lie in (0, 0.05]");
  if (target_area_min < 1 || target_area_max < target_area_min) fail("target area range is invalid");
  if (target_area_max > tile_size * tile_size / 4) fail("target_area_max too large for tile_size");
  if (!(target_contrast >= 0.0)) fail("target_contrast must be >= 0");
  if (noise_octaves < 1 || noise_octaves > 8) fail("noise_octaves must lie in [1, 8]");
  if (!(noise_scale >= 2.0)) fail("noise_scale must be >= 2");
  if (!(texture_amplitude >= 0.0)) fail("texture_amplitude must be >= 0");
  if (regions_per_tile < 1 || region_types < 1) fail("regions_per_tile and region_types must be >= 1");
  if (!(sensor_noise >= 0.0)) fail("sensor_noise must be >= 0");
  if (!(shift >= 0.0)) fail("shift must be >= 0");
}

const char* split_name(SyntheticSplit split) {
  switch (split) {
    case SyntheticSplit::kLabelled: return "labelled";
    case SyntheticSplit::kUnlabelled: return "unlabelled";
    case SyntheticSplit::kEval: return "eval";
    case SyntheticSplit::kEvalIn: return "eval_in";
  }
  return "?";
}

bool split_is_shifted(SyntheticSplit split) {
  return split == SyntheticSplit::kUnlabelled || split == SyntheticSplit::kEval;
}

std::vector<Tile> synthesize_split(const SyntheticConfig& cfg, SyntheticSplit split, int64_t count) {
  cfg.validate();
  const Palette pal = make_palette(cfg, split_is_shifted(split));
  const std::vector<double> sig = make_signature(cfg);
  const int64_t n = cfg.tile_size;
  const int64_t plane = n * n;
  const double log_min = std::log(static_cast<double>(cfg.target_area_min));
  const double log_max = std::log(static_cast<double>(cfg.target_area_max));

  std::vector<Tile> tiles;
  double owed = 0.0;  // running budget carried across tiles
  for (int64_t t = 0; t < count; ++t) {
    const uint64_t sk = split_key(split), tk = static_cast<uint64_t>(t);
    Rng region_rng = make_rng(cfg.seed, Stream::kSynthetic, {kRegions, sk, tk});
    const auto regions = region_map(cfg, pal, region_rng, n);

    Tile tile;
    tile.id = std::string(split_name(split)) + "_" + std::to_string(t);
    tile.width = tile.height = n;
    tile.channels = cfg.channels;
    tile.data.assign(static_cast<size_t>(cfg.channels * plane), 0.0f);

    Rng noise_rng = make_rng(cfg.seed, Stream::kSynthetic, {kNoise, sk, tk});
    const auto shared = value_noise(noise_rng, n, cfg.noise_octaves, pal.noise_scale);
    std::vector<std::vector<double>> own;
    for (int64_t c = 0; c < cfg.channels; ++c) own.push_back(value_noise(noise_rng, n, cfg.noise_octaves, pal.noise_scale));

    tile.mask.assign(static_cast<size_t>(plane), 0);
    std::vector<int32_t> owner(static_cast<size_t>(plane), -1);
    std::vector<double> strength(static_cast<size_t>(plane), 0.0);
    Rng target_rng = make_rng(cfg.seed, Stream::kSynthetic, {kTargets, sk, tk});
    BlobPlanter planter(n, tile.mask, owner);
    owed += cfg.target_density * static_cast<double>(plane);
    int32_t id = 0;
    int failures = 0;
    while (owed > 0.0 && failures < 8) {
      const int64_t area = std::clamp<int64_t>(
          static_cast<int64_t>(std::llround(std::exp(uniform(target_rng, log_min, log_max)))), cfg.target_area_min,
          cfg.target_area_max);
      const double blob_strength = uniform(target_rng, 0.8, 1.2);
      const int64_t placed = planter.plant(target_rng, id, area, cfg.target_area_min);
      if (placed == 0) {
        ++failures;
        continue;
      }
      for (int64_t p = 0; p < plane; ++p) {
        if (owner[static_cast<size_t>(p)] == id) strength[static_cast<size_t>(p)] = blob_strength;
      }
      owed -= static_cast<double>(placed);
      ++id;
    }

    Rng sensor_rng = make_rng(cfg.seed, Stream::kSynthetic, {kSensor, sk, tk});
    for (int64_t c = 0; c < cfg.channels; ++c) {
      float* out = tile.data.data() + c * plane;
      for (int64_t p = 0; p < plane; ++p) {
        const size_t i = static_cast<size_t>(p);
        const RegionType& r = pal.types[static_cast<size_t>(regions[i])];
        double v = r.mean[static_cast<size_t>(c)] + r.amplitude * (0.7 * shared[i] + 0.3 * own[static_cast<size_t>(c)][i]);
        if (tile.mask[i]) v += cfg.target_contrast * sig[static_cast<size_t>(c)] * strength[i];
        v += cfg.sensor_noise * normal(sensor_rng, 0.0, 1.0);
        out[p] = static_cast<float>(v);
      }
    }
    tiles.push_back(std::move(tile));
  }
  return tiles;
}

GeneratedStores generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  GeneratedStores out{out_dir / "labelled", out_dir / "unlabelled", out_dir / "eval", out_dir / "eval_in"};
  const std::string gen = synthetic_config_to_json(cfg);

  auto labelled = synthesize_split(cfg, SyntheticSplit::kLabelled, cfg.labelled_tiles);
  const Normalization norm = compute_normalization(labelled, "labelled");

  auto write = [&](const std::filesystem::path& dir, SyntheticSplit split, std::vector<Tile> tiles, bool keep_mask) {
    if (!keep_mask) {
      for (auto& t : tiles) t.mask.clear();
    }
    Manifest m;
    m.store = split_name(split);
    m.provenance = split == SyntheticSplit::kLabelled ? "labelled"
                   : split == SyntheticSplit::kUnlabelled ? "unlabelled"
                                                          : "eval";
    m.normalization = norm;
    m.generator_json = gen;
    TileStore::create(dir, std::move(m), tiles);
  };
  write(out.labelled, SyntheticSplit::kLabelled, std::move(labelled), true);
  write(out.unlabelled, SyntheticSplit::kUnlabelled,
        synthesize_split(cfg, SyntheticSplit::kUnlabelled, cfg.unlabelled_tiles), false);
  write(out.eval, SyntheticSplit::kEval, synthesize_split(cfg, SyntheticSplit::kEval, cfg.eval_tiles), true);
  write(out.eval_in, SyntheticSplit::kEvalIn, synthesize_split(cfg, SyntheticSplit::kEvalIn, cfg.eval_in_tiles), true);
  return out;
}

}  // namespace pixeldino
