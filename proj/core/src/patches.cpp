#include "pixeldino/patches.hpp"

#include <cmath>
#include <iostream>

#include "pixeldino/errors.hpp"

namespace pixeldino {

void PatchSpec::validate(int64_t multiple) const {
  if (patch_size < 1 || patch_size % multiple != 0) {
    throw ConfigError("patch_size " + std::to_string(patch_size) + " must be a positive multiple of " +
                      std::to_string(multiple));
  }
  if (stride < 0) throw ConfigError("stride must be >= 0");
  if (!(min_valid_fraction >= 0.0 && min_valid_fraction <= 1.0)) throw ConfigError("min_valid_fraction must lie in [0, 1]");
}

RasterPatch crop_patch(const Tile& tile, int64_t tile_index, int64_t x0, int64_t y0, int64_t size,
                       const Normalization& norm) {
  if (x0 < 0 || y0 < 0 || x0 + size > tile.width || y0 + size > tile.height) {
    throw DimensionError("crop_patch: window outside tile " + tile.id);
  }
  if (static_cast<int64_t>(norm.mean.size()) != tile.channels || static_cast<int64_t>(norm.stddev.size()) != tile.channels) {
    throw DimensionError("crop_patch: normalisation has " + std::to_string(norm.mean.size()) + " channels, tile " +
                         tile.id + " has " + std::to_string(tile.channels));
  }
  RasterPatch p;
  p.tile_id = tile.id;
  p.tile_index = tile_index;
  p.x0 = x0;
  p.y0 = y0;
  p.channels = tile.channels;
  p.size = size;
  p.image.resize(static_cast<size_t>(tile.channels * size * size));
  for (int64_t c = 0; c < tile.channels; ++c) {
    const double m = norm.mean[static_cast<size_t>(c)];
    const double sd = norm.stddev[static_cast<size_t>(c)];
    const float scale = static_cast<float>(sd > 0.0 ? 1.0 / sd : 1.0);
    const float shift = static_cast<float>(m);
    const float* src = tile.channel(c);
    float* dst = p.image.data() + c * size * size;
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        dst[y * size + x] = (src[(y0 + y) * tile.width + x0 + x] - shift) * scale;
      }
    }
  }
  if (tile.has_mask()) {
    p.mask.resize(static_cast<size_t>(size * size));
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        p.mask[static_cast<size_t>(y * size + x)] = tile.mask[static_cast<size_t>((y0 + y) * tile.width + x0 + x)];
      }
    }
  }
  return p;
}

std::vector<int64_t> eligible_tiles(const TileStore& store, int64_t patch_size) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < store.size(); ++i) {
    const Tile& t = store.tiles()[i];
    if (t.width < patch_size || t.height < patch_size) {
      std::cerr << "warning: skipping tile " << t.id << " (" << t.width << "x" << t.height << ") smaller than patch "
                << patch_size << "\n";
      continue;
    }
    out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

namespace {

bool finite_fraction_ok(const Tile& t, int64_t x0, int64_t y0, int64_t size, double min_fraction) {
  if (min_fraction <= 0.0) return true;
  int64_t good = 0;
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      bool ok = true;
      for (int64_t c = 0; c < t.channels && ok; ++c) ok = std::isfinite(t.channel(c)[(y0 + y) * t.width + x0 + x]);
      good += ok;
    }
  }
  return static_cast<double>(good) >= min_fraction * static_cast<double>(size * size);
}

}  // namespace

std::vector<PatchOrigin> grid_origins(const TileStore& store, const PatchSpec& spec) {
  const int64_t p = spec.patch_size, s = spec.effective_stride();
  std::vector<PatchOrigin> out;
  for (int64_t i : eligible_tiles(store, p)) {
    const Tile& t = store.tiles()[static_cast<size_t>(i)];
    for (int64_t y = 0; y + p <= t.height; y += s) {
      for (int64_t x = 0; x + p <= t.width; x += s) {
        if (finite_fraction_ok(t, x, y, p, spec.min_valid_fraction)) out.push_back({i, x, y});
      }
    }
  }
  return out;
}

PatchOrigin random_origin(Rng& rng, const TileStore& store, const std::vector<int64_t>& eligible, int64_t patch_size) {
  if (eligible.empty()) throw ConfigError("store " + store.dir().string() + " has no tile large enough for patch size " +
                                          std::to_string(patch_size));
  const int64_t i = eligible[static_cast<size_t>(uniform_int(rng, 0, static_cast<int64_t>(eligible.size()) - 1))];
  const Tile& t = store.tiles()[static_cast<size_t>(i)];
  const int64_t x0 = uniform_int(rng, 0, t.width - patch_size);
  const int64_t y0 = uniform_int(rng, 0, t.height - patch_size);
  return {i, x0, y0};
}

}  // namespace pixeldino
