#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pixeldino/rng.hpp"
#include "pixeldino/tile.hpp"

namespace pixeldino {

struct PatchSpec {
  int64_t patch_size = 192;
  int64_t stride = 0;  // grid stride; 0 means patch_size (non-overlapping)
  // Patches whose valid (finite) pixel fraction falls below this are skipped.
  double min_valid_fraction = 0.0;

  int64_t effective_stride() const { return stride > 0 ? stride : patch_size; }
  // Throws ConfigError unless patch_size is a positive multiple of `multiple`.
  void validate(int64_t multiple) const;
};

// Normalised C*P*P crop with its mask plane (empty for unlabelled tiles).
struct RasterPatch {
  std::string tile_id;
  int64_t tile_index = 0;
  int64_t x0 = 0;
  int64_t y0 = 0;
  int64_t channels = 0;
  int64_t size = 0;
  std::vector<float> image;
  std::vector<uint8_t> mask;
};

struct PatchOrigin {
  int64_t tile_index = 0;
  int64_t x0 = 0;
  int64_t y0 = 0;
  bool operator==(const PatchOrigin&) const = default;
};

// Copies the window at (x0, y0) and maps each channel to (v - mean) / std.
RasterPatch crop_patch(const Tile& tile, int64_t tile_index, int64_t x0, int64_t y0, int64_t size,
                       const Normalization& norm);

// Tiles at least patch_size on both sides; smaller tiles are skipped with a
// warning on stderr.
std::vector<int64_t> eligible_tiles(const TileStore& store, int64_t patch_size);

// Deterministic grid, row-major per tile, tiles in store order. Consumes no
// randomness. Remainder strips narrower than a patch are not covered.
std::vector<PatchOrigin> grid_origins(const TileStore& store, const PatchSpec& spec);

// One uniformly random crop: tile uniform over eligible tiles, offset uniform
// over all in-bounds positions.
PatchOrigin random_origin(Rng& rng, const TileStore& store, const std::vector<int64_t>& eligible,
                          int64_t patch_size);

}  // namespace pixeldino
