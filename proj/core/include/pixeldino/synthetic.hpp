#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pixeldino/tile.hpp"

namespace pixeldino {

// Procedural scenes of sparse, small, irregular targets on a heterogeneous
// background. The background is a warped Voronoi partition into regions whose
// type fixes the per-channel mean; each region carries multi-octave value
// noise. Targets are random-walk-grown blobs whose channel values are shifted
// from the local background by `target_contrast` along a fixed signature.
//
// Two domains share the target signature but not the region palette: the
// labelled and in-distribution eval stores use the base palette, the
// unlabelled and shifted eval stores use a palette drawn from hyperparameters
// moved by `shift`.
struct SyntheticConfig {
  uint64_t seed = 0;
  int64_t tile_size = 192;
  int64_t channels = 4;
  int64_t labelled_tiles = 64;
  int64_t unlabelled_tiles = 256;
  int64_t eval_tiles = 16;
  int64_t eval_in_tiles = 16;

  double target_density = 0.007;
  int64_t target_area_min = 20;
  int64_t target_area_max = 600;
  double target_contrast = 0.15;

  int noise_octaves = 4;
  double noise_scale = 48.0;  // px, cell size of the coarsest octave
  double texture_amplitude = 0.08;
  int64_t regions_per_tile = 6;
  int64_t region_types = 5;
  double sensor_noise = 0.02;
  double shift = 1.0;

  // Throws ConfigError; density must lie in (0, 0.05].
  void validate() const;
};

enum class SyntheticSplit { kLabelled, kUnlabelled, kEval, kEvalIn };

const char* split_name(SyntheticSplit split);
bool split_is_shifted(SyntheticSplit split);

// Tiles of one split, fully determined by (config, split). Every tile carries
// its mask; callers strip it for unlabelled stores.
std::vector<Tile> synthesize_split(const SyntheticConfig& config, SyntheticSplit split, int64_t count);

struct GeneratedStores {
  std::filesystem::path labelled;
  std::filesystem::path unlabelled;
  std::filesystem::path eval;
  std::filesystem::path eval_in;
};

// Writes labelled/, unlabelled/, eval/ (shifted) and eval_in/ (base domain)
// under out_dir. All manifests carry the labelled store's normalisation.
GeneratedStores generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir);

}  // namespace pixeldino
