#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pixeldino {

// Per-channel normalisation statistics. Stores carry the statistics of the
// labelled training store so every split is normalised identically.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::string source;
  bool empty() const { return mean.empty(); }
};

// One raster tile: planar float32 channels plus an optional 0/1 mask.
struct Tile {
  std::string id;
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;
  std::vector<float> data;  // channels * height * width, planar
  std::vector<uint8_t> mask;  // height * width, empty when unlabelled

  bool has_mask() const { return !mask.empty(); }
  int64_t plane() const { return width * height; }
  const float* channel(int64_t c) const { return data.data() + c * plane(); }
};

// Tile file layout (all integers little-endian):
//   8 bytes   magic "RTSTILE1"
//   4 bytes   uint32 length L of the JSON header
//   L bytes   UTF-8 JSON {id, width, height, channels, has_mask, channel_mean, channel_std}
//   C*H*W*4   float32 planar channel data
//   H*W       uint8 mask plane, present iff has_mask
void write_tile(const std::filesystem::path& path, const Tile& tile);
Tile read_tile(const std::filesystem::path& path);

struct TileEntry {
  std::string id;
  std::string file;
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;
  bool labelled = false;
};

struct Manifest {
  std::string store;       // store name, e.g. "labelled"
  std::string provenance;  // "labelled", "unlabelled" or "eval"
  std::vector<TileEntry> tiles;
  Normalization normalization;
  std::string generator_json = "{}";  // generator settings, if synthetic
};

void write_manifest(const std::filesystem::path& dir, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& dir);

// A directory of tiles listed by manifest.json. Opening validates that every
// entry resolves to a readable tile whose header matches, and that labelled
// entries carry a mask and unlabelled ones do not. Tiles are held in memory.
class TileStore {
 public:
  static TileStore open(const std::filesystem::path& dir);
  static TileStore create(const std::filesystem::path& dir, Manifest manifest, const std::vector<Tile>& tiles);

  const std::filesystem::path& dir() const { return dir_; }
  const Manifest& manifest() const { return manifest_; }
  const std::vector<Tile>& tiles() const { return tiles_; }
  size_t size() const { return tiles_.size(); }
  bool empty() const { return tiles_.empty(); }
  int64_t channels() const;

 private:
  std::filesystem::path dir_;
  Manifest manifest_;
  std::vector<Tile> tiles_;
};

// Per-channel mean/std over every pixel of every tile (double accumulation).
Normalization compute_normalization(const std::vector<Tile>& tiles, std::string source);

// Writes `bytes` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace pixeldino
