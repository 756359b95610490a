#include "pixeldino/tile.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "binary_io.hpp"
#include "pixeldino/errors.hpp"

namespace pixeldino {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr char kTileMagic[] = "RTSTILE1";
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_tile(const fs::path& path, const Tile& tile) {
  if (static_cast<int64_t>(tile.data.size()) != tile.channels * tile.plane()) {
    throw DimensionError("write_tile: data size does not match header for " + tile.id);
  }
  if (tile.has_mask() && static_cast<int64_t>(tile.mask.size()) != tile.plane()) {
    throw DimensionError("write_tile: mask size does not match header for " + tile.id);
  }
  std::vector<double> mean, sd;
  for (int64_t c = 0; c < tile.channels; ++c) {
    const float* p = tile.channel(c);
    double s = 0.0, s2 = 0.0;
    for (int64_t i = 0; i < tile.plane(); ++i) s += p[i];
    const double m = s / static_cast<double>(tile.plane());
    for (int64_t i = 0; i < tile.plane(); ++i) s2 += (p[i] - m) * (p[i] - m);
    mean.push_back(m);
    sd.push_back(std::sqrt(s2 / static_cast<double>(tile.plane())));
  }
  json header = {{"id", tile.id},           {"width", tile.width},      {"height", tile.height},
                 {"channels", tile.channels}, {"has_mask", tile.has_mask()}, {"channel_mean", mean},
                 {"channel_std", sd}};
  const std::string h = header.dump();
  std::string bytes(kTileMagic, 8);
  binio::append_u32(bytes, static_cast<uint32_t>(h.size()));
  bytes += h;
  binio::append_f32(bytes, tile.data);
  bytes.append(reinterpret_cast<const char*>(tile.mask.data()), tile.mask.size());
  write_file_atomic(path, bytes);
}

Tile read_tile(const fs::path& path) {
  const std::string bytes = read_file(path);
  binio::Reader r(bytes, path.string());
  if (r.take(8) != std::string_view(kTileMagic, 8)) throw IoError(path.string() + ": bad tile magic");
  const uint32_t hlen = r.u32();
  json header;
  try {
    header = json::parse(r.take(hlen));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed tile header: " + e.what());
  }
  Tile t;
  try {
    t.id = header.at("id").get<std::string>();
    t.width = header.at("width").get<int64_t>();
    t.height = header.at("height").get<int64_t>();
    t.channels = header.at("channels").get<int64_t>();
    const bool has_mask = header.at("has_mask").get<bool>();
    if (t.width <= 0 || t.height <= 0 || t.channels <= 0) throw IoError(path.string() + ": invalid tile dims");
    t.data = r.f32(static_cast<size_t>(t.channels * t.plane()));
    if (has_mask) {
      auto m = r.take(static_cast<size_t>(t.plane()));
      t.mask.assign(m.begin(), m.end());
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": tile header missing field: " + e.what());
  }
  if (!r.done()) throw IoError(path.string() + ": trailing bytes after tile payload");
  return t;
}

namespace {

json normalization_json(const Normalization& n) {
  return {{"source", n.source}, {"mean", n.mean}, {"std", n.stddev}};
}

}  // namespace

void write_manifest(const fs::path& dir, const Manifest& m) {
  json tiles = json::array();
  for (const auto& e : m.tiles) {
    tiles.push_back({{"id", e.id},
                     {"file", e.file},
                     {"width", e.width},
                     {"height", e.height},
                     {"channels", e.channels},
                     {"labelled", e.labelled}});
  }
  json j = {{"format", "RTSTILE1"},
            {"store", m.store},
            {"provenance", m.provenance},
            {"tiles", tiles},
            {"generator", json::parse(m.generator_json)}};
  if (!m.normalization.empty()) j["normalization"] = normalization_json(m.normalization);
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  Manifest m;
  try {
    m.store = j.at("store").get<std::string>();
    m.provenance = j.at("provenance").get<std::string>();
    for (const auto& t : j.at("tiles")) {
      TileEntry e;
      e.id = t.at("id").get<std::string>();
      e.file = t.at("file").get<std::string>();
      e.width = t.at("width").get<int64_t>();
      e.height = t.at("height").get<int64_t>();
      e.channels = t.at("channels").get<int64_t>();
      e.labelled = t.at("labelled").get<bool>();
      m.tiles.push_back(std::move(e));
    }
    if (j.contains("normalization")) {
      const auto& n = j.at("normalization");
      m.normalization.source = n.at("source").get<std::string>();
      m.normalization.mean = n.at("mean").get<std::vector<double>>();
      m.normalization.stddev = n.at("std").get<std::vector<double>>();
    }
    if (j.contains("generator")) m.generator_json = j.at("generator").dump();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": manifest missing field: " + e.what());
  }
  return m;
}

TileStore TileStore::open(const fs::path& dir) {
  TileStore s;
  s.dir_ = dir;
  s.manifest_ = read_manifest(dir);
  for (const auto& e : s.manifest_.tiles) {
    Tile t = read_tile(dir / e.file);
    if (t.id != e.id || t.width != e.width || t.height != e.height || t.channels != e.channels) {
      throw IoError((dir / e.file).string() + ": tile header does not match manifest entry " + e.id);
    }
    if (t.has_mask() != e.labelled) {
      throw IoError((dir / e.file).string() + ": mask presence does not match labelled flag");
    }
    s.tiles_.push_back(std::move(t));
  }
  return s;
}

TileStore TileStore::create(const fs::path& dir, Manifest manifest, const std::vector<Tile>& tiles) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create store directory " + dir.string() + ": " + ec.message());
  manifest.tiles.clear();
  for (const auto& t : tiles) {
    TileEntry e{t.id, t.id + ".rtstile", t.width, t.height, t.channels, t.has_mask()};
    write_tile(dir / e.file, t);
    manifest.tiles.push_back(std::move(e));
  }
  write_manifest(dir, manifest);
  TileStore s;
  s.dir_ = dir;
  s.manifest_ = std::move(manifest);
  s.tiles_ = tiles;
  return s;
}

int64_t TileStore::channels() const { return tiles_.empty() ? 0 : tiles_.front().channels; }

Normalization compute_normalization(const std::vector<Tile>& tiles, std::string source) {
  Normalization n;
  n.source = std::move(source);
  if (tiles.empty()) return n;
  const int64_t c = tiles.front().channels;
  n.mean.assign(static_cast<size_t>(c), 0.0);
  n.stddev.assign(static_cast<size_t>(c), 0.0);
  double count = 0.0;
  for (const auto& t : tiles) {
    if (t.channels != c) throw DimensionError("compute_normalization: channel count differs across tiles");
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* p = t.channel(ch);
      for (int64_t i = 0; i < t.plane(); ++i) n.mean[static_cast<size_t>(ch)] += p[i];
    }
    count += static_cast<double>(t.plane());
  }
  for (auto& m : n.mean) m /= count;
  for (const auto& t : tiles) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* p = t.channel(ch);
      const double m = n.mean[static_cast<size_t>(ch)];
      for (int64_t i = 0; i < t.plane(); ++i) n.stddev[static_cast<size_t>(ch)] += (p[i] - m) * (p[i] - m);
    }
  }
  for (auto& s : n.stddev) s = std::sqrt(s / count);
  return n;
}

}  // namespace pixeldino
