#include "pixeldino/checkpoint.hpp"

#include <nlohmann/json.hpp>
#include <set>

#include "binary_io.hpp"
#include "pixeldino/config.hpp"
#include "pixeldino/errors.hpp"
#include "pixeldino/tile.hpp"

namespace pixeldino {

using nlohmann::json;

namespace {
constexpr char kCheckpointMagic[] = "RTSCKPT1";
constexpr int kVersion = 1;
}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json dir = json::array();
  uint64_t offset = 0;
  std::set<std::string> names;
  for (const auto& a : ck.arrays) {
    if (!names.insert(a.name).second) throw UsageError("duplicate checkpoint array " + a.name);
    if (shape_numel(a.shape) != static_cast<int64_t>(a.data.size())) {
      throw DimensionError("checkpoint array " + a.name + " data does not match shape " + shape_str(a.shape));
    }
    dir.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset * 4}, {"bytes", a.data.size() * 4}});
    offset += a.data.size();
  }
  json header = {{"version", kVersion},
                 {"model", json::parse(model_config_to_json(ck.model))},
                 {"step", ck.step},
                 {"meta", json::parse(ck.meta_json)},
                 {"tensors", dir}};
  const std::string h = header.dump();
  std::string bytes(kCheckpointMagic, 8);
  binio::append_u32(bytes, static_cast<uint32_t>(h.size()));
  bytes += h;
  bytes.reserve(bytes.size() + offset * 4);
  for (const auto& a : ck.arrays) binio::append_f32(bytes, a.data);
  write_file_atomic(path, bytes);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  binio::Reader r(bytes, path.string());
  if (r.take(8) != std::string_view(kCheckpointMagic, 8)) throw IoError(path.string() + ": not a checkpoint file");
  const uint32_t hlen = r.u32();
  Checkpoint ck;
  try {
    const json header = json::parse(r.take(hlen));
    if (header.at("version").get<int>() != kVersion) throw IoError(path.string() + ": unsupported checkpoint version");
    try {
      ck.model = parse_model_config(header.at("model").dump());
    } catch (const ConfigError& e) {
      throw IoError(path.string() + ": " + e.what());
    }
    ck.step = header.at("step").get<int64_t>();
    ck.meta_json = header.at("meta").dump();
    uint64_t expected = 0;
    for (const auto& t : header.at("tensors")) {
      NamedArray a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      const auto off = t.at("offset").get<uint64_t>();
      const auto nbytes = t.at("bytes").get<uint64_t>();
      const uint64_t count = nbytes / 4;
      if (off != expected * 4 || nbytes % 4 != 0 || static_cast<int64_t>(count) != shape_numel(a.shape)) {
        throw IoError(path.string() + ": inconsistent tensor directory at " + a.name);
      }
      a.data = r.f32(count);
      expected += count;
      ck.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (!r.done()) throw IoError(path.string() + ": trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace pixeldino
