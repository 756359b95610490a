#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pixeldino/tensor.hpp"
#include "pixeldino/unet.hpp"

namespace pixeldino {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// Checkpoint file layout (integers little-endian):
//   8 bytes  magic "RTSCKPT1"
//   4 bytes  uint32 length L of the JSON header
//   L bytes  JSON {version, model, step, meta, tensors: [{name, shape, offset, bytes}]}
//   payload  float32 arrays; byte offsets are relative to the payload start
// `meta_json` is an arbitrary JSON object owned by the caller.
struct Checkpoint {
  UNetConfig model;
  int64_t step = 0;
  std::string meta_json = "{}";
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

// Atomic: written to a temporary sibling, then renamed.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Throws IoError on a malformed, truncated or inconsistent file.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace pixeldino
