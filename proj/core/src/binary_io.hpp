#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pixeldino/errors.hpp"

// Little-endian framing helpers shared by the tile and checkpoint formats.
namespace pixeldino::binio {

inline void append_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void append_f32(std::string& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  } else {
    for (float f : values) append_u32(out, std::bit_cast<uint32_t>(f));
  }
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  std::string_view take(size_t n) {
    if (n > bytes_.size() - pos_) throw IoError(name_ + ": truncated file");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  uint32_t u32() {
    auto s = take(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  std::vector<float> f32(size_t count) {
    auto s = take(count * 4);
    std::vector<float> out(count);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), s.data(), s.size());
    } else {
      for (size_t i = 0; i < count; ++i) {
        uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[4 * i + b])) << (8 * b);
        out[i] = std::bit_cast<float>(v);
      }
    }
    return out;
  }

  size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::string name_;
  size_t pos_ = 0;
};

}  // namespace pixeldino::binio
