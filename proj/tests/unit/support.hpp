#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pixeldino/config.hpp"
#include "pixeldino/synthetic.hpp"
#include "pixeldino/tensor.hpp"
#include "pixeldino/trainer.hpp"

namespace pixeldino::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

Tensor tensor(Shape shape, std::vector<float> values, bool requires_grad = false);
std::vector<float> values(const Tensor& t);
std::vector<float> grad_values(const Tensor& t);

// Small synthetic data set (48 px tiles) written under `dir`.
SyntheticConfig tiny_synthetic(uint64_t seed = 3);
GeneratedStores generate_tiny(const std::filesystem::path& dir, uint64_t seed = 3);

// Run config over the tiny data set with a small model; `method` by name.
std::string tiny_run_json(const std::filesystem::path& data_root, const std::string& method, int64_t steps,
                          const std::string& extra = "");
RunConfig tiny_run(const std::filesystem::path& data_root, const std::string& method, int64_t steps,
                   const std::string& extra = "");

TrainOptions options(const std::filesystem::path& out_dir, bool resume = false, int64_t halt_after = -1);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace pixeldino::testing
