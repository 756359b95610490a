#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pixeldino/augment.hpp"
#include "pixeldino/optim.hpp"
#include "pixeldino/synthetic.hpp"
#include "pixeldino/unet.hpp"

namespace pixeldino {

enum class Method { kBaseline, kBaselineAug, kFixMatchSeg, kPixelDino };

const char* method_name(Method m);
// Throws ConfigError listing the valid names.
Method parse_method(std::string_view name);

struct PixelDinoConfig {
  float beta = 0.1f;
  float tau = 0.06f;
  float teacher_momentum = 0.996f;
  float center_momentum = 0.9f;
  int64_t rts_channel = 0;
};

struct FixMatchConfig {
  float threshold = 0.9f;
  float beta = 0.1f;
};

struct DataConfig {
  std::string root;  // directory holding the stores; relative paths resolve against the working directory
  std::string labelled = "labelled";
  std::string unlabelled = "unlabelled";
  std::vector<std::string> eval{"eval"};
  int64_t patch_size = 192;
  int64_t batch_size_labelled = 8;
  int64_t batch_size_unlabelled = 8;
  int64_t eval_batch_size = 16;
  int64_t prefetch = 4;
  int64_t workers = 1;

  std::filesystem::path store_path(const std::string& name) const;
};

struct RunConfig {
  Method method = Method::kPixelDino;
  uint64_t seed = 0;
  int64_t steps = 1000;
  int64_t eval_interval = 250;
  int64_t log_interval = 50;
  int64_t checkpoint_interval = 0;  // 0 means eval_interval
  UNetConfig model;
  DataConfig data;
  AugmentConfig augment;
  AdamConfig optim;
  PixelDinoConfig pixeldino;
  FixMatchConfig fixmatch;

  std::string source_text;  // exact bytes the config was parsed from

  bool semi_supervised() const { return method == Method::kFixMatchSeg || method == Method::kPixelDino; }
  bool augments_labelled() const { return method != Method::kBaseline; }
  int64_t effective_checkpoint_interval() const { return checkpoint_interval > 0 ? checkpoint_interval : eval_interval; }

  // Cross-section checks; throws ConfigError.
  void validate() const;
};

// Strict parsing: unknown keys and wrong types raise ConfigError naming the
// offending key path (e.g. "augment.warp_sigmaa").
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);

SyntheticConfig parse_synthetic_config(std::string_view json_text);
SyntheticConfig load_synthetic_config(const std::filesystem::path& path);
std::string synthetic_config_to_json(const SyntheticConfig& config);

std::string model_config_to_json(const UNetConfig& config);
UNetConfig parse_model_config(std::string_view json_text);

}  // namespace pixeldino
