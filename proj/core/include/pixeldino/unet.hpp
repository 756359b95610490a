#pragma once

#include <cstdint>

#include "pixeldino/params.hpp"
#include "pixeldino/tensor.hpp"

namespace pixeldino {

struct UNetConfig {
  int in_channels = 4;
  int base_width = 16;
  int depth = 3;
  int out_channels = 16;
  // Upper bound on group-norm groups; each layer uses the largest divisor of
  // its channel count not exceeding this.
  int norm_groups = 8;

  // Throws ConfigError on invalid values.
  void validate() const;
  int64_t spatial_multiple() const { return int64_t{1} << depth; }
  bool operator==(const UNetConfig&) const = default;
};

int group_count(int channels, int max_groups);

// He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit norm gains.
// Deterministic in (config, seed).
ModelParams init_params(const UNetConfig& config, uint64_t seed);

// Returns [N, out_channels, H, W] logits. H and W must be divisible by
// 2^depth; violations throw ConfigError before any computation.
Tensor unet_forward(const UNetConfig& config, const ModelParams& params, const Tensor& input);

}  // namespace pixeldino
