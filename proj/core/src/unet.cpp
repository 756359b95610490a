#include "pixeldino/unet.hpp"

#include <cmath>
#include <string>

#include "pixeldino/errors.hpp"
#include "pixeldino/ops.hpp"
#include "pixeldino/rng.hpp"

namespace pixeldino {

void UNetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
  if (base_width < 1) throw ConfigError("model.base_width must be >= 1");
  if (depth < 1 || depth > 8) throw ConfigError("model.depth must be in [1, 8]");
  if (out_channels < 2) throw ConfigError("model.out_channels must be >= 2");
  if (norm_groups < 1) throw ConfigError("model.norm_groups must be >= 1");
}

int group_count(int channels, int max_groups) {
  for (int g = std::min(channels, max_groups); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

namespace {

struct Builder {
  const UNetConfig& config;
  uint64_t seed;
  ModelParams params;
  uint64_t index = 0;

  void conv(const std::string& name, int cin, int cout, int k) {
    const int fan_in = cin * k * k;
    const double stddev = std::sqrt(2.0 / fan_in);
    Rng rng = make_rng(seed, Stream::kInit, {index++});
    std::vector<float> w(static_cast<size_t>(cout) * cin * k * k);
    for (auto& v : w) v = static_cast<float>(normal(rng, 0.0, stddev));
    params.add(name + ".weight", Tensor::from({cout, cin, k, k}, std::move(w), true));
    params.add(name + ".bias", Tensor::zeros({cout}, true));
  }

  void norm(const std::string& name, int channels) {
    params.add(name + ".gamma", Tensor::full({channels}, 1.0f, true));
    params.add(name + ".beta", Tensor::zeros({channels}, true));
  }

  void block(const std::string& name, int cin, int cout) {
    conv(name + ".conv1", cin, cout, 3);
    norm(name + ".norm1", cout);
    conv(name + ".conv2", cout, cout, 3);
    norm(name + ".norm2", cout);
  }
};

int width_at(const UNetConfig& c, int level) { return c.base_width << level; }

Tensor conv_layer(const ModelParams& p, const std::string& name, const Tensor& x, int padding) {
  return ops::conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), 1, padding);
}

Tensor conv_block(const UNetConfig& c, const ModelParams& p, const std::string& name, const Tensor& x) {
  Tensor h = conv_layer(p, name + ".conv1", x, 1);
  const int g = group_count(static_cast<int>(h.dim(1)), c.norm_groups);
  h = ops::relu(ops::group_norm(h, p.at(name + ".norm1.gamma"), p.at(name + ".norm1.beta"), g));
  h = conv_layer(p, name + ".conv2", h, 1);
  return ops::relu(ops::group_norm(h, p.at(name + ".norm2.gamma"), p.at(name + ".norm2.beta"), g));
}

}  // namespace

ModelParams init_params(const UNetConfig& config, uint64_t seed) {
  config.validate();
  Builder b{config, seed, {}};
  b.block("enc0", config.in_channels, width_at(config, 0));
  for (int l = 1; l <= config.depth; ++l) {
    b.block("enc" + std::to_string(l), width_at(config, l - 1), width_at(config, l));
  }
  for (int l = config.depth - 1; l >= 0; --l) {
    const std::string name = "dec" + std::to_string(l);
    b.conv(name + ".up", width_at(config, l + 1), width_at(config, l), 1);
    b.block(name, 2 * width_at(config, l), width_at(config, l));
  }
  b.conv("head", width_at(config, 0), config.out_channels, 1);
  return std::move(b.params);
}

Tensor unet_forward(const UNetConfig& config, const ModelParams& params, const Tensor& input) {
  config.validate();
  if (!input.defined() || input.rank() != 4) throw DimensionError("unet_forward: input must be [N,C,H,W]");
  if (input.dim(1) != config.in_channels) {
    throw DimensionError("unet_forward: input has " + std::to_string(input.dim(1)) + " channels, model expects " +
                         std::to_string(config.in_channels));
  }
  const int64_t mult = config.spatial_multiple();
  if (input.dim(2) % mult != 0 || input.dim(3) % mult != 0) {
    throw ConfigError("unet_forward: spatial size " + std::to_string(input.dim(2)) + "x" +
                      std::to_string(input.dim(3)) + " not divisible by 2^depth = " + std::to_string(mult));
  }
  std::vector<Tensor> skips;
  Tensor h = conv_block(config, params, "enc0", input);
  for (int l = 1; l <= config.depth; ++l) {
    skips.push_back(h);
    h = conv_block(config, params, "enc" + std::to_string(l), ops::max_pool_2x2(h));
  }
  for (int l = config.depth - 1; l >= 0; --l) {
    const std::string name = "dec" + std::to_string(l);
    Tensor up = conv_layer(params, name + ".up", ops::bilinear_upsample_2x(h), 0);
    h = conv_block(config, params, name, ops::concat_channels({skips[static_cast<size_t>(l)], up}));
  }
  return conv_layer(params, "head", h, 0);
}

}  // namespace pixeldino
