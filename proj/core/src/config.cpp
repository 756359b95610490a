#include "pixeldino/config.hpp"

#include <nlohmann/json.hpp>
#include <set>

#include "pixeldino/errors.hpp"
#include "pixeldino/tile.hpp"

namespace pixeldino {

using nlohmann::json;

namespace {

// Reads fields of one JSON object and rejects keys that were never read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config key " + key_path(key) + " has the wrong type");
    }
  }

  void get_strings(const char* key, std::vector<std::string>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_array()) throw ConfigError("config key " + key_path(key) + " must be an array of strings");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_string()) throw ConfigError("config key " + key_path(key) + " must be an array of strings");
      out.push_back(v.get<std::string>());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key: " + key_path(it.key()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "config section " + path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json parse_text(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed JSON config: ") + e.what());
  }
}

void read_model(Section& s, UNetConfig& m) {
  s.get("in_channels", m.in_channels);
  s.get("base_width", m.base_width);
  s.get("depth", m.depth);
  s.get("out_channels", m.out_channels);
  s.get("norm_groups", m.norm_groups);
  s.finish();
}

void read_augment(Section& s, AugmentConfig& a) {
  s.get("hflip_prob", a.hflip_prob);
  s.get("vflip_prob", a.vflip_prob);
  s.get("quarter_turns", a.quarter_turns);
  s.get("brightness_prob", a.brightness_prob);
  s.get("brightness_max", a.brightness_max);
  s.get("gamma_prob", a.gamma_prob);
  s.get("gamma_min", a.gamma_min);
  s.get("gamma_max", a.gamma_max);
  s.get("contrast_prob", a.contrast_prob);
  s.get("contrast_min", a.contrast_min);
  s.get("contrast_max", a.contrast_max);
  s.get("rotate_prob", a.rotate_prob);
  s.get("rotate_max_deg", a.rotate_max_deg);
  s.get("warp_prob", a.warp_prob);
  s.get("warp_sigma", a.warp_sigma);
  s.get("warp_max_magnitude", a.warp_max_magnitude);
  s.get("blur_prob", a.blur_prob);
  s.get("blur_sigma_max", a.blur_sigma_max);
  s.get("min_valid_fraction", a.min_valid_fraction);
  s.get("max_resample", a.max_resample);
  s.finish();
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::kBaseline: return "baseline";
    case Method::kBaselineAug: return "baseline_aug";
    case Method::kFixMatchSeg: return "fixmatchseg";
    case Method::kPixelDino: return "pixeldino";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::kBaseline, Method::kBaselineAug, Method::kFixMatchSeg, Method::kPixelDino}) {
    if (name == method_name(m)) return m;
  }
  throw ConfigError("invalid method '" + std::string(name) +
                    "'; valid methods: baseline, baseline_aug, fixmatchseg, pixeldino");
}

std::filesystem::path DataConfig::store_path(const std::string& name) const {
  return std::filesystem::path(root) / name;
}

void RunConfig::validate() const {
  model.validate();
  augment.validate();
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (steps < 0) fail("steps must be >= 0");
  if (eval_interval < 1) fail("eval_interval must be >= 1");
  if (log_interval < 1) fail("log_interval must be >= 1");
  if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
  if (data.patch_size < 1 || data.patch_size % model.spatial_multiple() != 0) {
    fail("data.patch_size must be a positive multiple of 2^model.depth = " + std::to_string(model.spatial_multiple()));
  }
  if (data.batch_size_labelled < 1) fail("data.batch_size_labelled must be >= 1");
  if (semi_supervised() && data.batch_size_unlabelled < 1) fail("data.batch_size_unlabelled must be >= 1");
  if (data.eval_batch_size < 1) fail("data.eval_batch_size must be >= 1");
  if (data.prefetch < 1) fail("data.prefetch must be >= 1");
  if (data.workers < 1) fail("data.workers must be >= 1");
  if (data.eval.empty()) fail("data.eval must list at least one store");
  if (!(optim.lr > 0.0) || !(optim.lr_min >= 0.0) || optim.lr_min > optim.lr) fail("optim: need 0 <= lr_min <= lr, lr > 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    fail("optim: beta1 and beta2 must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0)) fail("optim.eps must be > 0");
  const auto& p = pixeldino;
  if (!(p.tau > 0.0f)) fail("pixeldino.tau must be > 0");
  if (!(p.beta >= 0.0f)) fail("pixeldino.beta must be >= 0");
  if (!(p.teacher_momentum >= 0.0f && p.teacher_momentum <= 1.0f)) fail("pixeldino.teacher_momentum must lie in [0, 1]");
  if (!(p.center_momentum >= 0.0f && p.center_momentum <= 1.0f)) fail("pixeldino.center_momentum must lie in [0, 1]");
  if (p.rts_channel < 0 || p.rts_channel >= model.out_channels) fail("pixeldino.rts_channel must index a model output channel");
  if (model.out_channels < 2) fail("model.out_channels must be >= 2");
  if (!(fixmatch.beta >= 0.0f)) fail("fixmatch.beta must be >= 0");
  if (!(fixmatch.threshold >= 0.0f)) fail("fixmatch.threshold must be >= 0");
}

RunConfig parse_run_config(std::string_view text) {
  const json j = parse_text(text);
  RunConfig c;
  c.source_text = std::string(text);
  Section top(j, "");
  std::string method = "pixeldino";
  top.get("method", method);
  c.method = parse_method(method);
  top.get("seed", c.seed);
  top.get("steps", c.steps);
  top.get("eval_interval", c.eval_interval);
  top.get("log_interval", c.log_interval);
  top.get("checkpoint_interval", c.checkpoint_interval);

  // K defaults to 16 pseudo-classes for PixelDINO and to 2 for the other methods.
  c.model.out_channels = c.method == Method::kPixelDino ? 16 : 2;
  if (const json* m = top.child("model")) {
    Section s(*m, "model");
    read_model(s, c.model);
  }
  if (const json* d = top.child("data")) {
    Section s(*d, "data");
    s.get("root", c.data.root);
    s.get("labelled", c.data.labelled);
    s.get("unlabelled", c.data.unlabelled);
    s.get_strings("eval", c.data.eval);
    s.get("patch_size", c.data.patch_size);
    s.get("batch_size_labelled", c.data.batch_size_labelled);
    s.get("batch_size_unlabelled", c.data.batch_size_unlabelled);
    s.get("eval_batch_size", c.data.eval_batch_size);
    s.get("prefetch", c.data.prefetch);
    s.get("workers", c.data.workers);
    s.finish();
  }
  if (const json* a = top.child("augment")) {
    Section s(*a, "augment");
    read_augment(s, c.augment);
  }
  if (const json* o = top.child("optim")) {
    Section s(*o, "optim");
    s.get("lr", c.optim.lr);
    s.get("lr_min", c.optim.lr_min);
    s.get("beta1", c.optim.beta1);
    s.get("beta2", c.optim.beta2);
    s.get("eps", c.optim.eps);
    s.finish();
  }
  if (const json* p = top.child("pixeldino")) {
    Section s(*p, "pixeldino");
    s.get("beta", c.pixeldino.beta);
    s.get("tau", c.pixeldino.tau);
    s.get("teacher_momentum", c.pixeldino.teacher_momentum);
    s.get("center_momentum", c.pixeldino.center_momentum);
    s.get("rts_channel", c.pixeldino.rts_channel);
    s.finish();
  }
  if (const json* f = top.child("fixmatch")) {
    Section s(*f, "fixmatch");
    s.get("threshold", c.fixmatch.threshold);
    s.get("beta", c.fixmatch.beta);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(text);
}

SyntheticConfig parse_synthetic_config(std::string_view text) {
  const json j = parse_text(text);
  SyntheticConfig c;
  Section s(j, "");
  s.get("seed", c.seed);
  s.get("tile_size", c.tile_size);
  s.get("channels", c.channels);
  s.get("labelled_tiles", c.labelled_tiles);
  s.get("unlabelled_tiles", c.unlabelled_tiles);
  s.get("eval_tiles", c.eval_tiles);
  s.get("eval_in_tiles", c.eval_in_tiles);
  s.get("target_density", c.target_density);
  s.get("target_area_min", c.target_area_min);
  s.get("target_area_max", c.target_area_max);
  s.get("target_contrast", c.target_contrast);
  s.get("noise_octaves", c.noise_octaves);
  s.get("noise_scale", c.noise_scale);
  s.get("texture_amplitude", c.texture_amplitude);
  s.get("regions_per_tile", c.regions_per_tile);
  s.get("region_types", c.region_types);
  s.get("sensor_noise", c.sensor_noise);
  s.get("shift", c.shift);
  s.finish();
  c.validate();
  return c;
}

SyntheticConfig load_synthetic_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_synthetic_config(text);
}

std::string synthetic_config_to_json(const SyntheticConfig& c) {
  json j = {{"seed", c.seed},
            {"tile_size", c.tile_size},
            {"channels", c.channels},
            {"labelled_tiles", c.labelled_tiles},
            {"unlabelled_tiles", c.unlabelled_tiles},
            {"eval_tiles", c.eval_tiles},
            {"eval_in_tiles", c.eval_in_tiles},
            {"target_density", c.target_density},
            {"target_area_min", c.target_area_min},
            {"target_area_max", c.target_area_max},
            {"target_contrast", c.target_contrast},
            {"noise_octaves", c.noise_octaves},
            {"noise_scale", c.noise_scale},
            {"texture_amplitude", c.texture_amplitude},
            {"regions_per_tile", c.regions_per_tile},
            {"region_types", c.region_types},
            {"sensor_noise", c.sensor_noise},
            {"shift", c.shift}};
  return j.dump();
}

std::string model_config_to_json(const UNetConfig& c) {
  json j = {{"in_channels", c.in_channels},
            {"base_width", c.base_width},
            {"depth", c.depth},
            {"out_channels", c.out_channels},
            {"norm_groups", c.norm_groups}};
  return j.dump();
}

UNetConfig parse_model_config(std::string_view text) {
  const json j = parse_text(text);
  UNetConfig c;
  Section s(j, "model");
  read_model(s, c);
  c.validate();
  return c;
}

}  // namespace pixeldino
