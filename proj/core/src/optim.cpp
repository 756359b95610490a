#include "pixeldino/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pixeldino/errors.hpp"

namespace pixeldino {

float cosine_lr(float lr_max, float lr_min, int64_t step, int64_t total_steps) {
  if (total_steps <= 0) return lr_max;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  return static_cast<float>(lr_min + (lr_max - lr_min) * cosine);
}

Adam::Adam(const ModelParams& params) {
  for (const auto& [name, t] : params) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
  }
}

void Adam::step(ModelParams& params, float lr, const AdamConfig& config) {
  if (params.size() != m_.size()) throw UsageError("Adam: parameter set does not match moment buffers");
  size_t i = 0;
  for (const auto& [name, t] : params) {
    if (static_cast<int64_t>(m_[i].size()) != t.numel()) throw UsageError("Adam: moment shape mismatch for " + name);
    if (t.has_grad()) require_finite(t.grad(), "gradient of " + name);
    ++i;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(config.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(config.beta2), static_cast<double>(t_));
  const float step_size = static_cast<float>(lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  i = 0;
  for (auto& [name, t] : params) {
    auto& m = m_[i];
    auto& v = v_[i];
    auto p = t.mutable_data();
    const bool has = t.has_grad();
    auto g = t.grad();
    for (size_t j = 0; j < p.size(); ++j) {
      const float gj = has ? g[j] : 0.0f;
      m[j] = config.beta1 * m[j] + (1.0f - config.beta1) * gj;
      v[j] = config.beta2 * v[j] + (1.0f - config.beta2) * gj * gj;
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) / bc2_sqrt + config.eps);
    }
    ++i;
  }
}

}  // namespace pixeldino
