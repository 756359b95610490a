#pragma once

#include <cstdint>
#include <vector>

#include "pixeldino/params.hpp"

namespace pixeldino {

struct AdamConfig {
  float lr = 3e-4f;
  float lr_min = 3e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Cosine decay from lr_max at step 0 to lr_min at total_steps, no warmup.
float cosine_lr(float lr_max, float lr_min, int64_t step, int64_t total_steps);

// Adam with bias correction. Moment buffers are kept in the same order as the
// parameter set they were created for.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const ModelParams& params);

  // Applies one update using the grads stored on `params`. Parameters without
  // a grad buffer are treated as having zero gradient. Throws NumericError
  // naming the offending tensor on a non-finite gradient, before touching any
  // parameter.
  void step(ModelParams& params, float lr, const AdamConfig& config);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace pixeldino
