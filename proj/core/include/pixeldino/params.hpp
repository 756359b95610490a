#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pixeldino/tensor.hpp"

namespace pixeldino {

// Named weight tensors in a fixed insertion order. Two parameter sets built
// from the same model config have identical names and shapes in the same
// order, which is what EMA blending and checkpointing rely on.
class ModelParams {
 public:
  void add(std::string name, Tensor tensor);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  int64_t scalar_count() const;

  // Deep copy with independent storage; requires_grad flags are preserved.
  ModelParams clone() const;

  bool same_structure(const ModelParams& other) const;
  bool bitwise_equal(const ModelParams& other) const;

  void zero_grads();
  void set_requires_grad(bool value);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// target <- momentum * target + (1 - momentum) * source, per element.
void ema_blend(ModelParams& target, const ModelParams& source, float momentum);

}  // namespace pixeldino
