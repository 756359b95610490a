#include "pixeldino/params.hpp"

#include <algorithm>
#include <cstring>

#include "pixeldino/errors.hpp"

namespace pixeldino {

void ModelParams::add(std::string name, Tensor tensor) {
  if (contains(name)) throw UsageError("duplicate parameter name " + name);
  entries_.emplace_back(std::move(name), std::move(tensor));
}

bool ModelParams::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& ModelParams::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return e.second;
  }
  throw UsageError("unknown parameter " + name);
}

Tensor& ModelParams::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
}

int64_t ModelParams::scalar_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& [name, t] : entries_) {
    out.add(name, Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, t.requires_grad()));
  }
  return out;
}

bool ModelParams::same_structure(const ModelParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
  }
  return true;
}

bool ModelParams::bitwise_equal(const ModelParams& other) const {
  if (!same_structure(other)) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    auto a = entries_[i].second.data();
    auto b = other.entries_[i].second.data();
    if (std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) return false;
  }
  return true;
}

void ModelParams::zero_grads() {
  for (auto& e : entries_) e.second.clear_grad();
}

void ModelParams::set_requires_grad(bool value) {
  for (auto& e : entries_) e.second.set_requires_grad(value);
}

void ema_blend(ModelParams& target, const ModelParams& source, float momentum) {
  if (!target.same_structure(source)) throw UsageError("ema_blend: parameter sets differ in structure");
  if (momentum == 1.0f) return;
  const float keep = momentum;
  const float mix = 1.0f - momentum;
  auto it = source.begin();
  for (auto& [name, t] : target) {
    auto dst = t.mutable_data();
    auto src = it->second.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = keep * dst[i] + mix * src[i];
    ++it;
  }
}

}  // namespace pixeldino
