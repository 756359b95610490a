#include "pixeldino/tensor.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include "pixeldino/errors.hpp"

namespace pixeldino {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<float>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::dim(int i) const {
  const auto& s = impl_->shape;
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) throw DimensionError("dimension index out of range");
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (impl_->data.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(impl_->shape));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::is_leaf() const { return impl_->node < 0; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data, false); }

Tape::~Tape() { clear(); }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void(Node&)> backward) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  Node node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.impl_);
  node.output = output.impl_;
  node.backward = std::move(backward);
  output.impl_->requires_grad = true;
  output.impl_->tape = tape;
  output.impl_->node = static_cast<int64_t>(tape->nodes_.size());
  tape->nodes_.push_back(std::move(node));
}

float* Tape::accumulate_target(detail::TensorImpl& input) {
  if (!input.requires_grad) return nullptr;
  if (input.grad.empty()) input.grad.assign(input.data.size(), 0.0f);
  return input.grad.data();
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  auto& li = loss.impl();
  if (li.data.size() != 1) throw UsageError("backward requires a scalar loss, got shape " + shape_str(li.shape));
  if (li.tape != this || li.node < 0 || li.node >= static_cast<int64_t>(nodes_.size())) {
    throw UsageError("backward on a tensor that is not recorded on this tape (detached?)");
  }
  require_finite(li.data, "loss");
  li.grad.assign(1, 1.0f);
  for (int64_t i = li.node; i >= 0; --i) {
    Node& node = nodes_[static_cast<size_t>(i)];
    if (node.output->grad.empty()) continue;
    node.backward(node);
    // Non-leaf gradients are transient.
    node.output->grad.clear();
    node.output->grad.shrink_to_fit();
  }
  for (auto& node : nodes_) {
    for (auto& in : node.inputs) {
      if (in->requires_grad && in->node < 0) {
        if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0f);
        require_finite(in->grad, "gradient of leaf " + shape_str(in->shape));
      }
    }
  }
  clear();
}

void Tape::clear() {
  for (auto& node : nodes_) {
    node.output->tape = nullptr;
    node.output->node = -1;
    node.output->requires_grad = false;
    node.output->grad.clear();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void require_finite(std::span<const float> values, const std::string& what) {
  // Exponent all ones means Inf or NaN; the bit test vectorises.
  uint32_t bad = 0;
  for (float v : values) {
    const auto b = std::bit_cast<uint32_t>(v);
    bad |= static_cast<uint32_t>((b & 0x7f800000u) == 0x7f800000u);
  }
  if (!bad) return;
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at flat index " << i << " in " << what;
      throw NumericError(os.str());
    }
  }
}

}  // namespace pixeldino
