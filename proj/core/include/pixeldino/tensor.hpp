#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pixeldino {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a backward pass populates it
  bool requires_grad = false;
  Tape* tape = nullptr;  // set while the producing node is alive on a tape
  int64_t node = -1;
};

}  // namespace detail

// Dense row-major float32 tensor. Copies share storage; data is treated as
// immutable once the tensor is used as an op input. Only leaf parameters are
// updated in place (by the optimizer and EMA), and never while a tape that
// references them is live.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int i) const;
  int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  // Drops the gradient buffer entirely (has_grad() becomes false).
  void clear_grad();

  // Fresh storage, no gradient, not on any tape.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Internal access for op implementations.
  detail::TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

// Ordered record of differentiable operations for one forward pass. Recording
// happens into the tape made active on the current thread by TapeScope; with no
// active tape, ops run without recording (no-grad mode).
class Tape {
 public:
  struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    // Reads output->grad and accumulates into the grads of inputs that
    // require them (see Tape::accumulate_target).
    std::function<void(Node&)> backward;
  };

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Records an op if a tape is active and any input requires grad; marks the
  // output as requiring grad in that case.
  static void record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
                     std::function<void(Node&)> backward);

  // Returns the buffer to accumulate an input's gradient into, allocating a
  // zero buffer on first use. Returns nullptr if that input needs no grad.
  static float* accumulate_target(detail::TensorImpl& input);

  // Reverse-mode sweep from a scalar loss recorded on this tape. Leaf grads
  // accumulate (+=). The tape is consumed.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  void clear();

 private:
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the current thread within its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Throws NumericError naming `what` if any value is NaN/Inf.
void require_finite(std::span<const float> values, const std::string& what);

}  // namespace pixeldino
