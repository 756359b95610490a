#pragma once

#include <cstdint>
#include <vector>

#include "pixeldino/tensor.hpp"

// Differentiable primitives. Image tensors are NCHW. Every op validates
// shapes (DimensionError), never mutates its inputs, checks its output for
// NaN/Inf (NumericError), and records a backward rule on the active tape.
namespace pixeldino::ops {

// Cross-correlation with square kernels. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

Tensor relu(const Tensor& x);
Tensor max_pool_2x2(const Tensor& x);

// While alive, relu and max_pool_2x2 on this thread fold their branch
// decisions (active units, window argmaxes) into hash(). Two forwards with
// equal hashes evaluated the same linear piece. Scopes nest.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  uint64_t hash() const { return hash_; }
  void fold(uint64_t v) { hash_ = (hash_ ^ v) * 1099511628211ull; }

 private:
  uint64_t hash_ = 1469598103934665603ull;
  BranchTrace* prev_ = nullptr;
};
// Half-pixel-centre bilinear interpolation with edge clamping.
Tensor bilinear_upsample_2x(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& parts);
// Per-sample normalisation over channel groups with a per-channel affine.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, float eps = 1e-5f);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, float s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor square(const Tensor& a);

// Softmax over dim 1 of an [N,K,H,W] tensor (max-subtracted).
Tensor softmax_channel(const Tensor& x);

inline constexpr float kLogEpsilon = 1e-8f;

// Weighted mean over pixels of -sum_k target * log(pred + 1e-8).
// `target` is a constant (no gradient flows into it). `weight` is an optional
// [N,H,W] nonnegative map; with total weight 0 the loss is exactly 0.
Tensor cross_entropy_soft(const Tensor& pred_prob, const Tensor& target_prob, const Tensor& weight = {});

// Two-class cross-entropy from [N,K,H,W] logits where channel `fg_channel`
// is the foreground and the remaining probability mass is background.
// `mask` holds 0/1 per pixel as [N,H,W]; `weight` as above. Computed in logit
// space, so no epsilon is involved. For K=2 this is ordinary cross-entropy.
Tensor foreground_cross_entropy(const Tensor& logits, int fg_channel, const Tensor& mask, const Tensor& weight = {});

}  // namespace pixeldino::ops
