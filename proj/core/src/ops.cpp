#include "pixeldino/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "pixeldino/errors.hpp"

namespace pixeldino::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using detail::TensorImpl;

void require_rank(const Tensor& t, int rank, const char* op, const char* arg) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor for " + arg);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

thread_local BranchTrace* g_branch_trace = nullptr;

Tensor finish(const char* op, Tensor out) {
  require_finite(out.data(), std::string("output of ") + op);
  return out;
}

struct ConvGeometry {
  int64_t n, cin, h, w, cout, k, ho, wo;
  int stride, pad;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  int64_t col_rows() const { return cin * k * k; }
  int64_t col_cols() const { return ho * wo; }
};

void im2col(const float* x, const ConvGeometry& g, float* cols) {
  const int64_t ncols = g.col_cols();
  for (int64_t c = 0; c < g.cin; ++c) {
    const float* xc = x + c * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        float* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          float* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = xc + iy * g.w;
          if (g.stride == 1) {
            const int64_t shift = kx - g.pad;
            const int64_t lo = std::clamp<int64_t>(-shift, 0, g.wo);
            const int64_t hi = std::clamp<int64_t>(g.w - shift, 0, g.wo);
            std::fill(dst, dst + lo, 0.0f);
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + std::max(hi, lo), dst + g.wo, 0.0f);
          } else {
            for (int64_t ox = 0; ox < g.wo; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvGeometry& g, float* x) {
  const int64_t ncols = g.col_cols();
  for (int64_t c = 0; c < g.cin; ++c) {
    float* xc = x + c * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const float* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const float* src = row + oy * g.wo;
          float* dst = xc + iy * g.w;
          if (g.stride == 1) {
            const int64_t shift = kx - g.pad;
            const int64_t lo = std::clamp<int64_t>(-shift, 0, g.wo);
            const int64_t hi = std::clamp<int64_t>(g.w - shift, 0, g.wo);
            for (int64_t ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            continue;
          }
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  return conv2d(input, kernel, Tensor{}, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin) {
    throw DimensionError("conv2d: input has " + std::to_string(g.cin) + " channels but kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  if (kernel.dim(3) != g.k || g.k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout");
  }
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) throw DimensionError("conv2d: kernel larger than input");
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;

  Tensor out = Tensor::zeros({g.n, g.cout, g.ho, g.wo});
  const float* xd = input.data().data();
  float* yd = out.mutable_data().data();
  ConstMap wmat(kernel.data().data(), g.cout, g.col_rows());
  std::vector<float> cols(g.pointwise() ? 0 : static_cast<size_t>(g.col_rows() * g.col_cols()));
  for (int64_t n = 0; n < g.n; ++n) {
    const float* xn = xd + n * g.cin * g.h * g.w;
    const float* colp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols.data());
      colp = cols.data();
    }
    MutMap ymat(yd + n * g.cout * g.col_cols(), g.cout, g.col_cols());
    ymat.noalias() = wmat * ConstMap(colp, g.col_rows(), g.col_cols());
    if (bias.defined()) {
      const float* b = bias.data().data();
      for (int64_t c = 0; c < g.cout; ++c) ymat.row(c).array() += b[c];
    }
  }

  const bool has_bias = bias.defined();
  std::vector<Tensor> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  Tape::record("conv2d", std::move(inputs), out, [g, has_bias](Tape::Node& node) {
    TensorImpl& x = *node.inputs[0];
    TensorImpl& w = *node.inputs[1];
    const float* gy = node.output->grad.data();
    float* gx = Tape::accumulate_target(x);
    float* gw = Tape::accumulate_target(w);
    float* gb = has_bias ? Tape::accumulate_target(*node.inputs[2]) : nullptr;
    ConstMap wmat(w.data.data(), g.cout, g.col_rows());
    std::vector<float> cols(g.pointwise() ? 0 : static_cast<size_t>(g.col_rows() * g.col_cols()));
    std::vector<float> gcols(gx && !g.pointwise() ? cols.size() : 0);
    for (int64_t n = 0; n < g.n; ++n) {
      ConstMap gymat(gy + n * g.cout * g.col_cols(), g.cout, g.col_cols());
      const float* xn = x.data.data() + n * g.cin * g.h * g.w;
      if (gw) {
        const float* colp = xn;
        if (!g.pointwise()) {
          im2col(xn, g, cols.data());
          colp = cols.data();
        }
        MutMap gwmat(gw, g.cout, g.col_rows());
        gwmat.noalias() += gymat * ConstMap(colp, g.col_rows(), g.col_cols()).transpose();
      }
      if (gb) {
        for (int64_t c = 0; c < g.cout; ++c) gb[c] += static_cast<float>(gymat.row(c).cast<double>().sum());
      }
      if (gx) {
        float* gxn = gx + n * g.cin * g.h * g.w;
        if (g.pointwise()) {
          MutMap gxmat(gxn, g.cin, g.col_cols());
          gxmat.noalias() += wmat.transpose() * gymat;
        } else {
          MutMap gc(gcols.data(), g.col_rows(), g.col_cols());
          gc.noalias() = wmat.transpose() * gymat;
          col2im_add(gcols.data(), g, gxn);
        }
      }
    }
  });
  return finish("conv2d", std::move(out));
}

BranchTrace::BranchTrace() : prev_(g_branch_trace) { g_branch_trace = this; }
BranchTrace::~BranchTrace() { g_branch_trace = prev_; }

Tensor relu(const Tensor& x) {
  if (!x.defined()) throw DimensionError("relu: undefined input");
  std::vector<float> y(x.data().begin(), x.data().end());
  for (auto& v : y) v = v > 0.0f ? v : 0.0f;
  if (g_branch_trace) {
    for (size_t i = 0; i < y.size(); ++i) g_branch_trace->fold(y[i] > 0.0f ? i : ~i);
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  Tape::record("relu", {x}, out, [](Tape::Node& node) {
    float* gx = Tape::accumulate_target(*node.inputs[0]);
    if (!gx) return;
    const auto& xv = node.inputs[0]->data;
    const auto& gy = node.output->grad;
    for (size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0f) gx[i] += gy[i];
    }
  });
  return finish("relu", std::move(out));
}

Tensor max_pool_2x2(const Tensor& x) {
  require_rank(x, 4, "max_pool_2x2", "input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw DimensionError("max_pool_2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const int64_t ho = h / 2, wo = w / 2;
  Tensor out = Tensor::zeros({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * ho * wo));
  const float* xd = x.data().data();
  float* yd = out.mutable_data().data();
  for (int64_t p = 0; p < n * c; ++p) {
    const float* xp = xd + p * h * w;
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        int64_t best = (2 * oy) * w + 2 * ox;
        const int64_t cand[3] = {best + 1, best + w, best + w + 1};
        for (auto idx : cand) {
          if (xp[idx] > xp[best]) best = idx;
        }
        const int64_t o = p * ho * wo + oy * wo + ox;
        yd[o] = xp[best];
        (*argmax)[static_cast<size_t>(o)] = p * h * w + best;
        if (g_branch_trace) g_branch_trace->fold(static_cast<uint64_t>(p * h * w + best));
      }
    }
  }
  Tape::record("max_pool_2x2", {x}, out, [argmax](Tape::Node& node) {
    float* gx = Tape::accumulate_target(*node.inputs[0]);
    if (!gx) return;
    const auto& gy = node.output->grad;
    for (size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
  });
  return finish("max_pool_2x2", std::move(out));
}

namespace {

struct UpsampleTap {
  int64_t i0, i1;
  float w0, w1;
};

std::vector<UpsampleTap> upsample_taps(int64_t len) {
  std::vector<UpsampleTap> taps(static_cast<size_t>(2 * len));
  for (int64_t o = 0; o < 2 * len; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    const double fl = std::floor(src);
    const double frac = src - fl;
    const int64_t i0 = static_cast<int64_t>(fl);
    UpsampleTap t{};
    t.i0 = std::clamp<int64_t>(i0, 0, len - 1);
    t.i1 = std::clamp<int64_t>(i0 + 1, 0, len - 1);
    t.w0 = static_cast<float>(1.0 - frac);
    t.w1 = static_cast<float>(frac);
    taps[static_cast<size_t>(o)] = t;
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample_2x(const Tensor& x) {
  require_rank(x, 4, "bilinear_upsample_2x", "input");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t ho = 2 * h, wo = 2 * w;
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  Tensor out = Tensor::zeros({n, c, ho, wo});
  const float* xd = x.data().data();
  float* yd = out.mutable_data().data();
  for (int64_t p = 0; p < n * c; ++p) {
    const float* xp = xd + p * h * w;
    float* yp = yd + p * ho * wo;
    for (int64_t oy = 0; oy < ho; ++oy) {
      const auto& a = ty[static_cast<size_t>(oy)];
      const float* r0 = xp + a.i0 * w;
      const float* r1 = xp + a.i1 * w;
      for (int64_t ox = 0; ox < wo; ++ox) {
        const auto& b = tx[static_cast<size_t>(ox)];
        yp[oy * wo + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }
  Tape::record("bilinear_upsample_2x", {x}, out, [ty, tx, n, c, h, w](Tape::Node& node) {
    float* gx = Tape::accumulate_target(*node.inputs[0]);
    if (!gx) return;
    const int64_t ho = 2 * h, wo = 2 * w;
    const float* gy = node.output->grad.data();
    for (int64_t p = 0; p < n * c; ++p) {
      float* gp = gx + p * h * w;
      const float* gyp = gy + p * ho * wo;
      for (int64_t oy = 0; oy < ho; ++oy) {
        const auto& a = ty[static_cast<size_t>(oy)];
        float* r0 = gp + a.i0 * w;
        float* r1 = gp + a.i1 * w;
        for (int64_t ox = 0; ox < wo; ++ox) {
          const auto& b = tx[static_cast<size_t>(ox)];
          const float g = gyp[oy * wo + ox];
          r0[b.i0] += a.w0 * b.w0 * g;
          r0[b.i1] += a.w0 * b.w1 * g;
          r1[b.i0] += a.w1 * b.w0 * g;
          r1[b.i1] += a.w1 * b.w1 * g;
        }
      }
    }
  });
  return finish("bilinear_upsample_2x", std::move(out));
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels", "part");
  const int64_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int64_t ctotal = 0;
  std::vector<int64_t> chans;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw DimensionError("concat_channels: incompatible part " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    chans.push_back(p.dim(1));
    ctotal += p.dim(1);
  }
  const int64_t plane = h * w;
  Tensor out = Tensor::zeros({n, ctotal, h, w});
  float* yd = out.mutable_data().data();
  for (int64_t b = 0; b < n; ++b) {
    int64_t off = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      const float* src = parts[i].data().data() + b * chans[i] * plane;
      std::copy(src, src + chans[i] * plane, yd + (b * ctotal + off) * plane);
      off += chans[i];
    }
  }
  Tape::record("concat_channels", parts, out, [chans, n, ctotal, plane](Tape::Node& node) {
    const float* gy = node.output->grad.data();
    int64_t off = 0;
    for (size_t i = 0; i < chans.size(); ++i) {
      float* gx = Tape::accumulate_target(*node.inputs[i]);
      if (gx) {
        for (int64_t b = 0; b < n; ++b) {
          const float* src = gy + (b * ctotal + off) * plane;
          float* dst = gx + b * chans[i] * plane;
          for (int64_t j = 0; j < chans[i] * plane; ++j) dst[j] += src[j];
        }
      }
      off += chans[i];
    }
  });
  return finish("concat_channels", std::move(out));
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, float eps) {
  require_rank(x, 4, "group_norm", "input");
  require_rank(gamma, 1, "group_norm", "gamma");
  require_rank(beta, 1, "group_norm", "beta");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.dim(0) != c || beta.dim(0) != c) throw DimensionError("group_norm: affine size does not match channels");
  if (groups < 1 || c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  const int64_t cpg = c / groups;
  const int64_t m = cpg * hw;
  const bool recording = Tape::active() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto xhat = std::make_shared<std::vector<float>>(recording ? x.data().size() : 0);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(n * groups));
  Tensor out = Tensor::zeros(x.shape());
  const float* xd = x.data().data();
  const float* gm = gamma.data().data();
  const float* bt = beta.data().data();
  float* yd = out.mutable_data().data();
  Eigen::ArrayXf xh_buf(recording ? 0 : hw);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (b * c + g * cpg) * hw;
      const auto seg = Eigen::Map<const Eigen::ArrayXf>(xd + base, m).cast<double>();
      const double mu = seg.sum() / static_cast<double>(m);
      const double v = (seg - mu).square().sum() / static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(v + static_cast<double>(eps));
      (*inv_std)[static_cast<size_t>(b * groups + g)] = static_cast<float>(inv);
      for (int64_t ci = 0; ci < cpg; ++ci) {
        const int64_t ch = g * cpg + ci;
        const int64_t off = base + ci * hw;
        Eigen::Map<Eigen::ArrayXf> xh(recording ? xhat->data() + off : xh_buf.data(), hw);
        xh = ((Eigen::Map<const Eigen::ArrayXf>(xd + off, hw).cast<double>() - mu) * inv).cast<float>();
        Eigen::Map<Eigen::ArrayXf>(yd + off, hw) = xh * gm[ch] + bt[ch];
      }
    }
  }
  Tape::record("group_norm", {x, gamma, beta}, out, [xhat, inv_std, n, c, hw, groups, cpg, m](Tape::Node& node) {
    float* gx = Tape::accumulate_target(*node.inputs[0]);
    float* ggamma = Tape::accumulate_target(*node.inputs[1]);
    float* gbeta = Tape::accumulate_target(*node.inputs[2]);
    const float* gm = node.inputs[1]->data.data();
    const float* gy = node.output->grad.data();
    const auto& xh = *xhat;
    using ArrD = Eigen::Array<double, Eigen::Dynamic, 1>;
    if (ggamma || gbeta) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double sg = 0.0, sb = 0.0;
        for (int64_t b = 0; b < n; ++b) {
          const int64_t base = (b * c + ch) * hw;
          const auto g = Eigen::Map<const Eigen::ArrayXf>(gy + base, hw).cast<double>();
          sg += (g * Eigen::Map<const Eigen::ArrayXf>(xh.data() + base, hw).cast<double>()).sum();
          sb += g.sum();
        }
        if (ggamma) ggamma[ch] += static_cast<float>(sg);
        if (gbeta) gbeta[ch] += static_cast<float>(sb);
      }
    }
    if (!gx) return;
    ArrD gh(hw);
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t g = 0; g < groups; ++g) {
        const int64_t base = (b * c + g * cpg) * hw;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t ci = 0; ci < cpg; ++ci) {
          const int64_t off = base + ci * hw;
          gh = Eigen::Map<const Eigen::ArrayXf>(gy + off, hw).cast<double>() * static_cast<double>(gm[g * cpg + ci]);
          s1 += gh.sum();
          s2 += (gh * Eigen::Map<const Eigen::ArrayXf>(xh.data() + off, hw).cast<double>()).sum();
        }
        const double a = s1 / static_cast<double>(m);
        const double bb = s2 / static_cast<double>(m);
        const double inv = (*inv_std)[static_cast<size_t>(b * groups + g)];
        for (int64_t ci = 0; ci < cpg; ++ci) {
          const int64_t off = base + ci * hw;
          gh = Eigen::Map<const Eigen::ArrayXf>(gy + off, hw).cast<double>() * static_cast<double>(gm[g * cpg + ci]);
          Eigen::Map<Eigen::ArrayXf>(gx + off, hw) +=
              (inv * (gh - a - Eigen::Map<const Eigen::ArrayXf>(xh.data() + off, hw).cast<double>() * bb)).cast<float>();
        }
      }
    }
  });
  return finish("group_norm", std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> y(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (size_t i = 0; i < y.size(); ++i) y[i] += bd[i];
  Tensor out = Tensor::from(a.shape(), std::move(y));
  Tape::record("add", {a, b}, out, [](Tape::Node& node) {
    const auto& gy = node.output->grad;
    for (int k = 0; k < 2; ++k) {
      float* g = Tape::accumulate_target(*node.inputs[static_cast<size_t>(k)]);
      if (!g) continue;
      for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
  return finish("add", std::move(out));
}

Tensor mul_scalar(const Tensor& a, float s) {
  if (!a.defined()) throw DimensionError("mul_scalar: undefined input");
  std::vector<float> y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= s;
  Tensor out = Tensor::from(a.shape(), std::move(y));
  Tape::record("mul_scalar", {a}, out, [s](Tape::Node& node) {
    float* g = Tape::accumulate_target(*node.inputs[0]);
    if (!g) return;
    const auto& gy = node.output->grad;
    for (size_t i = 0; i < gy.size(); ++i) g[i] += s * gy[i];
  });
  return finish("mul_scalar", std::move(out));
}

Tensor square(const Tensor& a) {
  if (!a.defined()) throw DimensionError("square: undefined input");
  std::vector<float> y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= v;
  Tensor out = Tensor::from(a.shape(), std::move(y));
  Tape::record("square", {a}, out, [](Tape::Node& node) {
    float* g = Tape::accumulate_target(*node.inputs[0]);
    if (!g) return;
    const auto& x = node.inputs[0]->data;
    const auto& gy = node.output->grad;
    for (size_t i = 0; i < gy.size(); ++i) g[i] += 2.0f * x[i] * gy[i];
  });
  return finish("square", std::move(out));
}

Tensor sum(const Tensor& a) {
  if (!a.defined()) throw DimensionError("sum: undefined input");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Tensor out = Tensor::from({}, {static_cast<float>(acc)});
  Tape::record("sum", {a}, out, [](Tape::Node& node) {
    float* g = Tape::accumulate_target(*node.inputs[0]);
    if (!g) return;
    const float gy = node.output->grad[0];
    for (size_t i = 0; i < node.inputs[0]->data.size(); ++i) g[i] += gy;
  });
  return finish("sum", std::move(out));
}

Tensor mean(const Tensor& a) {
  if (!a.defined() || a.numel() == 0) throw DimensionError("mean: empty input");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double count = static_cast<double>(a.numel());
  Tensor out = Tensor::from({}, {static_cast<float>(acc / count)});
  Tape::record("mean", {a}, out, [count](Tape::Node& node) {
    float* g = Tape::accumulate_target(*node.inputs[0]);
    if (!g) return;
    const float gy = static_cast<float>(node.output->grad[0] / count);
    for (size_t i = 0; i < node.inputs[0]->data.size(); ++i) g[i] += gy;
  });
  return finish("mean", std::move(out));
}

// The three channel-reduction ops below work on one sample at a time with
// channel planes as contiguous length-hw arrays, so every elementwise step
// vectorises across pixels. Per-pixel math is float; loss sums are double.
// exp and log are always evaluated into Eigen-allocated (aligned) arrays:
// Eigen peels scalar iterations up to the destination's alignment, and its
// scalar and packet exp differ in the last bit, so an unaligned destination
// would make results depend on buffer addresses.
using Plane = Eigen::Map<const Eigen::ArrayXf>;
using MutPlane = Eigen::Map<Eigen::ArrayXf>;

Tensor softmax_channel(const Tensor& x) {
  require_rank(x, 4, "softmax_channel", "input");
  const int64_t n = x.dim(0), k = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  const float* xd = x.data().data();
  float* yd = out.mutable_data().data();
  Eigen::ArrayXf mx(hw), s(hw), e(hw);
  for (int64_t b = 0; b < n; ++b) {
    const float* xb = xd + b * k * hw;
    float* yb = yd + b * k * hw;
    mx = Plane(xb, hw);
    for (int64_t c = 1; c < k; ++c) mx = mx.max(Plane(xb + c * hw, hw));
    s.setZero();
    for (int64_t c = 0; c < k; ++c) {
      e = (Plane(xb + c * hw, hw) - mx).exp();
      MutPlane(yb + c * hw, hw) = e;
      s += e;
    }
    s = s.inverse();
    for (int64_t c = 0; c < k; ++c) MutPlane(yb + c * hw, hw) *= s;
  }
  Tape::record("softmax_channel", {x}, out, [n, k, hw](Tape::Node& node) {
    float* gx = Tape::accumulate_target(*node.inputs[0]);
    if (!gx) return;
    const float* y = node.output->data.data();
    const float* gy = node.output->grad.data();
    Eigen::ArrayXf dot(hw);
    for (int64_t b = 0; b < n; ++b) {
      const int64_t base = b * k * hw;
      dot.setZero();
      for (int64_t c = 0; c < k; ++c) dot += Plane(gy + base + c * hw, hw) * Plane(y + base + c * hw, hw);
      for (int64_t c = 0; c < k; ++c) {
        const int64_t o = base + c * hw;
        MutPlane(gx + o, hw) += Plane(y + o, hw) * (Plane(gy + o, hw) - dot);
      }
    }
  });
  return finish("softmax_channel", std::move(out));
}

namespace {

// Returns per-pixel weights (all ones when `weight` is undefined) after
// validating the [N,H,W] shape.
std::vector<float> pixel_weights(const Tensor& weight, int64_t n, int64_t h, int64_t w, const char* op) {
  if (!weight.defined()) return std::vector<float>(static_cast<size_t>(n * h * w), 1.0f);
  if (weight.shape() != Shape{n, h, w}) {
    throw DimensionError(std::string(op) + ": weight map shape " + shape_str(weight.shape()) + " expected " +
                         shape_str({n, h, w}));
  }
  for (float v : weight.data()) {
    if (!(v >= 0.0f)) throw DimensionError(std::string(op) + ": weight map must be nonnegative");
  }
  return {weight.data().begin(), weight.data().end()};
}

double weighted_sum(const Eigen::ArrayXf& values, const float* w) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (w[i] != 0.0f) acc += static_cast<double>(w[i]) * values[i];
  }
  return acc;
}

double total_weight(const std::vector<float>& w) {
  double t = 0.0;
  for (float v : w) t += v;
  return t;
}

}  // namespace

Tensor cross_entropy_soft(const Tensor& pred_prob, const Tensor& target_prob, const Tensor& weight) {
  require_rank(pred_prob, 4, "cross_entropy_soft", "pred");
  require_same_shape(pred_prob, target_prob, "cross_entropy_soft");
  const int64_t n = pred_prob.dim(0), k = pred_prob.dim(1), h = pred_prob.dim(2), w = pred_prob.dim(3);
  const int64_t hw = h * w;
  auto wts = std::make_shared<std::vector<float>>(pixel_weights(weight, n, h, w, "cross_entropy_soft"));
  const float* p = pred_prob.data().data();
  const float* t = target_prob.data().data();
  const double total_w = total_weight(*wts);
  double acc = 0.0;
  Eigen::ArrayXf l(hw);
  for (int64_t b = 0; b < n; ++b) {
    l.setZero();
    for (int64_t c = 0; c < k; ++c) {
      const int64_t o = (b * k + c) * hw;
      l -= Plane(t + o, hw) * (Plane(p + o, hw) + kLogEpsilon).log();
    }
    acc += weighted_sum(l, wts->data() + b * hw);
  }
  const float value = total_w > 0.0 ? static_cast<float>(acc / total_w) : 0.0f;
  Tensor out = Tensor::from({}, {value});
  Tensor target = target_prob;
  Tape::record("cross_entropy_soft", {pred_prob}, out, [wts, target, total_w, n, k, hw](Tape::Node& node) {
    float* gp = Tape::accumulate_target(*node.inputs[0]);
    if (!gp || total_w == 0.0) return;
    const float* p = node.inputs[0]->data.data();
    const float* t = target.data().data();
    const float gy = static_cast<float>(node.output->grad[0] / total_w);
    for (int64_t b = 0; b < n; ++b) {
      const Plane wq(wts->data() + b * hw, hw);
      for (int64_t c = 0; c < k; ++c) {
        const int64_t o = (b * k + c) * hw;
        MutPlane(gp + o, hw) -= gy * wq * Plane(t + o, hw) / (Plane(p + o, hw) + kLogEpsilon);
      }
    }
  });
  return finish("cross_entropy_soft", std::move(out));
}

namespace {

// Per-pixel log-sum-exp over all channels and over the background channels
// (all but fg) of one sample.
void foreground_lse(const float* z, int64_t k, int64_t hw, int fg, Eigen::ArrayXf& lse, Eigen::ArrayXf& lse_bg) {
  Eigen::ArrayXf mb = Eigen::ArrayXf::Constant(hw, -std::numeric_limits<float>::infinity());
  for (int64_t c = 0; c < k; ++c) {
    if (c != fg) mb = mb.max(Plane(z + c * hw, hw));
  }
  const Plane zf(z + fg * hw, hw);
  const Eigen::ArrayXf mx = mb.max(zf);
  Eigen::ArrayXf s = Eigen::ArrayXf::Zero(hw), sb = Eigen::ArrayXf::Zero(hw);
  for (int64_t c = 0; c < k; ++c) {
    if (c == fg) continue;
    const Plane zc(z + c * hw, hw);
    s += (zc - mx).exp();
    sb += (zc - mb).exp();
  }
  s += (zf - mx).exp();
  lse = mx + s.log();
  lse_bg = mb + sb.log();
}

}  // namespace

Tensor foreground_cross_entropy(const Tensor& logits, int fg_channel, const Tensor& mask, const Tensor& weight) {
  require_rank(logits, 4, "foreground_cross_entropy", "logits");
  const int64_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const int64_t hw = h * w;
  if (k < 2) throw DimensionError("foreground_cross_entropy: need at least 2 channels");
  if (fg_channel < 0 || fg_channel >= k) throw DimensionError("foreground_cross_entropy: fg_channel out of range");
  if (!mask.defined() || mask.shape() != Shape{n, h, w}) {
    throw DimensionError("foreground_cross_entropy: mask must be [N,H,W] matching logits");
  }
  auto wts = std::make_shared<std::vector<float>>(pixel_weights(weight, n, h, w, "foreground_cross_entropy"));
  const float* z = logits.data().data();
  const float* y = mask.data().data();
  const double total_w = total_weight(*wts);
  // Both log-sum-exps are kept for the backward pass.
  auto lse = std::make_shared<std::vector<float>>(static_cast<size_t>(n * hw));
  auto lse_bg = std::make_shared<std::vector<float>>(static_cast<size_t>(n * hw));
  double acc = 0.0;
  Eigen::ArrayXf a(hw), a_bg(hw);
  for (int64_t b = 0; b < n; ++b) {
    const float* zb = z + b * k * hw;
    foreground_lse(zb, k, hw, fg_channel, a, a_bg);
    MutPlane(lse->data() + b * hw, hw) = a;
    MutPlane(lse_bg->data() + b * hw, hw) = a_bg;
    const Plane yq(y + b * hw, hw);
    const Eigen::ArrayXf loss = -(yq * (Plane(zb + fg_channel * hw, hw) - a) + (1.0f - yq) * (a_bg - a));
    acc += weighted_sum(loss, wts->data() + b * hw);
  }
  const float value = total_w > 0.0 ? static_cast<float>(acc / total_w) : 0.0f;
  Tensor out = Tensor::from({}, {value});
  Tensor target = mask;
  Tape::record("foreground_cross_entropy", {logits}, out,
               [wts, target, lse, lse_bg, total_w, n, k, hw, fg_channel](Tape::Node& node) {
                 float* gz = Tape::accumulate_target(*node.inputs[0]);
                 if (!gz || total_w == 0.0) return;
                 const float* z = node.inputs[0]->data.data();
                 const float* y = target.data().data();
                 const float gy = static_cast<float>(node.output->grad[0] / total_w);
                 for (int64_t b = 0; b < n; ++b) {
                   const Plane yq(y + b * hw, hw);
                   const Plane a(lse->data() + b * hw, hw), a_bg(lse_bg->data() + b * hw, hw);
                   const Eigen::ArrayXf scale = gy * Plane(wts->data() + b * hw, hw);
                   const Eigen::ArrayXf bg_mass = 1.0f - yq;
                   Eigen::ArrayXf pc(hw), qc(hw);
                   for (int64_t c = 0; c < k; ++c) {
                     const int64_t o = (b * k + c) * hw;
                     const Plane zc(z + o, hw);
                     pc = (zc - a).exp();
                     if (c == fg_channel) {
                       MutPlane(gz + o, hw) += scale * (pc - yq);
                     } else {
                       qc = (zc - a_bg).exp();
                       MutPlane(gz + o, hw) += scale * (pc - bg_mass * qc);
                     }
                   }
                 }
               });
  return finish("foreground_cross_entropy", std::move(out));
}

}  // namespace pixeldino::ops
