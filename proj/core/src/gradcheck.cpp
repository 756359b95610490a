#include "pixeldino/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "pixeldino/errors.hpp"
#include "pixeldino/ops.hpp"
#include "pixeldino/rng.hpp"
#include "pixeldino/unet.hpp"

namespace pixeldino {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Tensor weighted_sum(const Tensor& y, const std::vector<float>& w) {
  double acc = 0.0;
  const auto d = y.data();
  for (size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(w[i]) * d[i];
  Tensor out = Tensor::from({}, {static_cast<float>(acc)});
  Tape::record("weighted_sum", {y}, out, [w](Tape::Node& node) {
    float* g = Tape::accumulate_target(*node.inputs[0]);
    if (!g) return;
    const float gy = node.output->grad[0];
    for (size_t i = 0; i < w.size(); ++i) g[i] += w[i] * gy;
  });
  return out;
}

double reduce_double(const Tensor& y, const std::vector<float>& w) {
  const auto d = y.data();
  if (d.size() == 1 && w.empty()) return d[0];
  double acc = 0.0;
  for (size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(w[i]) * d[i];
  return acc;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(uniform(rng, lo, hi));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor random_normal(Rng& rng, Shape shape, double sd = 1.0) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(normal(rng, 0.0, sd));
  return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from the relu kink.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>((bernoulli(rng, 0.5) ? 1.0 : -1.0) * uniform(rng, 0.05, 1.0));
  return Tensor::from(std::move(shape), std::move(v));
}

// Distinct values at least 0.01 apart, so pooling windows have no near-ties.
Tensor distinct_values(Rng& rng, Shape shape) {
  const int64_t n = shape_numel(shape);
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = static_cast<float>(-1.0 + 0.01 * static_cast<double>(perm[static_cast<size_t>(i)]));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor random_distribution(Rng& rng, int64_t n, int64_t k, int64_t h, int64_t w) {
  std::vector<float> v(static_cast<size_t>(n * k * h * w));
  const int64_t hw = h * w;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t p = 0; p < hw; ++p) {
      double total = 0.0;
      for (int64_t c = 0; c < k; ++c) total += (v[static_cast<size_t>((b * k + c) * hw + p)] = static_cast<float>(uniform(rng, 0.05, 1.0)));
      for (int64_t c = 0; c < k; ++c) v[static_cast<size_t>((b * k + c) * hw + p)] /= static_cast<float>(total);
    }
  }
  return Tensor::from({n, k, h, w}, std::move(v));
}

Tensor random_mask(Rng& rng, Shape shape) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = bernoulli(rng, 0.5) ? 1.0f : 0.0f;
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

bool GradcheckReport::all_passed() const {
  return std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.passed; });
}

std::string GradcheckReport::format() const {
  std::string out;
  char buf[256];
  for (const auto& r : results) {
    if (!r.error.empty()) {
      std::snprintf(buf, sizeof buf, "%-28s error: %s  FAIL\n", r.name.c_str(), r.error.c_str());
    } else {
      std::snprintf(buf, sizeof buf, "%-28s checked %5lld  skipped %4lld  max_rel_err %.3e  tol %.0e  %s\n",
                    r.name.c_str(), static_cast<long long>(r.checked), static_cast<long long>(r.skipped),
                    r.max_rel_error, r.tolerance, r.passed ? "PASS" : "FAIL");
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "gradcheck: %s\n", all_passed() ? "all checks passed" : "FAILURES");
  out += buf;
  return out;
}

GradcheckResult run_gradcheck(const GradcheckProblem& problem, uint64_t seed, double h) {
  GradcheckResult res;
  res.name = problem.name;
  res.tolerance = problem.tolerance;
  try {
    std::vector<Tensor> leaves;
    for (const auto& t : problem.inputs) {
      leaves.push_back(Tensor::from(t.shape(), std::vector<float>(t.data().begin(), t.data().end()), true));
    }
    Rng rng = make_rng(seed, Stream::kGradcheck, {fnv1a(problem.name)});

    std::vector<float> w;
    std::vector<std::vector<float>> analytic;
    {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        Tensor y = problem.forward(leaves);
        if (y.numel() != 1) {
          w.resize(static_cast<size_t>(y.numel()));
          for (auto& v : w) v = static_cast<float>(uniform(rng, -1.0, 1.0));
          loss = weighted_sum(y, w);
        } else {
          loss = y;
        }
      }
      tape.backward(loss);
      for (auto& l : leaves) {
        analytic.emplace_back(l.has_grad() ? std::vector<float>(l.grad().begin(), l.grad().end())
                                           : std::vector<float>(static_cast<size_t>(l.numel()), 0.0f));
        l.clear_grad();
      }
    }

    int64_t total = 0;
    for (const auto& l : leaves) total += l.numel();
    std::vector<int64_t> order(static_cast<size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    const bool pooled = problem.samples > 0 && problem.samples < total;
    if (pooled) std::shuffle(order.begin(), order.end(), rng);
    const int64_t wanted = pooled ? problem.samples : total;

    NoGradScope no_grad;
    // Returns the reduced output and the relu/max-pool branch pattern.
    auto eval = [&] {
      ops::BranchTrace trace;
      const double v = reduce_double(problem.forward(leaves), w);
      return std::make_pair(v, trace.hash());
    };
    const uint64_t base_pattern = eval().second;
    // Exhaustive checks normalise per input; sampled checks pool all picks.
    std::vector<double> max_err(leaves.size(), 0.0), max_ref(leaves.size(), 0.0);
    std::vector<bool> touched(leaves.size(), false);
    for (int64_t flat : order) {
      if (res.checked == wanted) break;
      size_t i = 0;
      int64_t j = flat;
      while (j >= leaves[i].numel()) j -= leaves[i++].numel();
      float& x = leaves[i].mutable_data()[static_cast<size_t>(j)];
      const float orig = x;
      const float xp = static_cast<float>(orig + h), xm = static_cast<float>(orig - h);
      x = xp;
      const auto [lp, pp] = eval();
      x = xm;
      const auto [lm, pm] = eval();
      x = orig;
      // A stencil that crosses a kink has no central-difference reference.
      if (pp != base_pattern || pm != base_pattern) {
        ++res.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
      const double a = analytic[i][static_cast<size_t>(j)];
      const size_t g = pooled ? 0 : i;
      max_err[g] = std::max(max_err[g], std::abs(a - numeric));
      max_ref[g] = std::max(max_ref[g], std::abs(numeric));
      touched[g] = true;
      ++res.checked;
    }
    if (res.checked < wanted) {
      throw NumericError("only " + std::to_string(res.checked) + " of " + std::to_string(wanted) +
                         " elements have a kink-free stencil");
    }
    for (size_t i = 0; i < leaves.size(); ++i) {
      if (!touched[i]) continue;
      // Inputs whose true gradient vanishes are judged on absolute error.
      const double rel = max_ref[i] > 1e-6 ? max_err[i] / max_ref[i] : max_err[i];
      res.max_rel_error = std::max(res.max_rel_error, rel);
    }
    res.passed = std::isfinite(res.max_rel_error) && res.max_rel_error <= problem.tolerance;
  } catch (const std::exception& e) {
    res.error = e.what();
    res.passed = false;
  }
  return res;
}

std::vector<GradcheckProblem> standard_gradcheck_problems(uint64_t seed) {
  Rng rng = make_rng(seed, Stream::kGradcheck, {0});
  std::vector<GradcheckProblem> ps;
  auto add = [&](std::string name, std::vector<Tensor> inputs, std::function<Tensor(const std::vector<Tensor>&)> f,
                 double tol = 1e-3, int64_t samples = 0) {
    ps.push_back({std::move(name), std::move(inputs), std::move(f), tol, samples});
  };

  add("conv2d", {random_tensor(rng, {2, 3, 8, 8}), random_tensor(rng, {4, 3, 3, 3}), random_tensor(rng, {4})},
      [](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], in[2], 1, 1); });
  add("conv2d_stride2", {random_tensor(rng, {1, 2, 7, 7}), random_tensor(rng, {3, 2, 3, 3})},
      [](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], 2, 1); });
  add("conv2d_1x1", {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {2, 3, 1, 1}), random_tensor(rng, {2})},
      [](const std::vector<Tensor>& in) { return ops::conv2d(in[0], in[1], in[2], 1, 0); });
  add("relu", {away_from_zero(rng, {2, 3, 4, 4})}, [](const std::vector<Tensor>& in) { return ops::relu(in[0]); });
  add("max_pool_2x2", {distinct_values(rng, {2, 2, 6, 6})},
      [](const std::vector<Tensor>& in) { return ops::max_pool_2x2(in[0]); });
  add("bilinear_upsample_2x", {random_tensor(rng, {1, 2, 3, 4})},
      [](const std::vector<Tensor>& in) { return ops::bilinear_upsample_2x(in[0]); });
  add("concat_channels", {random_tensor(rng, {1, 2, 3, 3}), random_tensor(rng, {1, 3, 3, 3})},
      [](const std::vector<Tensor>& in) { return ops::concat_channels({in[0], in[1]}); });
  add("group_norm", {random_normal(rng, {2, 4, 3, 3}), random_tensor(rng, {4}, 0.5, 1.5), random_tensor(rng, {4})},
      [](const std::vector<Tensor>& in) { return ops::group_norm(in[0], in[1], in[2], 2); });
  add("add", {random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {2, 3, 2, 2})},
      [](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); });
  add("mul_scalar", {random_tensor(rng, {2, 3, 2, 2})},
      [](const std::vector<Tensor>& in) { return ops::mul_scalar(in[0], -1.7f); });
  add("square", {random_tensor(rng, {2, 3, 2, 2})}, [](const std::vector<Tensor>& in) { return ops::square(in[0]); });
  add("sum", {random_tensor(rng, {2, 3, 2, 2})}, [](const std::vector<Tensor>& in) { return ops::sum(in[0]); });
  add("mean", {random_tensor(rng, {2, 3, 2, 2})}, [](const std::vector<Tensor>& in) { return ops::mean(in[0]); });
  add("softmax_channel", {random_tensor(rng, {2, 3, 2, 2}, -2.0, 2.0)},
      [](const std::vector<Tensor>& in) { return ops::softmax_channel(in[0]); });

  const Tensor target = random_distribution(rng, 1, 3, 2, 2);
  add("cross_entropy_soft", {random_tensor(rng, {1, 3, 2, 2}, -2.0, 2.0)}, [target](const std::vector<Tensor>& in) {
    return ops::cross_entropy_soft(ops::softmax_channel(in[0]), target);
  });
  const Tensor weight = random_tensor(rng, {1, 2, 2}, 0.0, 1.0);
  add("cross_entropy_soft_weighted", {random_tensor(rng, {1, 3, 2, 2}, -2.0, 2.0)},
      [target, weight](const std::vector<Tensor>& in) {
        return ops::cross_entropy_soft(ops::softmax_channel(in[0]), target, weight);
      });
  const Tensor mask = random_mask(rng, {1, 2, 2});
  add("foreground_cross_entropy", {random_tensor(rng, {1, 4, 2, 2}, -2.0, 2.0)},
      [mask, weight](const std::vector<Tensor>& in) { return ops::foreground_cross_entropy(in[0], 1, mask, weight); });

  // End to end: a 16x16 UNet with both loss heads.
  UNetConfig cfg;
  cfg.in_channels = 4;
  cfg.base_width = 8;
  cfg.depth = 2;
  cfg.out_channels = 4;
  cfg.norm_groups = 4;
  const ModelParams params = init_params(cfg, seed);
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (const auto& [name, t] : params) {
    names.push_back(name);
    // Nonzero biases and affines so every parameter carries a generic gradient.
    Tensor p = t.detach();
    if (name.find("weight") == std::string::npos) {
      for (auto& v : p.mutable_data()) v += static_cast<float>(uniform(rng, -0.1, 0.1));
    }
    tensors.push_back(p);
  }
  const Tensor input = random_normal(rng, {1, cfg.in_channels, 16, 16});
  const Tensor fg = random_mask(rng, {1, 16, 16});
  const Tensor soft = random_distribution(rng, 1, cfg.out_channels, 16, 16);
  add(
      "unet_end_to_end", tensors,
      [cfg, names, input, fg, soft](const std::vector<Tensor>& in) {
        ModelParams p;
        for (size_t i = 0; i < names.size(); ++i) p.add(names[i], in[i]);
        Tensor logits = unet_forward(cfg, p, input);
        return ops::add(ops::foreground_cross_entropy(logits, 0, fg),
                        ops::cross_entropy_soft(ops::softmax_channel(logits), soft));
      },
      1e-2, 50);
  return ps;
}

GradcheckReport run_gradcheck_suite(const std::vector<GradcheckProblem>& problems, uint64_t seed) {
  GradcheckReport report;
  for (const auto& p : problems) report.results.push_back(run_gradcheck(p, seed));
  return report;
}

}  // namespace pixeldino
