#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pixeldino/tensor.hpp"

namespace pixeldino {

// A differentiable function of some leaf tensors. Non-scalar outputs are
// reduced by the harness to sum_i w_i * y_i with fixed random weights w, the
// reduction evaluated in double on the finite-difference side.
struct GradcheckProblem {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  double tolerance = 1e-3;
  // If > 0, only this many (input, element) pairs are perturbed, sampled
  // uniformly over all elements of all inputs.
  int64_t samples = 0;
};

// Error per input is max_j |analytic_j - numeric_j| / max_j |numeric_j| over
// the checked elements j; a case reports the worst input.
struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int64_t checked = 0;
  int64_t skipped = 0;  // stencils that crossed a relu or max-pool kink
  bool passed = false;
  std::string error;  // non-empty if the forward or backward threw
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;
  bool all_passed() const;
  // One line per case: name, checked count, max relative error, PASS/FAIL.
  std::string format() const;
};

// Central differences x +- h on the float32 inputs; the divisor is the exact
// difference of the perturbed float values. Elements whose stencil changes
// the relu/max-pool branch pattern are skipped; sampled problems draw
// replacements until `samples` elements are checked.
GradcheckResult run_gradcheck(const GradcheckProblem& problem, uint64_t seed, double h = 1e-3);

// Every differentiable primitive plus the 16x16 UNet end-to-end check.
std::vector<GradcheckProblem> standard_gradcheck_problems(uint64_t seed);
GradcheckReport run_gradcheck_suite(const std::vector<GradcheckProblem>& problems, uint64_t seed);

}  // namespace pixeldino
