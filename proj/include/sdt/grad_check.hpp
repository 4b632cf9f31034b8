#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sdt/tensor.hpp"

namespace sdt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  // Largest disagreement between the estimate at `step` and a plain central
  // difference at step/10, same relative scale. Independent of the analytic
  // side. Large values mean the loss is not smooth on the scale of the step
  // (a relu kink or a nearly constant LayerNorm row inside the stencil), so
  // the numeric reference itself is unreliable for this instance.
  double max_scale_gap = 0.0;
};

// Compares reverse-mode gradients of `loss_fn` with respect to every element
// of `inputs` against central finite differences (five-point stencil, so
// truncation is O(step^4)). Runs in 64-bit so the comparison is not swamped by
// float roundoff.
// Relative error per element is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const std::function<TensorD()>& loss_fn, std::vector<TensorD> inputs,
                                  double step = 1e-3) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  {
    TapeD tape;
    TapeScope<double> scope(tape);
    const TensorD loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult result;
  NoGradScope<double> no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const std::vector<double> analytic = in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                                       : std::vector<double>(in.numel(), 0.0);
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double original = in[i];
      auto at = [&](double offset) {
        in[i] = original + offset;
        return loss_fn().item();
      };
      const double up1 = at(step), down1 = at(-step), up2 = at(2.0 * step), down2 = at(-2.0 * step);
      const double fine = (at(0.1 * step) - at(-0.1 * step)) / (0.2 * step);
      in[i] = original;
      const double numeric = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * step);
      result.max_scale_gap =
          std::max(result.max_scale_gap, std::abs(fine - numeric) / std::max({1.0, std::abs(fine), std::abs(numeric)}));
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (err > result.max_rel_error || result.checked == 1) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_input = t;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace sdt
