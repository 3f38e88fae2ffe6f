// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "openus/tensor.hpp"

namespace openus {

struct GradCheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// A non-differentiable point (e.g. a max tie) was hit while evaluating.
  bool kink = false;
  bool passed = false;
};

/// Compares tape gradients with central differences. `f` must build its
/// scalar result from `params` (leaves with requires_grad); it is called once
/// under a tape and 2 * numel times without one while each coordinate is
/// nudged by +-h in place. Relative error is |a - n| / max(|a|, |n|, floor).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double h,
                           double tol, double floor = 1e-6);

/// Single-input form: f(x) with x a fresh copy of `x`.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double h,
                           double tol, double floor = 1e-6);

}  // namespace openus
