// SPDX-License-Identifier: Apache-2.0
#include "openus/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace openus {

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double h,
                           double tol, double floor) {
  GradCheckReport report;
  const std::size_t kinks_before = detail::kink_counter();

  for (auto& p : params) p.clear_grad();
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = f();
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
  }

  auto eval = [&]() {
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss at a perturbed point");
    return v;
  };

  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<T>& p = params[t];
    std::span<T> values = p.mutable_data();
    std::vector<T> analytic(values.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = static_cast<T>(saved + h);
      const double up = eval();
      values[i] = static_cast<T>(saved - h);
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = static_cast<double>(analytic[i]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = t;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  report.kink = detail::kink_counter() != kinks_before;
  report.passed = report.max_rel_error < tol && !report.kink;
  return report;
}

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double h,
                           double tol, double floor) {
  Tensor<T> leaf = x.clone(true);
  return grad_check<T>([&]() { return f(leaf); }, std::vector<Tensor<T>>{leaf}, h, tol, floor);
}

template GradCheckReport grad_check<float>(const std::function<Tensor<float>()>&, std::vector<Tensor<float>>,
                                           double, double, double);
template GradCheckReport grad_check<double>(const std::function<Tensor<double>()>&, std::vector<Tensor<double>>,
                                            double, double, double);
template GradCheckReport grad_check<float>(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                           const Tensor<float>&, double, double, double);
template GradCheckReport grad_check<double>(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                            const Tensor<double>&, double, double, double);

}  // namespace openus
