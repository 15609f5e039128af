#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mf/tensor.hpp"

namespace mf {

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|)
  bool pass = true;
  std::string worst;  // location of the worst element, for diagnostics
};

// Central-difference check of reverse-mode gradients, double precision.
// An element passes when |a - n| < abs_floor or the relative error is below
// tol. Throws ShapeError if f is not scalar-valued; NumericsError from f
// propagates (a NaN inside f must surface, not silently pass).
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double step, double tol,
    double abs_floor = 1e-6) {
  for (auto& t : inputs) t.set_requires_grad(true);

  Tensor<double> loss = f(inputs);
  if (loss.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
  for (auto& t : inputs) t.zero_grad();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) {
      analytic.back().assign(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto vals = inputs[ti].raw_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      const double up = f(inputs).item();
      vals[i] = saved - step;
      const double down = f(inputs).item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[ti][i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max(std::abs(a), std::abs(numeric));
      const double rel_err = denom > 0 ? abs_err / denom : 0.0;
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (abs_err >= abs_floor) {
        report.max_rel_err = std::max(report.max_rel_err, rel_err);
        if (rel_err >= tol) {
          report.pass = false;
          if (report.worst.empty() || rel_err >= report.max_rel_err) {
            report.worst = "input " + std::to_string(ti) + " elem " +
                           std::to_string(i) + ": analytic " + std::to_string(a) +
                           " numeric " + std::to_string(numeric);
          }
        }
      }
    }
  }
  return report;
}

}  // namespace mf
