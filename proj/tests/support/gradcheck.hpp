#pragma once

// Central finite differences against analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing_support {

struct GradCheck {
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  std::size_t coordinates = 0;
};

/// `values` is perturbed in place (and restored) one coordinate at a time;
/// `loss` must read it. The error is ||a - n|| / max(||a||, ||n||).
inline GradCheck check_gradient(std::vector<double*> values, const std::vector<double>& analytic,
                                const std::function<double()>& loss, double eps = 1e-5) {
  GradCheck out;
  out.coordinates = values.size();
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    double& v = *values[i];
    const double saved = v;
    v = saved + eps;
    const double up = loss();
    v = saved - eps;
    const double down = loss();
    v = saved;
    const double numeric = (up - down) / (2.0 * eps);
    diff += (analytic[i] - numeric) * (analytic[i] - numeric);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  out.analytic_norm = std::sqrt(na);
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
  out.relative_error = std::sqrt(diff) / scale;
  return out;
}

}  // namespace testing_support
