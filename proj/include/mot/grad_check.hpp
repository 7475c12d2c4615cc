#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mot/tensor.hpp"

namespace mot {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares autograd against central differences for every coordinate of
/// every parameter. Error per coordinate is |a - n| / max(1, |a|, |n|).
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f,
                           std::vector<Tensor<T>> params, T eps) {
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), T(0));
    }
  }
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T original = data[i];
      data[i] = original + eps;
      const T up = f().item();
      data[i] = original - eps;
      const T down = f().item();
      data[i] = original;
      const double numeric = (static_cast<double>(up) - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_rel_error) {
        result = {err, pi, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace mot
