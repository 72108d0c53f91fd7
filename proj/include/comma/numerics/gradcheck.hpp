#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "comma/numerics/tensor.hpp"

namespace comma {

inline constexpr double kFiniteDiffStep = 1e-6;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, perturbing every coordinate of every listed leaf in place.
/// Returns max |analytic - numeric| / max(1, |numeric|).
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double eps = kFiniteDiffStep) {
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("finite_diff_check: parameters must be requires_grad leaves");
    }
    p.clear_grad();
  }
  backward(f(), params);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

/// Single-input form: f receives a fresh requires_grad copy of theta.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& theta,
                                double eps = kFiniteDiffStep) {
  Tensor leaf = theta.clone(true);
  return finite_diff_check([&] { return f(leaf); }, std::vector<Tensor>{leaf}, eps);
}

}  // namespace comma
