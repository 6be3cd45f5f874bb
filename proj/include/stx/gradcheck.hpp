#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <functional>

#include "stx/tensor.hpp"

namespace stx {

// f builds a scalar from its argument through differentiable ops. Returns the
// max over coordinates of |analytic - central difference| / max(1, |analytic|).
// Stochastic paths must be frozen by the caller (reset the RngStream, or
// replay a mask tape) so both evaluations of f see identical masks.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                      double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("finite_difference_check: eps must be positive");

  Tensor probe(x.shape(), x.values(), true);
  Tensor y = f(probe);
  if (y.size() != 1) {
    throw ContractError("finite_difference_check: f must return a scalar, got " +
                        shape_str(y.shape()));
  }
  if (!std::isfinite(y.value())) throw NumericError("finite_difference_check: f(x) is non-finite");
  y.backward();
  const std::vector<double> analytic = probe.grad();

  NoGradGuard no_grad;
  std::vector<double> v = x.values();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + eps;
    const double fp = f(Tensor(x.shape(), v)).value();
    v[i] = orig - eps;
    const double fm = f(Tensor(x.shape(), v)).value();
    v[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_check: perturbed f is non-finite");
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace stx
