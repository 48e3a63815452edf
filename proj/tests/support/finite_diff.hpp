#pragma once

#include <cmath>
#include <functional>

#include "raregen/tensor.hpp"

namespace raregen::testsupport {

// Central finite differences of a scalar function of a tensor.
inline numerics::Tensor central_diff(
    const std::function<double(const numerics::Tensor&)>& f, const numerics::Tensor& x,
    double h = 1e-5) {
  numerics::Tensor grad(x.shape());
  numerics::Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline double relative_error(const numerics::Tensor& a, const numerics::Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += std::max(a[i] * a[i], b[i] * b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace raregen::testsupport
