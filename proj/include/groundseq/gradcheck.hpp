#pragma once

#include "groundseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <type_traits>

namespace groundseq {

template <typename Scalar>
using ScalarClosure = std::function<Tensor<Scalar>(const Tensor<Scalar>&)>;

/// Worst relative error between backward() and central differences.
///
/// The relative error of each coordinate uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
template <typename Scalar>
double finite_difference_check(const ScalarClosure<Scalar>& f, const Tensor<Scalar>& point, double eps) {
  if constexpr (std::is_same_v<Scalar, double>) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_difference_check: eps outside [1e-7, 1e-3]");
  } else if (!(eps > 0)) {
    throw std::invalid_argument("finite_difference_check: eps must be positive");
  }

  Tensor<Scalar> x = Tensor<Scalar>::parameter(point.shape(), point.value());
  Matrix<Scalar> analytic;
  {
    Tape<Scalar> tape;
    TapeScope<Scalar> scope(tape);
    Tensor<Scalar> y = f(x);
    if (!y.is_scalar()) {
      throw std::invalid_argument("finite_difference_check: closure returned shape " + shape_string(y.shape()));
    }
    if (y.requires_grad()) {
      tape.backward(y);
      analytic = x.grad();
    } else {
      analytic = Matrix<Scalar>::Zero(x.rows(), x.cols());
    }
  }

  double worst = 0;
  Tensor<Scalar> probe(point.shape(), point.value());
  Scalar* p = probe.mutable_value().data();
  const Scalar h = static_cast<Scalar>(eps);
  for (Index i = 0; i < probe.numel(); ++i) {
    const Scalar saved = p[i];
    p[i] = saved + h;
    const double up = static_cast<double>(f(probe).item());
    p[i] = saved - h;
    const double down = static_cast<double>(f(probe).item());
    p[i] = saved;
    const double numeric = (up - down) / (2 * eps);
    const double a = static_cast<double>(analytic.data()[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace groundseq
