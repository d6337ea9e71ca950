#pragma once

#include "groundseq/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

template <typename Scalar>
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;

  /// Zeroed moments shaped like `params`.
  static AdamState for_parameters(std::span<const Tensor<Scalar>> params, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    for (const auto& p : params) {
      s.first_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      s.second_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

/// One bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero are left untouched, moments
/// included, so a zero gradient never moves a parameter whatever the
/// accumulated state.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, std::span<const Matrix<Scalar>> grads, AdamState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params, " +
                                std::to_string(grads.size()) + " grads, " +
                                std::to_string(state.first_moment.size()) + " moment slots");
  }
  if (!(state.learning_rate > 0) || !(state.eps > 0) || !(state.beta1 > 0 && state.beta1 < 1) ||
      !(state.beta2 > 0 && state.beta2 < 1)) {
    throw std::invalid_argument("adam_step: hyperparameters out of range");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.first_moment[i].size() != params[i].numel() ||
        state.second_moment[i].size() != params[i].numel()) {
      throw std::invalid_argument("adam_step: length mismatch for parameter " + std::to_string(i));
    }
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const Scalar b1 = static_cast<Scalar>(state.beta1);
  const Scalar b2 = static_cast<Scalar>(state.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, t));
  const Scalar lr = static_cast<Scalar>(state.learning_rate);
  const Scalar eps = static_cast<Scalar>(state.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Scalar* w = params[i].mutable_value().data();
    Scalar* m = state.first_moment[i].data();
    Scalar* v = state.second_moment[i].data();
    const Scalar* g = grads[i].data();
    const Index n = params[i].numel();
    for (Index j = 0; j < n; ++j) {
      if (g[j] == Scalar(0)) continue;
      m[j] = b1 * m[j] + (Scalar(1) - b1) * g[j];
      v[j] = b2 * v[j] + (Scalar(1) - b2) * g[j] * g[j];
      const Scalar m_hat = m[j] / c1;
      const Scalar v_hat = v[j] / c2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(std::span<Matrix<Scalar>> grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const Scalar factor = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g *= factor;
  }
  return norm;
}

}  // namespace groundseq
