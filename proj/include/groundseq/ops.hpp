#pragma once

#include "groundseq/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace groundseq {

namespace detail {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  Matrix<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  auto result = detail::make_result<Scalar>({a.rows(), b.cols()}, std::move(out), "matmul");
  detail::record(result, {a, b}, [an = a.node(), bn = b.node(), rn = result.node()] {
    if (an->requires_grad) an->grad.noalias() += rn->grad * bn->value.transpose();
    if (bn->requires_grad) bn->grad.noalias() += an->value.transpose() * rn->grad;
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto result = detail::make_result<Scalar>(a.shape(), a.value() + b.value(), "add");
  detail::record(result, {a, b}, [an = a.node(), bn = b.node(), rn = result.node()] {
    if (an->requires_grad) an->grad += rn->grad;
    if (bn->requires_grad) bn->grad += rn->grad;
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto result = detail::make_result<Scalar>(a.shape(), a.value() - b.value(), "sub");
  detail::record(result, {a, b}, [an = a.node(), bn = b.node(), rn = result.node()] {
    if (an->requires_grad) an->grad += rn->grad;
    if (bn->requires_grad) bn->grad -= rn->grad;
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  auto result = detail::make_result<Scalar>(a.shape(), std::move(out), "mul");
  detail::record(result, {a, b}, [an = a.node(), bn = b.node(), rn = result.node()] {
    if (an->requires_grad) an->grad += rn->grad.cwiseProduct(bn->value);
    if (bn->requires_grad) bn->grad += rn->grad.cwiseProduct(an->value);
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  auto result = detail::make_result<Scalar>(a.shape(), a.value() * factor, "scale");
  detail::record(result, {a}, [an = a.node(), rn = result.node(), factor] { an->grad += rn->grad * factor; });
  return result;
}

/// x[m,n] + bias[n] broadcast over rows.
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (bias.numel() != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match input " +
                     shape_string(x.shape()));
  }
  Matrix<Scalar> out = x.value();
  const auto b = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), x.cols());
  out.rowwise() += b;
  auto result = detail::make_result<Scalar>(x.shape(), std::move(out), "add_bias");
  detail::record(result, {x, bias}, [xn = x.node(), bn = bias.node(), rn = result.node()] {
    if (xn->requires_grad) xn->grad += rn->grad;
    if (bn->requires_grad) {
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bn->grad.data(), bn->grad.size()) +=
          rn->grad.colwise().sum();
    }
  });
  return result;
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  auto result = detail::make_result<Scalar>({1}, std::move(out), "sum");
  detail::record(result, {x}, [xn = x.node(), rn = result.node()] { xn->grad.array() += rn->grad(0, 0); });
  return result;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

/// Gaussian error linear unit, exact erf form.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Matrix<Scalar> out = x.value().unaryExpr(
      [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  auto result = detail::make_result<Scalar>(x.shape(), std::move(out), "gelu");
  detail::record(result, {x}, [xn = x.node(), rn = result.node()] {
    constexpr Scalar inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Scalar> * inv_sqrt2;
    const Matrix<Scalar> d = xn->value.unaryExpr([](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    xn->grad += rn->grad.cwiseProduct(d);
  });
  return result;
}

/// Softmax along `axis` of an n-d tensor, max-subtracted.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  const Index rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_string(x.shape()));
  }
  const Shape& shape = x.shape();
  const Index len = shape[axis];
  const Index outer = shape_numel(Shape(shape.begin(), shape.begin() + axis));
  const Index inner = shape_numel(Shape(shape.begin() + axis + 1, shape.end()));

  Matrix<Scalar> out(x.rows(), x.cols());
  const Scalar* in = x.data();
  Scalar* o = out.data();
  for (Index a = 0; a < outer; ++a) {
    for (Index c = 0; c < inner; ++c) {
      const Index base = a * len * inner + c;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index i = 0; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      Scalar total = 0;
      for (Index i = 0; i < len; ++i) {
        o[base + i * inner] = std::exp(in[base + i * inner] - mx);
        total += o[base + i * inner];
      }
      for (Index i = 0; i < len; ++i) o[base + i * inner] /= total;
    }
  }
  auto result = detail::make_result<Scalar>(shape, std::move(out), "softmax");
  detail::record(result, {x}, [xn = x.node(), rn = result.node(), len, outer, inner] {
    const Scalar* y = rn->value.data();
    const Scalar* gy = rn->grad.data();
    Scalar* gx = xn->grad.data();
    for (Index a = 0; a < outer; ++a) {
      for (Index c = 0; c < inner; ++c) {
        const Index base = a * len * inner + c;
        Scalar dot = 0;
        for (Index i = 0; i < len; ++i) dot += y[base + i * inner] * gy[base + i * inner];
        for (Index i = 0; i < len; ++i) {
          gx[base + i * inner] += y[base + i * inner] * (gy[base + i * inner] - dot);
        }
      }
    }
  });
  return result;
}

/// Normalizes each row over the last axis, then applies gamma and beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  const Index n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gamma " + shape_string(gamma.shape()) + " / beta " + shape_string(beta.shape()) +
                     " do not match last axis of " + shape_string(x.shape()));
  }
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");

  const Index m = x.rows();
  Matrix<Scalar> xhat(m, n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(m);
  for (Index r = 0; r < m; ++r) {
    const auto row = x.value().row(r);
    const Scalar mu = row.mean();
    const Scalar var = (row.array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  const auto g = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gamma.data(), n);
  const auto b = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(beta.data(), n);
  Matrix<Scalar> out = xhat.array().rowwise() * g.array();
  out.rowwise() += b;
  auto result = detail::make_result<Scalar>(x.shape(), std::move(out), "layer_norm");
  detail::record(result, {x, gamma, beta},
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), rn = result.node(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), n] {
                   const Matrix<Scalar>& dy = rn->grad;
                   if (gn->requires_grad) {
                     Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gn->grad.data(), n) +=
                         dy.cwiseProduct(xhat).colwise().sum();
                   }
                   if (bn->requires_grad) {
                     Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bn->grad.data(), n) += dy.colwise().sum();
                   }
                   if (xn->requires_grad) {
                     const auto g = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gn->value.data(), n);
                     Matrix<Scalar> dxhat = dy.array().rowwise() * g.array();
                     for (Index r = 0; r < dxhat.rows(); ++r) {
                       const Scalar mean_d = dxhat.row(r).mean();
                       const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / static_cast<Scalar>(n);
                       xn->grad.row(r).array() +=
                           inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
                     }
                   }
                 });
  return result;
}

/// Mean token cross-entropy over positions where mask is set.
template <typename Scalar>
Tensor<Scalar> cross_entropy_masked(const Tensor<Scalar>& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask) {
  const Index steps = logits.rows();
  const Index vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != steps || static_cast<Index>(mask.size()) != steps) {
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries for logits " + shape_string(logits.shape()));
  }
  Index active = 0;
  for (Index t = 0; t < steps; ++t) {
    if (!mask[t]) continue;
    ++active;
    if (targets[t] < 0 || targets[t] >= vocab) {
      throw std::out_of_range("cross_entropy_masked: target id " + std::to_string(targets[t]) + " at position " +
                              std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (active == 0) throw std::invalid_argument("cross_entropy_masked: every position is masked out");

  Matrix<Scalar> probs(steps, vocab);
  Scalar total = 0;
  for (Index t = 0; t < steps; ++t) {
    if (!mask[t]) {
      probs.row(t).setZero();
      continue;
    }
    const auto row = logits.value().row(t);
    const Scalar mx = row.maxCoeff();
    probs.row(t) = (row.array() - mx).exp();
    const Scalar z = probs.row(t).sum();
    probs.row(t) /= z;
    total += std::log(z) + mx - row(targets[t]);
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(active);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total * inv;
  auto result = detail::make_result<Scalar>({1}, std::move(out), "cross_entropy_masked");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  detail::record(result, {logits},
                 [ln = logits.node(), rn = result.node(), probs = std::move(probs), tgt = std::move(tgt),
                  msk = std::move(msk), inv] {
                   const Scalar g = rn->grad(0, 0) * inv;
                   for (Index t = 0; t < probs.rows(); ++t) {
                     if (!msk[t]) continue;
                     ln->grad.row(t) += g * probs.row(t);
                     ln->grad(t, tgt[t]) -= g;
                   }
                 });
  return result;
}

/// Selects rows of a 2-D table; the embedding lookup and row broadcast primitive.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const Index> rows) {
  const Index n = table.rows();
  Matrix<Scalar> out(static_cast<Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                              std::to_string(n) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(rows[i]);
  }
  auto result =
      detail::make_result<Scalar>({static_cast<Index>(rows.size()), table.cols()}, std::move(out), "gather_rows");
  detail::record(result, {table},
                 [tn = table.node(), rn = result.node(), idx = std::vector<Index>(rows.begin(), rows.end())] {
                   for (std::size_t i = 0; i < idx.size(); ++i) tn->grad.row(idx[i]) += rn->grad.row(static_cast<Index>(i));
                 });
  return result;
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: width mismatch " + shape_string(parts.front().shape()) + " vs " +
                       shape_string(p.shape()));
    }
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  auto result = detail::make_result<Scalar>({rows, cols}, std::move(out), "concat_rows");
  std::vector<std::shared_ptr<TensorNode<Scalar>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  detail::record(result, parts, [nodes = std::move(nodes), rn = result.node()] {
    Index offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->grad += rn->grad.middleRows(offset, n->value.rows());
      offset += n->value.rows();
    }
  });
  return result;
}

/// Row layout of a batched multi-head attention call.
///
/// Queries are [batch*query_len, d] and keys/values [batch*key_len, d], each
/// sample occupying a contiguous block of rows. Heads split the feature axis.
struct AttentionLayout {
  Index batch = 1;
  Index query_len = 0;
  Index key_len = 0;
  Index heads = 1;
  bool causal = false;
  /// Empty means every key is valid, else one flag per key row (batch*key_len).
  std::vector<std::uint8_t> key_valid;
};

/// Scaled dot-product attention over all heads of a batch.
///
/// Masked keys get exactly zero weight. A query with no visible key yields a
/// zero output row.
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    const AttentionLayout& layout) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d || layout.heads <= 0 || d % layout.heads != 0) {
    throw ShapeError("attention: widths q " + shape_string(q.shape()) + " k " + shape_string(k.shape()) + " v " +
                     shape_string(v.shape()) + " with " + std::to_string(layout.heads) + " heads");
  }
  if (q.rows() != layout.batch * layout.query_len || k.rows() != layout.batch * layout.key_len ||
      v.rows() != k.rows()) {
    throw ShapeError("attention: row counts do not match layout");
  }
  if (!layout.key_valid.empty() && static_cast<Index>(layout.key_valid.size()) != k.rows()) {
    throw ShapeError("attention: key mask length does not match key rows");
  }
  if (layout.causal && layout.query_len != layout.key_len) {
    throw ShapeError("attention: causal masking requires equal query and key lengths");
  }
  const Index dh = d / layout.heads;
  const Index tq = layout.query_len;
  const Index tk = layout.key_len;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  // probs holds one [tq, tk] block per (sample, head), stacked by rows.
  Matrix<Scalar> probs(layout.batch * layout.heads * tq, tk);
  Matrix<Scalar> out(q.rows(), d);
  Matrix<Scalar> scores(tq, tk);
  for (Index b = 0; b < layout.batch; ++b) {
    for (Index h = 0; h < layout.heads; ++h) {
      const auto qb = q.value().block(b * tq, h * dh, tq, dh);
      const auto kb = k.value().block(b * tk, h * dh, tk, dh);
      const auto vb = v.value().block(b * tk, h * dh, tk, dh);
      scores.noalias() = qb * kb.transpose();
      auto p = probs.middleRows((b * layout.heads + h) * tq, tq);
      for (Index i = 0; i < tq; ++i) {
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (Index j = 0; j < tk; ++j) {
          const bool visible = (!layout.causal || j <= i) && (layout.key_valid.empty() || layout.key_valid[b * tk + j]);
          if (visible) mx = std::max(mx, scores(i, j));
        }
        if (mx == -std::numeric_limits<Scalar>::infinity()) {
          p.row(i).setZero();
          continue;
        }
        Scalar total = 0;
        for (Index j = 0; j < tk; ++j) {
          const bool visible = (!layout.causal || j <= i) && (layout.key_valid.empty() || layout.key_valid[b * tk + j]);
          const Scalar e = visible ? std::exp((scores(i, j) - mx) * inv_sqrt) : Scalar(0);
          p(i, j) = e;
          total += e;
        }
        p.row(i) /= total;
      }
      out.block(b * tq, h * dh, tq, dh).noalias() = p * vb;
    }
  }
  auto result = detail::make_result<Scalar>({q.rows(), d}, std::move(out), "multi_head_attention");
  detail::record(result, {q, k, v},
                 [qn = q.node(), kn = k.node(), vn = v.node(), rn = result.node(), probs = std::move(probs),
                  batch = layout.batch, heads = layout.heads, tq, tk, dh, inv_sqrt] {
                   Matrix<Scalar> dp(tq, tk);
                   Matrix<Scalar> ds(tq, tk);
                   for (Index b = 0; b < batch; ++b) {
                     for (Index h = 0; h < heads; ++h) {
                       const auto p = probs.middleRows((b * heads + h) * tq, tq);
                       const auto dout = rn->grad.block(b * tq, h * dh, tq, dh);
                       if (vn->requires_grad) vn->grad.block(b * tk, h * dh, tk, dh).noalias() += p.transpose() * dout;
                       if (!qn->requires_grad && !kn->requires_grad) continue;
                       dp.noalias() = dout * vn->value.block(b * tk, h * dh, tk, dh).transpose();
                       const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = dp.cwiseProduct(p).rowwise().sum();
                       ds = p.cwiseProduct(dp.colwise() - row_dot) * inv_sqrt;
                       if (qn->requires_grad) {
                         qn->grad.block(b * tq, h * dh, tq, dh).noalias() +=
                             ds * kn->value.block(b * tk, h * dh, tk, dh);
                       }
                       if (kn->requires_grad) {
                         kn->grad.block(b * tk, h * dh, tk, dh).noalias() +=
                             ds.transpose() * qn->value.block(b * tq, h * dh, tq, dh);
                       }
                     }
                   }
                 });
  return result;
}

}  // namespace groundseq
