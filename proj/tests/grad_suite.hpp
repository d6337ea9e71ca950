#pragma once

// Gradient-check cases shared by the unit tests and the acceptance binary.
// Every differentiable op, plus one encoder block and one decoder block,
// reduced to a scalar through a fixed random weighting.

#include "groundseq/gradcheck.hpp"
#include "groundseq/model.hpp"
#include "groundseq/ops.hpp"
#include "groundseq/rng.hpp"

#include <functional>
#include <string>
#include <vector>

namespace groundseq::testing {

using T = Tensor<double>;

inline Matrix<double> random_matrix(Rng& rng, Index rows, Index cols, double stddev = 1.0) {
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
  return m;
}

inline T random_tensor(Rng& rng, Index rows, Index cols, double stddev = 1.0) {
  return T(random_matrix(rng, rows, cols, stddev));
}

/// sum(y * w) for a fixed w; keeps gradients of shape-preserving ops non-trivial.
inline T weighted_sum(const T& y, const T& w) { return sum(mul(y, w)); }

struct GradCase {
  std::string name;
  /// Builds the closure and the evaluation point for draw `k`.
  std::function<std::pair<ScalarClosure<double>, T>(Rng&)> make;
};

/// Parameters for a single block, drawn wide enough that gradients are not tiny.
inline ModelParams<double> block_params(Rng& rng, Index d, bool decoder) {
  ModelParams<double> p;
  if (decoder) {
    layers::add_decoder_block(p, rng, "blk", d, 2);
  } else {
    layers::add_encoder_block(p, rng, "blk", d, 2);
  }
  for (auto& [name, t] : p) {
    auto& v = t.mutable_value();
    const bool is_gamma = name.size() > 6 && name.substr(name.size() - 6) == ".gamma";
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = (is_gamma ? 1.0 : 0.0) + 0.3 * rng.normal();
  }
  return p;
}

inline std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, Index r, Index c, std::function<T(const T&)> op) {
    cases.push_back({name, [r, c, op](Rng& rng) {
                       T w = random_tensor(rng, r, c);
                       ScalarClosure<double> f = [op, w](const T& x) { return weighted_sum(op(x), w); };
                       return std::make_pair(f, random_tensor(rng, r, c));
                     }});
  };
  auto binary_lhs_rhs = [&](std::string name, Index ra, Index ca, Index rb, Index cb, Index ro, Index co,
                            std::function<T(const T&, const T&)> op) {
    cases.push_back({name + " (lhs)", [=](Rng& rng) {
                       T b = random_tensor(rng, rb, cb);
                       T w = random_tensor(rng, ro, co);
                       ScalarClosure<double> f = [=](const T& x) { return weighted_sum(op(x, b), w); };
                       return std::make_pair(f, random_tensor(rng, ra, ca));
                     }});
    cases.push_back({name + " (rhs)", [=](Rng& rng) {
                       T a = random_tensor(rng, ra, ca);
                       T w = random_tensor(rng, ro, co);
                       ScalarClosure<double> f = [=](const T& x) { return weighted_sum(op(a, x), w); };
                       return std::make_pair(f, random_tensor(rng, rb, cb));
                     }});
  };

  binary_lhs_rhs("matmul", 3, 4, 4, 2, 3, 2, [](const T& a, const T& b) { return matmul(a, b); });
  binary_lhs_rhs("add", 3, 4, 3, 4, 3, 4, [](const T& a, const T& b) { return add(a, b); });
  binary_lhs_rhs("sub", 3, 4, 3, 4, 3, 4, [](const T& a, const T& b) { return sub(a, b); });
  binary_lhs_rhs("mul", 3, 4, 3, 4, 3, 4, [](const T& a, const T& b) { return mul(a, b); });
  binary_lhs_rhs("add_bias", 3, 4, 1, 4, 3, 4, [](const T& a, const T& b) { return add_bias(a, b); });
  unary("scale", 3, 4, [](const T& x) { return scale(x, -1.7); });
  cases.push_back({"sum", [](Rng& rng) {
                     T w = random_tensor(rng, 3, 4);
                     ScalarClosure<double> f = [w](const T& x) { return sum(mul(x, w)); };
                     return std::make_pair(f, random_tensor(rng, 3, 4));
                   }});
  cases.push_back({"mean", [](Rng& rng) {
                     T w = random_tensor(rng, 3, 4);
                     ScalarClosure<double> f = [w](const T& x) { return mean(mul(x, w)); };
                     return std::make_pair(f, random_tensor(rng, 3, 4));
                   }});
  unary("gelu", 3, 4, [](const T& x) { return gelu(x); });
  unary("softmax (last axis)", 3, 5, [](const T& x) { return softmax(x, -1); });
  cases.push_back({"softmax (axis 0)", [](Rng& rng) {
                     T w = random_tensor(rng, 4, 3);
                     ScalarClosure<double> f = [w](const T& x) {
                       return weighted_sum(softmax(x, 0), w);
                     };
                     return std::make_pair(f, random_tensor(rng, 4, 3));
                   }});
  cases.push_back({"layer_norm (x)", [](Rng& rng) {
                     T g = random_tensor(rng, 1, 6);
                     T b = random_tensor(rng, 1, 6);
                     T w = random_tensor(rng, 3, 6);
                     ScalarClosure<double> f = [=](const T& x) { return weighted_sum(layer_norm(x, g, b, 1e-5), w); };
                     return std::make_pair(f, random_tensor(rng, 3, 6));
                   }});
  cases.push_back({"layer_norm (gamma)", [](Rng& rng) {
                     T x = random_tensor(rng, 3, 6);
                     T b = random_tensor(rng, 1, 6);
                     T w = random_tensor(rng, 3, 6);
                     ScalarClosure<double> f = [=](const T& g) { return weighted_sum(layer_norm(x, g, b, 1e-5), w); };
                     return std::make_pair(f, random_tensor(rng, 1, 6));
                   }});
  cases.push_back({"layer_norm (beta)", [](Rng& rng) {
                     T x = random_tensor(rng, 3, 6);
                     T g = random_tensor(rng, 1, 6);
                     T w = random_tensor(rng, 3, 6);
                     ScalarClosure<double> f = [=](const T& b) { return weighted_sum(layer_norm(x, g, b, 1e-5), w); };
                     return std::make_pair(f, random_tensor(rng, 1, 6));
                   }});
  cases.push_back({"cross_entropy_masked", [](Rng& rng) {
                     std::vector<int> targets(4);
                     for (auto& t : targets) t = static_cast<int>(rng.uniform_int(0, 5));
                     std::vector<std::uint8_t> mask = {1, 0, 1, 1};
                     ScalarClosure<double> f = [=](const T& x) { return cross_entropy_masked(x, targets, mask); };
                     return std::make_pair(f, random_tensor(rng, 4, 6));
                   }});
  cases.push_back({"gather_rows", [](Rng& rng) {
                     const std::vector<Index> rows = {2, 0, 2, 3};
                     T w = random_tensor(rng, 4, 3);
                     ScalarClosure<double> f = [=](const T& x) { return weighted_sum(gather_rows(x, rows), w); };
                     return std::make_pair(f, random_tensor(rng, 5, 3));
                   }});
  cases.push_back({"concat_rows", [](Rng& rng) {
                     T other = random_tensor(rng, 2, 3);
                     T w = random_tensor(rng, 5, 3);
                     ScalarClosure<double> f = [=](const T& x) { return weighted_sum(concat_rows<double>({other, x}), w); };
                     return std::make_pair(f, random_tensor(rng, 3, 3));
                   }});
  for (int which = 0; which < 3; ++which) {
    static const char* names[] = {"multi_head_attention (q)", "multi_head_attention (k)", "multi_head_attention (v)"};
    cases.push_back({names[which], [which](Rng& rng) {
                       AttentionLayout lay;
                       lay.batch = 2;
                       lay.query_len = 3;
                       lay.key_len = 3;
                       lay.heads = 2;
                       lay.causal = true;
                       lay.key_valid = {1, 1, 1, 1, 1, 0};
                       T q = random_tensor(rng, 6, 4);
                       T k = random_tensor(rng, 6, 4);
                       T v = random_tensor(rng, 6, 4);
                       T w = random_tensor(rng, 6, 4);
                       ScalarClosure<double> f = [=](const T& x) {
                         return weighted_sum(multi_head_attention(which == 0 ? x : q, which == 1 ? x : k,
                                                                  which == 2 ? x : v, lay),
                                             w);
                       };
                       return std::make_pair(f, random_tensor(rng, 6, 4));
                     }});
  }
  cases.push_back({"encoder block", [](Rng& rng) {
                     const Index d = 8;
                     auto p = block_params(rng, d, false);
                     AttentionLayout lay;
                     lay.batch = 1;
                     lay.query_len = lay.key_len = 4;
                     lay.heads = 2;
                     lay.key_valid = {1, 1, 1, 0};
                     T w = random_tensor(rng, 4, d);
                     ScalarClosure<double> f = [p, lay, w](const T& x) {
                       return weighted_sum(layers::encoder_block(x, p, "blk", lay), w);
                     };
                     return std::make_pair(f, random_tensor(rng, 4, d));
                   }});
  cases.push_back({"decoder block", [](Rng& rng) {
                     const Index d = 8;
                     auto p = block_params(rng, d, true);
                     AttentionLayout self;
                     self.batch = 1;
                     self.query_len = self.key_len = 3;
                     self.heads = 2;
                     self.causal = true;
                     AttentionLayout cross;
                     cross.batch = 1;
                     cross.query_len = 3;
                     cross.key_len = 5;
                     cross.heads = 2;
                     cross.key_valid = {1, 1, 1, 1, 0};
                     T memory = random_tensor(rng, 5, d);
                     T w = random_tensor(rng, 3, d);
                     ScalarClosure<double> f = [=](const T& x) {
                       return weighted_sum(layers::decoder_block(x, memory, p, "blk", self, cross), w);
                     };
                     return std::make_pair(f, random_tensor(rng, 3, d));
                   }});
  cases.push_back({"decoder block (cross-attention weight)", [](Rng& rng) {
                     const Index d = 8;
                     auto p = block_params(rng, d, true);
                     AttentionLayout self;
                     self.query_len = self.key_len = 3;
                     self.heads = 2;
                     self.causal = true;
                     AttentionLayout cross;
                     cross.query_len = 3;
                     cross.key_len = 5;
                     cross.heads = 2;
                     T x = random_tensor(rng, 3, d);
                     T memory = random_tensor(rng, 5, d);
                     T w = random_tensor(rng, 3, d);
                     const Matrix<double> start = p.at("blk.cross_attn.k.weight").value();
                     ScalarClosure<double> f = [=](const T& kw) mutable {
                       auto params = p.clone();
                       params.at("blk.cross_attn.k.weight") = kw;
                       return weighted_sum(layers::decoder_block(x, memory, params, "blk", self, cross), w);
                     };
                     return std::make_pair(f, T(start));
                   }});
  return cases;
}

struct GradCaseResult {
  std::string name;
  double worst = 0;
};

/// Worst relative error of each case over `points` random draws.
inline std::vector<GradCaseResult> run_grad_suite(std::uint64_t seed, int points, double eps) {
  std::vector<GradCaseResult> out;
  Rng rng(seed);
  for (const auto& c : grad_cases()) {
    GradCaseResult r{c.name, 0.0};
    for (int k = 0; k < points; ++k) {
      auto [f, x] = c.make(rng);
      r.worst = std::max(r.worst, finite_difference_check<double>(f, x, eps));
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace groundseq::testing
