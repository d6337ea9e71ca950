#pragma once

#include "groundseq/ops.hpp"
#include "groundseq/rng.hpp"
#include "groundseq/tensor.hpp"
#include "groundseq/vocab.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

struct EncoderConfig {
  int frame_width = 128;
  int frame_height = 128;
  int patch_size = 16;
  int d_model = 128;
  int n_layers_img = 2;
  int n_layers_txt = 2;
  int n_heads = 4;
  int max_instr_len = 16;
  int ffn_mult = 4;

  int patches_x() const { return frame_width / patch_size; }
  int patches_y() const { return frame_height / patch_size; }
  int num_patches() const { return patches_x() * patches_y(); }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (patch_size <= 0 || frame_width <= 0 || frame_height <= 0 || frame_width % patch_size != 0 ||
        frame_height % patch_size != 0) {
      throw std::invalid_argument("encoder: frame must be divisible by patch_size");
    }
    if (n_heads <= 0 || d_model <= 0 || d_model % n_heads != 0) {
      throw std::invalid_argument("encoder: d_model must be divisible by n_heads");
    }
    if (n_layers_img < 0 || n_layers_txt < 0 || max_instr_len <= 0 || ffn_mult <= 0) {
      throw std::invalid_argument("encoder: layer counts and lengths must be non-negative");
    }
  }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct SolverConfig {
  /// Self-attention layers over the fused memory before decoding.
  int n_enc_layers = 0;
  int n_dec_layers = 2;
  int n_heads = 4;
  int d_model = 128;
  /// Generated tokens after [BOS, task], EOS included.
  int max_gen_len = 16;
  int vocab_size = 0;
  int ffn_mult = 4;

  int max_positions() const { return max_gen_len + 2; }

  void validate() const {
    if (n_heads <= 0 || d_model <= 0 || d_model % n_heads != 0) {
      throw std::invalid_argument("solver: d_model must be divisible by n_heads");
    }
    if (max_gen_len < 6) throw std::invalid_argument("solver: max_gen_len must be at least 6");
    if (vocab_size <= Vocabulary::kNumControl) throw std::invalid_argument("solver: vocab_size too small");
    if (n_enc_layers < 0 || n_dec_layers < 0 || ffn_mult <= 0) {
      throw std::invalid_argument("solver: layer counts must be non-negative");
    }
  }
  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  SolverConfig solver;
  CoordBinSpec bins;

  void validate() const {
    encoder.validate();
    solver.validate();
    bins.validate();
    if (encoder.d_model != solver.d_model) throw std::invalid_argument("encoder and solver widths differ");
    if (bins.extent_w != encoder.frame_width || bins.extent_h != encoder.frame_height) {
      throw std::invalid_argument("coordinate extents must equal the encoder frame");
    }
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named learnable tensors, ordered by name.
template <typename Scalar>
class ModelParams {
 public:
  const Tensor<Scalar>& at(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<Scalar>& at(const std::string& name) {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  void add(const std::string& name, Tensor<Scalar> t) {
    t.set_requires_grad(true);
    if (!tensors_.emplace(name, std::move(t)).second) throw std::invalid_argument("duplicate parameter '" + name + "'");
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : tensors_) out.push_back(n);
    return out;
  }
  std::size_t size() const { return tensors_.size(); }
  Index count() const {
    Index n = 0;
    for (const auto& [name, t] : tensors_) n += t.numel();
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  /// Deep copy: no storage shared with this set.
  ModelParams clone() const {
    ModelParams out;
    for (const auto& [n, t] : tensors_) out.add(n, Tensor<Scalar>(t.shape(), t.value()));
    return out;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& [n, t] : tensors_) out.add(n, Tensor<Other>(t.shape(), t.value().template cast<Other>()));
    return out;
  }

 private:
  std::map<std::string, Tensor<Scalar>> tensors_;
};

namespace layers {

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
Tensor<Scalar> normal_init(Rng& rng, Index rows, Index cols, double stddev) {
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal() * stddev);
  return Tensor<Scalar>(std::move(m));
}

template <typename Scalar>
void add_linear(ModelParams<Scalar>& p, Rng& rng, const std::string& name, Index in, Index out) {
  p.add(name + ".weight", normal_init<Scalar>(rng, in, out, kInitStd));
  p.add(name + ".bias", Tensor<Scalar>::zeros({out}));
}

template <typename Scalar>
void add_layer_norm(ModelParams<Scalar>& p, const std::string& name, Index d) {
  p.add(name + ".gamma", Tensor<Scalar>(Shape{d}, Matrix<Scalar>::Ones(1, d)));
  p.add(name + ".beta", Tensor<Scalar>::zeros({d}));
}

template <typename Scalar>
void add_attention(ModelParams<Scalar>& p, Rng& rng, const std::string& name, Index d) {
  for (const char* part : {".q", ".k", ".v", ".out"}) add_linear(p, rng, name + part, d, d);
}

template <typename Scalar>
void add_ffn(ModelParams<Scalar>& p, Rng& rng, const std::string& name, Index d, Index mult) {
  add_linear(p, rng, name + ".fc1", d, d * mult);
  add_linear(p, rng, name + ".fc2", d * mult, d);
}

template <typename Scalar>
void add_encoder_block(ModelParams<Scalar>& p, Rng& rng, const std::string& name, Index d, Index mult) {
  add_layer_norm(p, name + ".ln1", d);
  add_attention(p, rng, name + ".attn", d);
  add_layer_norm(p, name + ".ln2", d);
  add_ffn(p, rng, name + ".ffn", d, mult);
}

template <typename Scalar>
void add_decoder_block(ModelParams<Scalar>& p, Rng& rng, const std::string& name, Index d, Index mult) {
  add_layer_norm(p, name + ".ln1", d);
  add_attention(p, rng, name + ".self_attn", d);
  add_layer_norm(p, name + ".ln2", d);
  add_attention(p, rng, name + ".cross_attn", d);
  add_layer_norm(p, name + ".ln3", d);
  add_ffn(p, rng, name + ".ffn", d, mult);
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const ModelParams<Scalar>& p, const std::string& name) {
  return add_bias(matmul(x, p.at(name + ".weight")), p.at(name + ".bias"));
}

template <typename Scalar>
Tensor<Scalar> norm(const Tensor<Scalar>& x, const ModelParams<Scalar>& p, const std::string& name) {
  return layer_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"), static_cast<Scalar>(kLayerNormEps));
}

template <typename Scalar>
Tensor<Scalar> attention(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys, const ModelParams<Scalar>& p,
                         const std::string& name, const AttentionLayout& layout) {
  auto q = linear(queries, p, name + ".q");
  auto k = linear(keys, p, name + ".k");
  auto v = linear(keys, p, name + ".v");
  return linear(multi_head_attention(q, k, v, layout), p, name + ".out");
}

template <typename Scalar>
Tensor<Scalar> ffn(const Tensor<Scalar>& x, const ModelParams<Scalar>& p, const std::string& name) {
  return linear(gelu(linear(x, p, name + ".fc1")), p, name + ".fc2");
}

/// Pre-norm self-attention block.
template <typename Scalar>
Tensor<Scalar> encoder_block(const Tensor<Scalar>& x, const ModelParams<Scalar>& p, const std::string& name,
                             const AttentionLayout& layout) {
  auto h = norm(x, p, name + ".ln1");
  auto y = x + attention(h, h, p, name + ".attn", layout);
  return y + ffn(norm(y, p, name + ".ln2"), p, name + ".ffn");
}

/// Pre-norm decoder block: causal self-attention, cross-attention to memory, feed-forward.
template <typename Scalar>
Tensor<Scalar> decoder_block(const Tensor<Scalar>& x, const Tensor<Scalar>& memory, const ModelParams<Scalar>& p,
                             const std::string& name, const AttentionLayout& self_layout,
                             const AttentionLayout& cross_layout) {
  auto h = norm(x, p, name + ".ln1");
  auto y = x + attention(h, h, p, name + ".self_attn", self_layout);
  y = y + attention(norm(y, p, name + ".ln2"), memory, p, name + ".cross_attn", cross_layout);
  return y + ffn(norm(y, p, name + ".ln3"), p, name + ".ffn");
}

}  // namespace layers

/// Freshly initialized parameters for every component of the model.
template <typename Scalar>
ModelParams<Scalar> init_model_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  using namespace layers;
  const auto& e = cfg.encoder;
  const auto& s = cfg.solver;
  const Index d = e.d_model;
  ModelParams<Scalar> p;

  add_linear(p, rng, "image.patch_embed", e.patch_dim(), d);
  p.add("image.pos_embed", normal_init<Scalar>(rng, e.num_patches(), d, kInitStd));
  for (int i = 0; i < e.n_layers_img; ++i) add_encoder_block(p, rng, "image.block" + std::to_string(i), d, e.ffn_mult);
  add_layer_norm(p, "image.ln_final", d);

  p.add("text.token_embed", normal_init<Scalar>(rng, s.vocab_size, d, kInitStd));
  p.add("text.pos_embed", normal_init<Scalar>(rng, e.max_instr_len, d, kInitStd));
  for (int i = 0; i < e.n_layers_txt; ++i) add_encoder_block(p, rng, "text.block" + std::to_string(i), d, e.ffn_mult);
  add_layer_norm(p, "text.ln_final", d);

  p.add("fusion.type_embed", normal_init<Scalar>(rng, 2, d, kInitStd));
  for (int i = 0; i < s.n_enc_layers; ++i) {
    add_encoder_block(p, rng, "solver.encoder.block" + std::to_string(i), d, s.ffn_mult);
  }
  if (s.n_enc_layers > 0) add_layer_norm(p, "solver.encoder.ln_final", d);

  p.add("decoder.token_embed", normal_init<Scalar>(rng, s.vocab_size, d, kInitStd));
  p.add("decoder.pos_embed", normal_init<Scalar>(rng, s.max_positions(), d, kInitStd));
  for (int i = 0; i < s.n_dec_layers; ++i) {
    add_decoder_block(p, rng, "decoder.block" + std::to_string(i), d, s.ffn_mult);
  }
  add_layer_norm(p, "decoder.ln_final", d);
  add_linear(p, rng, "decoder.head", d, s.vocab_size);
  return p;
}

/// Config plus weights; everything the forward pass needs.
template <typename Scalar>
struct GroundingModel {
  ModelConfig config;
  ModelParams<Scalar> params;

  static GroundingModel initialize(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "model-init"));
    return GroundingModel{cfg, init_model_params<Scalar>(cfg, rng)};
  }
};

}  // namespace groundseq
