#pragma once

#include "groundseq/image.hpp"
#include "groundseq/model.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

/// Non-overlapping patch_size x patch_size tiles in row-major tile order.
/// Each row is one tile flattened as (y, x, channel).
template <typename Scalar = double>
Matrix<Scalar> patchify(const Image& img, int patch_size) {
  if (patch_size <= 0 || img.width % patch_size != 0 || img.height % patch_size != 0) {
    throw std::invalid_argument("patchify: " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                " image is not divisible by patch size " + std::to_string(patch_size));
  }
  const int px = img.width / patch_size;
  const int py = img.height / patch_size;
  const int dim = patch_size * patch_size * Image::channels;
  Matrix<Scalar> out(px * py, dim);
  for (int ty = 0; ty < py; ++ty) {
    for (int tx = 0; tx < px; ++tx) {
      Scalar* row = out.row(ty * px + tx).data();
      for (int y = 0; y < patch_size; ++y) {
        const float* src = &img.pixels[(static_cast<std::size_t>(ty * patch_size + y) * img.width +
                                        tx * patch_size) * Image::channels];
        for (int k = 0; k < patch_size * Image::channels; ++k) row[y * patch_size * Image::channels + k] = src[k];
      }
    }
  }
  return out;
}

/// Inverse of patchify.
template <typename Scalar>
Image unpatchify(const Matrix<Scalar>& patches, int width, int height, int patch_size) {
  const int px = width / patch_size;
  const int py = height / patch_size;
  if (patches.rows() != px * py || patches.cols() != patch_size * patch_size * Image::channels) {
    throw std::invalid_argument("unpatchify: patch matrix does not match frame");
  }
  Image img(width, height);
  for (int ty = 0; ty < py; ++ty) {
    for (int tx = 0; tx < px; ++tx) {
      const Scalar* row = patches.row(ty * px + tx).data();
      for (int y = 0; y < patch_size; ++y) {
        float* dst = &img.pixels[(static_cast<std::size_t>(ty * patch_size + y) * width + tx * patch_size) *
                                 Image::channels];
        for (int k = 0; k < patch_size * Image::channels; ++k) {
          dst[k] = static_cast<float>(row[y * patch_size * Image::channels + k]);
        }
      }
    }
  }
  return img;
}

/// Image patch embeddings for a batch, rows [batch * num_patches, d_model].
///
/// patchify -> linear projection -> learned positional embedding ->
/// pre-norm self-attention blocks -> final layer norm. No class token and no
/// region proposals: one output row per patch.
template <typename Scalar>
Tensor<Scalar> encode_images(std::span<const Image* const> images, const EncoderConfig& cfg,
                             const ModelParams<Scalar>& params) {
  const Index batch = static_cast<Index>(images.size());
  const Index n = cfg.num_patches();
  Matrix<Scalar> patches(batch * n, cfg.patch_dim());
  for (Index b = 0; b < batch; ++b) {
    const Image& img = *images[b];
    if (img.width != cfg.frame_width || img.height != cfg.frame_height) {
      throw std::invalid_argument("encode_image: image is " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + ", canonical frame is " +
                                  std::to_string(cfg.frame_width) + "x" + std::to_string(cfg.frame_height));
    }
    patches.middleRows(b * n, n) = patchify<Scalar>(img, cfg.patch_size);
  }
  std::vector<Index> pos(batch * n);
  for (Index i = 0; i < batch * n; ++i) pos[i] = i % n;

  auto x = layers::linear(Tensor<Scalar>(std::move(patches)), params, "image.patch_embed");
  x = x + gather_rows(params.at("image.pos_embed"), pos);
  AttentionLayout layout{batch, n, n, cfg.n_heads, false, {}};
  for (int i = 0; i < cfg.n_layers_img; ++i) x = layers::encoder_block(x, params, "image.block" + std::to_string(i), layout);
  return layers::norm(x, params, "image.ln_final");
}

template <typename Scalar>
Tensor<Scalar> encode_image(const Image& img, const EncoderConfig& cfg, const ModelParams<Scalar>& params) {
  const Image* one = &img;
  return encode_images<Scalar>(std::span<const Image* const>(&one, 1), cfg, params);
}

/// Instruction embeddings for a batch padded to a common length.
template <typename Scalar>
struct InstructionEncoding {
  Tensor<Scalar> embeddings;  // [batch * length, d_model]
  Index batch = 0;
  Index length = 0;
  std::vector<std::uint8_t> valid;  // 0 on PAD positions
};

/// Token + positional embeddings through self-attention blocks, PAD keys masked.
///
/// Sequences shorter than the longest in the batch are right-padded with PAD;
/// explicit PAD ids inside a sequence are masked the same way.
template <typename Scalar>
InstructionEncoding<Scalar> encode_instructions(const std::vector<std::vector<int>>& batch_ids,
                                                const EncoderConfig& cfg, const ModelParams<Scalar>& params) {
  const Index batch = static_cast<Index>(batch_ids.size());
  const Index vocab = params.at("text.token_embed").rows();
  Index len = 0;
  for (const auto& ids : batch_ids) {
    if (static_cast<int>(ids.size()) > cfg.max_instr_len) {
      throw std::length_error("encode_instruction: " + std::to_string(ids.size()) + " tokens exceed max_instr_len " +
                              std::to_string(cfg.max_instr_len));
    }
    for (int id : ids) {
      if (id < 0 || id >= vocab) throw std::out_of_range("encode_instruction: invalid token id " + std::to_string(id));
    }
    len = std::max<Index>(len, static_cast<Index>(ids.size()));
  }
  InstructionEncoding<Scalar> enc;
  enc.batch = batch;
  enc.length = len;
  enc.valid.assign(batch * len, 0);
  if (len == 0) {
    enc.embeddings = Tensor<Scalar>::zeros({0, cfg.d_model});
    return enc;
  }
  std::vector<Index> tokens(batch * len, Vocabulary::kPad);
  std::vector<Index> pos(batch * len);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < len; ++t) {
      pos[b * len + t] = t;
      if (t < static_cast<Index>(batch_ids[b].size())) {
        tokens[b * len + t] = batch_ids[b][t];
        enc.valid[b * len + t] = batch_ids[b][t] != Vocabulary::kPad;
      }
    }
  }
  auto x = gather_rows(params.at("text.token_embed"), tokens) + gather_rows(params.at("text.pos_embed"), pos);
  AttentionLayout layout{batch, len, len, cfg.n_heads, false, enc.valid};
  for (int i = 0; i < cfg.n_layers_txt; ++i) x = layers::encoder_block(x, params, "text.block" + std::to_string(i), layout);
  enc.embeddings = layers::norm(x, params, "text.ln_final");
  return enc;
}

template <typename Scalar>
InstructionEncoding<Scalar> encode_instruction(const std::vector<int>& ids, const EncoderConfig& cfg,
                                               const ModelParams<Scalar>& params) {
  return encode_instructions<Scalar>({ids}, cfg, params);
}

/// Joint sequence the solver attends over.
template <typename Scalar>
struct Memory {
  Tensor<Scalar> sequence;  // [batch * length, d_model]
  Index batch = 0;
  Index length = 0;
  std::vector<std::uint8_t> key_valid;
};

/// Per sample: [image block ; instruction block], each row plus its modality-type embedding.
template <typename Scalar>
Memory<Scalar> fuse_modalities(const Tensor<Scalar>& image_emb, Index num_patches,
                               const InstructionEncoding<Scalar>& instr, const ModelParams<Scalar>& params) {
  if (instr.length > 0 && image_emb.cols() != instr.embeddings.cols()) {
    throw ShapeError("fuse_modalities: image width " + std::to_string(image_emb.cols()) + " vs instruction width " +
                     std::to_string(instr.embeddings.cols()));
  }
  const Index batch = instr.batch;
  if (image_emb.rows() != batch * num_patches) throw ShapeError("fuse_modalities: batch sizes differ");
  const Index len = num_patches + instr.length;

  Memory<Scalar> mem;
  mem.batch = batch;
  mem.length = len;
  mem.key_valid.assign(batch * len, 1);

  std::vector<Index> order(batch * len);
  std::vector<Index> types(batch * len);
  const Index instr_offset = batch * num_patches;
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < num_patches; ++i) {
      order[b * len + i] = b * num_patches + i;
      types[b * len + i] = 0;
    }
    for (Index t = 0; t < instr.length; ++t) {
      order[b * len + num_patches + t] = instr_offset + b * instr.length + t;
      types[b * len + num_patches + t] = 1;
      mem.key_valid[b * len + num_patches + t] = instr.valid[b * instr.length + t];
    }
  }
  Tensor<Scalar> joined = instr.length > 0 ? concat_rows<Scalar>({image_emb, instr.embeddings}) : image_emb;
  Tensor<Scalar> seq = batch == 1 ? joined : gather_rows(joined, order);
  mem.sequence = seq + gather_rows(params.at("fusion.type_embed"), types);
  return mem;
}

/// Full front end: images and instruction ids to the solver's memory.
template <typename Scalar>
Memory<Scalar> encode_inputs(std::span<const Image* const> images, const std::vector<std::vector<int>>& instr_ids,
                             const ModelConfig& cfg, const ModelParams<Scalar>& params) {
  if (images.size() != instr_ids.size()) throw std::invalid_argument("encode_inputs: batch sizes differ");
  auto img = encode_images<Scalar>(images, cfg.encoder, params);
  auto instr = encode_instructions<Scalar>(instr_ids, cfg.encoder, params);
  return fuse_modalities<Scalar>(img, cfg.encoder.num_patches(), instr, params);
}

}  // namespace groundseq
