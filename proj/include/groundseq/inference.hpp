#pragma once

#include "groundseq/data.hpp"
#include "groundseq/postproc.hpp"
#include "groundseq/solver.hpp"

#include <span>
#include <string>
#include <vector>

namespace groundseq {

/// Instruction token ids, cut to the encoder's max_instr_len.
inline std::vector<int> instruction_ids(const std::string& text, const Vocabulary& v, const EncoderConfig& cfg) {
  auto ids = encode_text(text, v);
  if (static_cast<int>(ids.size()) > cfg.max_instr_len) ids.resize(static_cast<std::size_t>(cfg.max_instr_len));
  return ids;
}

/// Raw generation for one image and instruction; beam_width <= 1 is greedy.
template <typename Scalar>
GenerationResult generate(const GroundingModel<Scalar>& model, const Vocabulary& v, const Image& image,
                          const std::string& instruction, int task_token, int beam_width = 1) {
  const Image* img = &image;
  const auto mem = build_memory<Scalar>(std::span<const Image* const>(&img, 1),
                                        {instruction_ids(instruction, v, model.config.encoder)}, model.config,
                                        model.params);
  if (beam_width <= 1) return generate_greedy(mem, task_token, model.config.solver, model.params);
  return generate_beam(mem, task_token, beam_width, model.config.solver, model.params);
}

template <typename Scalar>
GroundingOutput predict_grounding(const GroundingModel<Scalar>& model, const Vocabulary& v, const Image& image,
                                  const std::string& instruction, int beam_width = 1) {
  // unfinished sequences run to max_gen_len tokens, so they never match the 4-token grammar
  const auto gen = generate(model, v, image, instruction, Vocabulary::kTaskGround, beam_width);
  return parse_grounding_sequence(gen.tokens, v, model.config.bins);
}

template <typename Scalar>
std::string predict_caption(const GroundingModel<Scalar>& model, const Vocabulary& v, const Image& image,
                            int beam_width = 1) {
  const auto gen = generate(model, v, image, kCaptionPrompt, Vocabulary::kTaskCaption, beam_width);
  return parse_caption_sequence(gen.tokens, v);
}

/// One prediction record per sample, in sample order.
template <typename Scalar>
std::vector<PredictionRecord> predict_samples(const GroundingModel<Scalar>& model, const Vocabulary& v,
                                              std::span<const Sample> samples, int beam_width = 1) {
  std::vector<PredictionRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(make_prediction(s.sample_id, predict_grounding(model, v, s.image, s.instruction, beam_width)));
  }
  return out;
}

}  // namespace groundseq
