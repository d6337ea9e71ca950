#pragma once

#include "groundseq/encoders.hpp"
#include "groundseq/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

/// Optional joint self-attention over the fused memory (solver encoder half).
template <typename Scalar>
Memory<Scalar> solver_encode(Memory<Scalar> mem, const SolverConfig& cfg, const ModelParams<Scalar>& params) {
  if (cfg.n_enc_layers == 0) return mem;
  AttentionLayout layout{mem.batch, mem.length, mem.length, cfg.n_heads, false, mem.key_valid};
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    mem.sequence = layers::encoder_block(mem.sequence, params, "solver.encoder.block" + std::to_string(i), layout);
  }
  mem.sequence = layers::norm(mem.sequence, params, "solver.encoder.ln_final");
  return mem;
}

/// Images and instruction ids to the memory the decoder reads.
template <typename Scalar>
Memory<Scalar> build_memory(std::span<const Image* const> images, const std::vector<std::vector<int>>& instr_ids,
                            const ModelConfig& cfg, const ModelParams<Scalar>& params) {
  return solver_encode(encode_inputs<Scalar>(images, instr_ids, cfg, params), cfg.solver, params);
}

/// Decoder logits for right-padded prefixes, rows [batch * T, vocab_size].
///
/// Row t of each sample depends only on prefix[0..t] and that sample's memory.
template <typename Scalar>
Tensor<Scalar> decoder_logits(const Memory<Scalar>& memory, const std::vector<std::vector<int>>& prefixes,
                              const SolverConfig& cfg, const ModelParams<Scalar>& params) {
  const Index batch = static_cast<Index>(prefixes.size());
  if (batch != memory.batch) throw std::invalid_argument("decoder: prefix batch does not match memory batch");
  Index len = 0;
  for (const auto& p : prefixes) len = std::max<Index>(len, static_cast<Index>(p.size()));
  if (len > cfg.max_positions()) {
    throw std::length_error("decoder: prefix of " + std::to_string(len) + " tokens exceeds " +
                            std::to_string(cfg.max_positions()) + " positions");
  }
  if (len == 0) throw std::invalid_argument("decoder: empty prefix");
  std::vector<Index> tokens(batch * len, Vocabulary::kPad);
  std::vector<Index> pos(batch * len);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < len; ++t) {
      pos[b * len + t] = t;
      if (t < static_cast<Index>(prefixes[b].size())) {
        const int id = prefixes[b][t];
        if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("decoder: invalid token id " + std::to_string(id));
        tokens[b * len + t] = id;
      }
    }
  }
  auto x = gather_rows(params.at("decoder.token_embed"), tokens) + gather_rows(params.at("decoder.pos_embed"), pos);
  const AttentionLayout self_layout{batch, len, len, cfg.n_heads, true, {}};
  const AttentionLayout cross_layout{batch, len, memory.length, cfg.n_heads, false, memory.key_valid};
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    x = layers::decoder_block(x, memory.sequence, params, "decoder.block" + std::to_string(i), self_layout,
                              cross_layout);
  }
  return layers::linear(layers::norm(x, params, "decoder.ln_final"), params, "decoder.head");
}

/// Teacher-forced logits for one sample: row t scores the token after prefix[t].
template <typename Scalar>
Tensor<Scalar> forward_teacher_forced(const Memory<Scalar>& memory, const std::vector<int>& target_prefix,
                                      const SolverConfig& cfg, const ModelParams<Scalar>& params) {
  if (target_prefix.size() < 2 || target_prefix[0] != Vocabulary::kBos ||
      (target_prefix[1] != Vocabulary::kTaskGround && target_prefix[1] != Vocabulary::kTaskCaption)) {
    throw std::invalid_argument("forward_teacher_forced: prefix must start with BOS and a task token");
  }
  return decoder_logits<Scalar>(memory, {target_prefix}, cfg, params);
}

struct GenerationResult {
  std::vector<int> tokens;  // generated payload; excludes BOS, the task token and EOS
  double log_prob = 0;      // sum of chosen log-softmax values, EOS step included
  bool finished = false;    // EOS emitted within max_gen_len

  friend bool operator==(const GenerationResult&, const GenerationResult&) = default;
};

/// Log-probabilities of the next token given the full prefix so far.
using NextTokenScorer = std::function<Eigen::VectorXd(const std::vector<int>& prefix)>;

struct DecodeOptions {
  int eos_id = Vocabulary::kEos;
  int max_gen_len = 16;
  /// Never emitted.
  std::vector<int> banned = {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kTaskGround, Vocabulary::kTaskCaption};
};

inline Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

namespace detail {

inline bool is_banned(const DecodeOptions& opts, int id) {
  return std::find(opts.banned.begin(), opts.banned.end(), id) != opts.banned.end();
}

}  // namespace detail

/// Argmax decoding; ties go to the lowest id.
inline GenerationResult greedy_decode(const NextTokenScorer& scorer, const std::vector<int>& start,
                                      const DecodeOptions& opts) {
  GenerationResult result;
  std::vector<int> prefix = start;
  for (int step = 0; step < opts.max_gen_len; ++step) {
    const Eigen::VectorXd lp = scorer(prefix);
    int best = -1;
    for (int id = 0; id < lp.size(); ++id) {
      if (detail::is_banned(opts, id)) continue;
      if (best < 0 || lp(id) > lp(best)) best = id;
    }
    if (best < 0) throw std::logic_error("greedy_decode: every token is banned");
    result.log_prob += lp(best);
    if (best == opts.eos_id) {
      result.finished = true;
      return result;
    }
    result.tokens.push_back(best);
    prefix.push_back(best);
  }
  return result;
}

/// Beam search ranked by length-normalized log-probability.
///
/// Each step keeps the beam_width best extensions by cumulative log-prob;
/// extensions ending in EOS retire to the finished pool. The answer is the
/// pool entry (finished, or live at max length) with the best mean log-prob
/// per generated token. beam_width == 1 reproduces greedy_decode.
inline GenerationResult beam_decode(const NextTokenScorer& scorer, const std::vector<int>& start,
                                    const DecodeOptions& opts, int beam_width) {
  if (beam_width < 1) throw std::invalid_argument("beam_decode: beam_width must be at least 1");
  struct Hyp {
    std::vector<int> tokens;
    double log_prob = 0;
    bool finished = false;
  };
  struct Candidate {
    double score;
    std::size_t parent;
    int token;
  };
  std::vector<Hyp> live{Hyp{}};
  std::vector<Hyp> pool;
  for (int step = 0; step < opts.max_gen_len && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      std::vector<int> prefix = start;
      prefix.insert(prefix.end(), live[h].tokens.begin(), live[h].tokens.end());
      const Eigen::VectorXd lp = scorer(prefix);
      for (int id = 0; id < lp.size(); ++id) {
        if (!detail::is_banned(opts, id)) cands.push_back({live[h].log_prob + lp(id), h, id});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (cands.size() > static_cast<std::size_t>(beam_width)) cands.resize(beam_width);
    std::vector<Hyp> next;
    for (const auto& c : cands) {
      Hyp h{live[c.parent].tokens, c.score, false};
      if (c.token == opts.eos_id) {
        h.finished = true;
        pool.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) pool.push_back(std::move(h));
  if (pool.empty()) throw std::logic_error("beam_decode: no hypotheses");

  auto normalized = [](const Hyp& h) {
    const double steps = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
    return h.log_prob / std::max(steps, 1.0);
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (normalized(pool[i]) > normalized(pool[best])) best = i;
  }
  return GenerationResult{pool[best].tokens, pool[best].log_prob, pool[best].finished};
}

/// Scorer backed by the decoder for a single-sample memory.
template <typename Scalar>
NextTokenScorer decoder_scorer(const Memory<Scalar>& memory, const SolverConfig& cfg,
                               const ModelParams<Scalar>& params) {
  if (memory.batch != 1) throw std::invalid_argument("decoder_scorer: memory must hold one sample");
  return [&memory, &cfg, &params](const std::vector<int>& prefix) -> Eigen::VectorXd {
    const auto logits = decoder_logits<Scalar>(memory, {prefix}, cfg, params);
    const Eigen::VectorXd last = logits.value().row(logits.rows() - 1).transpose().template cast<double>();
    return log_softmax(last);
  };
}

template <typename Scalar>
GenerationResult generate_greedy(const Memory<Scalar>& memory, int task_token, const SolverConfig& cfg,
                                 const ModelParams<Scalar>& params) {
  DecodeOptions opts;
  opts.max_gen_len = cfg.max_gen_len;
  return greedy_decode(decoder_scorer(memory, cfg, params), {Vocabulary::kBos, task_token}, opts);
}

template <typename Scalar>
GenerationResult generate_beam(const Memory<Scalar>& memory, int task_token, int beam_width, const SolverConfig& cfg,
                               const ModelParams<Scalar>& params) {
  if (beam_width < 1) throw std::invalid_argument("generate_beam: beam_width must be at least 1");
  DecodeOptions opts;
  opts.max_gen_len = cfg.max_gen_len;
  return beam_decode(decoder_scorer(memory, cfg, params), {Vocabulary::kBos, task_token}, opts, beam_width);
}

}  // namespace groundseq
