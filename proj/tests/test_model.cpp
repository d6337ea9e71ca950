#include "doctest.h"
#include "grad_suite.hpp"
#include "tiny_model.hpp"

#include "groundseq/encoders.hpp"
#include "groundseq/gradcheck.hpp"
#include "groundseq/solver.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

using namespace groundseq;
using groundseq::testing::random_image;
using groundseq::testing::tiny_config;
using groundseq::testing::widen_params;
using T = Tensor<double>;

namespace {

struct Tiny {
  ModelConfig cfg;
  ModelParams<double> params;
};

Tiny make_tiny(std::uint64_t seed, int vocab_size = 60) {
  Tiny t{tiny_config(vocab_size), {}};
  Rng rng(seed);
  t.params = init_model_params<double>(t.cfg, rng);
  widen_params(t.params, rng);
  return t;
}

Memory<double> memory_for(const Tiny& t, const Image& img, const std::vector<int>& ids) {
  const Image* one = &img;
  return build_memory<double>(std::span<const Image* const>(&one, 1), {ids}, t.cfg, t.params);
}

}  // namespace

TEST_CASE("patchify: counts, constant image and round trip") {
  Image img(128, 128, 0.5f);
  const Matrix<double> p = patchify<double>(img, 16);
  CHECK(p.rows() == 64);
  CHECK(p.cols() == 768);
  CHECK((p.array() == 0.5).all());

  Rng rng(41);
  const Image r = random_image(rng, 48, 32);
  CHECK(unpatchify(patchify<double>(r, 16), 48, 32, 16) == r);
  CHECK_THROWS(patchify<double>(Image(30, 32), 16));
}

TEST_CASE("patchify: row-major tile order, (y, x, channel) within a tile") {
  Image img(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>((y * 4 + x) * 3 + c) / 64.0f;
  const Matrix<double> p = patchify<double>(img, 2);
  // tile 1 is the top-right 2x2 block; its first pixel is (2, 0)
  CHECK(p(1, 0) == doctest::Approx(img.at(2, 0, 0)));
  CHECK(p(1, 3) == doctest::Approx(img.at(3, 0, 0)));
  CHECK(p(1, 6) == doctest::Approx(img.at(2, 1, 0)));
  CHECK(p(2, 0) == doctest::Approx(img.at(0, 2, 0)));
}

TEST_CASE("encode_image: shape, frame check and zero-input forcing") {
  Tiny t = make_tiny(1);
  Rng rng(42);
  const Image img = random_image(rng, 32, 32);
  const T out = encode_image<double>(img, t.cfg.encoder, t.params);
  CHECK(out.rows() == 16);
  CHECK(out.cols() == 16);
  CHECK_THROWS(encode_image<double>(Image(64, 64), t.cfg.encoder, t.params));

  t.params.at("image.patch_embed.weight").mutable_value().setZero();
  t.params.at("image.patch_embed.bias").mutable_value().setZero();
  const T zero_out = encode_image<double>(Image(32, 32), t.cfg.encoder, t.params);
  // the oracle: positional rows alone through the same blocks
  AttentionLayout lay{1, 16, 16, 2, false, {}};
  T x(t.params.at("image.pos_embed").value());
  x = layers::encoder_block(x, t.params, "image.block0", lay);
  const T want = layers::norm(x, t.params, "image.ln_final");
  CHECK(zero_out.value() == want.value());
  CHECK(encode_image<double>(img, t.cfg.encoder, t.params).value() == want.value());
}

TEST_CASE("encode_image: sensitive to a single patch and deterministic") {
  const Tiny t = make_tiny(2);
  Rng rng(43);
  const Image a = random_image(rng, 32, 32);
  Image b = a;
  for (int y = 8; y < 16; ++y)
    for (int x = 16; x < 24; ++x) b.at(x, y, 1) = 1.0f - b.at(x, y, 1);
  const T ea = encode_image<double>(a, t.cfg.encoder, t.params);
  CHECK_FALSE(ea.value() == encode_image<double>(b, t.cfg.encoder, t.params).value());
  CHECK(ea.value() == encode_image<double>(a, t.cfg.encoder, t.params).value());

  const Tiny again = make_tiny(2);
  CHECK(encode_image<double>(a, again.cfg.encoder, again.params).value() == ea.value());
}

TEST_CASE("encode_instruction: shape, errors and pad invariance") {
  const Tiny t = make_tiny(3);
  CHECK(encode_instruction<double>({Vocabulary::kBos}, t.cfg.encoder, t.params).embeddings.rows() == 1);
  CHECK(encode_instruction<double>({Vocabulary::kBos}, t.cfg.encoder, t.params).embeddings.cols() == 16);
  CHECK_THROWS_AS(encode_instruction<double>(std::vector<int>(13, 20), t.cfg.encoder, t.params), std::length_error);
  CHECK_THROWS_AS(encode_instruction<double>({20, 60}, t.cfg.encoder, t.params), std::out_of_range);

  const std::vector<int> ids = {20, 31, 44, 25};
  std::vector<int> padded = ids;
  padded.resize(12, Vocabulary::kPad);
  const auto a = encode_instruction<double>(ids, t.cfg.encoder, t.params);
  const auto b = encode_instruction<double>(padded, t.cfg.encoder, t.params);
  REQUIRE(b.embeddings.rows() == 12);
  CHECK((a.embeddings.value() - b.embeddings.value().topRows(4)).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(std::count(b.valid.begin(), b.valid.end(), 1) == 4);

  // batch padding behaves the same as explicit PAD ids
  const auto batch = encode_instructions<double>({ids, {20, 31, 44, 25, 33, 40}}, t.cfg.encoder, t.params);
  CHECK((a.embeddings.value() - batch.embeddings.value().topRows(4)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("encode_instruction: word order matters") {
  const Tiny t = make_tiny(4);
  const auto a = encode_instruction<double>({20, 31, 44}, t.cfg.encoder, t.params);
  const auto b = encode_instruction<double>({31, 20, 44}, t.cfg.encoder, t.params);
  CHECK_FALSE(a.embeddings.value() == b.embeddings.value());
}

TEST_CASE("fuse_modalities: lengths, empty instruction and width check") {
  ModelConfig cfg = tiny_config(60);
  cfg.encoder.frame_width = cfg.encoder.frame_height = 64;
  cfg.bins = CoordBinSpec{32, 64, 64};
  Rng rng(44);
  auto params = init_model_params<double>(cfg, rng);
  const Image img = random_image(rng, 64, 64);
  const Image* one = &img;
  const auto mem = encode_inputs<double>(std::span<const Image* const>(&one, 1), {{20, 21, 22, 23, 24, 25, 26, 27, 28}},
                                         cfg, params);
  CHECK(mem.length == 64 + 9);
  CHECK(mem.sequence.rows() == 73);

  const T emb = encode_image<double>(img, cfg.encoder, params);
  const auto empty = encode_instructions<double>({{}}, cfg.encoder, params);
  const auto fused = fuse_modalities<double>(emb, 64, empty, params);
  CHECK(fused.length == 64);
  Matrix<double> want = emb.value();
  want.rowwise() += params.at("fusion.type_embed").value().row(0);
  CHECK(fused.sequence.value() == want);

  const auto instr = encode_instructions<double>({{20}}, cfg.encoder, params);
  CHECK_THROWS_AS(fuse_modalities<double>(T(Matrix<double>::Zero(64, 8)), 64, instr, params), ShapeError);
}

TEST_CASE("fused image block does not depend on the instruction") {
  const Tiny t = make_tiny(5);
  Rng rng(45);
  const Image img = random_image(rng, 32, 32);
  const Image* one = &img;
  const auto a = encode_inputs<double>(std::span<const Image* const>(&one, 1), {{20, 21, 22}}, t.cfg, t.params);
  const auto b = encode_inputs<double>(std::span<const Image* const>(&one, 1), {{40, 50}}, t.cfg, t.params);
  CHECK(a.sequence.value().topRows(16) == b.sequence.value().topRows(16));
}

TEST_CASE("cross-attention is equivariant to swapping the memory blocks") {
  const Tiny t = make_tiny(6);
  Rng rng(46);
  const Image img = random_image(rng, 32, 32);
  const T image_emb = encode_image<double>(img, t.cfg.encoder, t.params);
  const auto instr = encode_instruction<double>({20, 21, 22, 23}, t.cfg.encoder, t.params);
  const Matrix<double> types = t.params.at("fusion.type_embed").value();
  Matrix<double> img_block = image_emb.value();
  img_block.rowwise() += types.row(0);
  Matrix<double> txt_block = instr.embeddings.value();
  txt_block.rowwise() += types.row(1);

  Matrix<double> forward(20, 16), swapped(20, 16);
  forward << img_block, txt_block;
  swapped << txt_block, img_block;
  const T queries = groundseq::testing::random_tensor(rng, 3, 16);
  AttentionLayout lay{1, 3, 20, 2, false, {}};
  const T a = layers::attention(queries, T(forward), t.params, "decoder.block0.cross_attn", lay);
  const T b = layers::attention(queries, T(swapped), t.params, "decoder.block0.cross_attn", lay);
  CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("gradient through one full encoder block of the image encoder") {
  const Tiny t = make_tiny(7);
  Rng rng(47);
  AttentionLayout lay{1, 16, 16, 2, false, {}};
  const T w = groundseq::testing::random_tensor(rng, 16, 16);
  ScalarClosure<double> f = [&](const T& x) {
    return groundseq::testing::weighted_sum(layers::encoder_block(x, t.params, "image.block0", lay), w);
  };
  CHECK(finite_difference_check<double>(f, groundseq::testing::random_tensor(rng, 16, 16), 1e-5) <= 1e-4);
}

TEST_CASE("forward_teacher_forced: shape, prefix checks and causality") {
  const Tiny t = make_tiny(8);
  Rng rng(48);
  const Image img = random_image(rng, 32, 32);
  const auto mem = memory_for(t, img, {20, 21, 22});
  const T two = forward_teacher_forced<double>(mem, {Vocabulary::kBos, Vocabulary::kTaskGround}, t.cfg.solver, t.params);
  CHECK(two.rows() == 2);
  CHECK(two.cols() == 60);
  CHECK_THROWS(forward_teacher_forced<double>(mem, {Vocabulary::kTaskGround, Vocabulary::kBos}, t.cfg.solver, t.params));
  CHECK_THROWS(forward_teacher_forced<double>(mem, std::vector<int>(11, Vocabulary::kBos), t.cfg.solver, t.params));

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> prefix = {Vocabulary::kBos, Vocabulary::kTaskGround};
    const int len = static_cast<int>(rng.uniform_int(3, 10));
    while (static_cast<int>(prefix.size()) < len) prefix.push_back(static_cast<int>(rng.uniform_int(7, 59)));
    const int t_change = static_cast<int>(rng.uniform_int(2, len - 1));
    std::vector<int> other = prefix;
    other[t_change] = other[t_change] == 7 ? 8 : 7;
    const Matrix<double> a = forward_teacher_forced<double>(mem, prefix, t.cfg.solver, t.params).value();
    const Matrix<double> b = forward_teacher_forced<double>(mem, other, t.cfg.solver, t.params).value();
    CHECK(a.topRows(t_change) == b.topRows(t_change));
    CHECK_FALSE(a.row(t_change) == b.row(t_change));
  }
}

TEST_CASE("loss gradient for a decoder weight matches finite differences") {
  const Tiny t = make_tiny(9);
  Rng rng(49);
  const Image img = random_image(rng, 32, 32);
  const std::vector<int> prefix = {Vocabulary::kBos, Vocabulary::kTaskGround, 10, 20, 30, 40};
  const std::vector<int> targets = {10, 20, 30, 40, Vocabulary::kEos, 0};
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 0};
  const std::string name = "decoder.block0.cross_attn.q.weight";
  ScalarClosure<double> f = [&](const T& wq) {
    auto params = t.params.clone();
    params.at(name) = wq;
    const Image* one = &img;
    const auto mem = build_memory<double>(std::span<const Image* const>(&one, 1), {{20, 21}}, t.cfg, params);
    return cross_entropy_masked(forward_teacher_forced<double>(mem, prefix, t.cfg.solver, params), targets, mask);
  };
  CHECK(finite_difference_check<double>(f, T(t.params.at(name).value()), 1e-5) <= 1e-4);
}

TEST_CASE("generate_greedy: a model that always prefers EOS") {
  Tiny t = make_tiny(10);
  t.params.at("decoder.head.weight").mutable_value().setZero();
  auto& bias = t.params.at("decoder.head.bias").mutable_value();
  bias.setZero();
  bias(0, Vocabulary::kEos) = 50;
  Rng rng(50);
  const auto mem = memory_for(t, random_image(rng, 32, 32), {20});
  const GenerationResult r = generate_greedy<double>(mem, Vocabulary::kTaskGround, t.cfg.solver, t.params);
  CHECK(r.tokens.empty());
  CHECK(r.finished);
  CHECK(r.log_prob == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("generate_greedy: deterministic, bounded, never PAD or BOS") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tiny t = make_tiny(100 + seed);
    Rng rng(seed);
    const auto mem = memory_for(t, random_image(rng, 32, 32), {20, 30});
    const auto a = generate_greedy<double>(mem, Vocabulary::kTaskGround, t.cfg.solver, t.params);
    const auto b = generate_greedy<double>(mem, Vocabulary::kTaskGround, t.cfg.solver, t.params);
    CHECK(a == b);
    CHECK(static_cast<int>(a.tokens.size()) + (a.finished ? 1 : 0) <= t.cfg.solver.max_gen_len);
    for (int id : a.tokens) {
      CHECK(id < t.cfg.solver.vocab_size);
      CHECK(id != Vocabulary::kPad);
      CHECK(id != Vocabulary::kBos);
      CHECK(id != Vocabulary::kEos);
    }
  }
}

TEST_CASE("greedy_decode: ties go to the lowest id") {
  NextTokenScorer flat = [](const std::vector<int>& prefix) {
    Eigen::VectorXd lp = Eigen::VectorXd::Constant(10, -5.0);
    if (prefix.size() >= 4) lp(Vocabulary::kEos) = 0;
    lp(8) = lp(9) = -1.0;
    return lp;
  };
  const auto r = greedy_decode(flat, {Vocabulary::kBos, Vocabulary::kTaskGround}, DecodeOptions{});
  CHECK(r.tokens == std::vector<int>{8, 8});
  CHECK(r.finished);
}

TEST_CASE("generate_beam: width 1 equals greedy on 50 random models") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tiny t = make_tiny(200 + seed, 12);
    Rng rng(seed + 7);
    const auto mem = memory_for(t, random_image(rng, 32, 32), {8, 9, 10});
    const auto g = generate_greedy<double>(mem, Vocabulary::kTaskGround, t.cfg.solver, t.params);
    const auto b = generate_beam<double>(mem, Vocabulary::kTaskGround, 1, t.cfg.solver, t.params);
    CHECK(g == b);
  }
  const Tiny t = make_tiny(1);
  Rng rng(1);
  const auto mem = memory_for(t, random_image(rng, 32, 32), {20});
  CHECK_THROWS(generate_beam<double>(mem, Vocabulary::kTaskGround, 0, t.cfg.solver, t.params));
}

TEST_CASE("property: beam log-prob is at least greedy's when lengths match") {
  int compared = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Tiny t = make_tiny(300 + seed, 12);
    Rng rng(seed + 11);
    const auto mem = memory_for(t, random_image(rng, 32, 32), {8, 9});
    const auto g = generate_greedy<double>(mem, Vocabulary::kTaskGround, t.cfg.solver, t.params);
    const auto b = generate_beam<double>(mem, Vocabulary::kTaskGround, 4, t.cfg.solver, t.params);
    if (g.tokens.size() != b.tokens.size() || g.finished != b.finished) continue;
    ++compared;
    CHECK(b.log_prob >= g.log_prob - 1e-12);
  }
  CHECK(compared > 0);
}

TEST_CASE("beam_decode: recovers the better sequence where greedy is myopic") {
  // A = 3, B = 4. Step one: A 0.5, B 0.4, EOS 0.1. After A everything is
  // near-uniform; after B, EOS has 0.9.
  const int A = 3, B = 4, E = Vocabulary::kEos;
  NextTokenScorer table = [&](const std::vector<int>& prefix) {
    Eigen::VectorXd p = Eigen::VectorXd::Constant(5, 1e-12);
    if (prefix.size() == 2) {
      p(A) = 0.5, p(B) = 0.4, p(E) = 0.1;
    } else if (prefix.back() == A) {
      p(A) = 0.34, p(B) = 0.33, p(E) = 0.33;
    } else {
      p(A) = 0.05, p(B) = 0.05, p(E) = 0.9;
    }
    return Eigen::VectorXd(p.array().log());
  };
  DecodeOptions opts;
  opts.max_gen_len = 2;
  const auto g = greedy_decode(table, {Vocabulary::kBos, Vocabulary::kTaskGround}, opts);
  const auto b = beam_decode(table, {Vocabulary::kBos, Vocabulary::kTaskGround}, opts, 2);

  // brute force over every length-normalized outcome of at most two steps
  double best = -1e300;
  std::vector<int> best_seq;
  bool best_finished = false;
  for (int t1 : {A, B, E}) {
    const double l1 = table({1, 5})(t1);
    if (t1 == E) {
      if (l1 > best) best = l1, best_seq = {}, best_finished = true;
      continue;
    }
    for (int t2 : {A, B, E}) {
      const double l2 = l1 + table({1, 5, t1})(t2);
      const double norm = l2 / 2;
      if (norm > best) {
        best = norm;
        best_seq = t2 == E ? std::vector<int>{t1} : std::vector<int>{t1, t2};
        best_finished = t2 == E;
      }
    }
  }
  CHECK(g.tokens == std::vector<int>{A, A});
  CHECK(b.tokens == best_seq);
  CHECK(b.finished == best_finished);
  CHECK(b.tokens == std::vector<int>{B});
  CHECK(b.log_prob > g.log_prob);
}

TEST_CASE("property: exhaustive beam matches brute-force enumeration") {
  // three-step horizon over six ids: the decoder's own config requires longer
  // sequences, so a seeded table plays the random tiny model here
  DecodeOptions opts;
  opts.max_gen_len = 3;
  opts.banned = {};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::map<std::vector<int>, Eigen::VectorXd> memo;
    Rng rng(seed);
    NextTokenScorer model = [&](const std::vector<int>& prefix) {
      auto it = memo.find(prefix);
      if (it == memo.end()) {
        Eigen::VectorXd logits(6);
        for (int i = 0; i < 6; ++i) logits(i) = 2 * rng.normal();
        it = memo.emplace(prefix, log_softmax(logits)).first;
      }
      return it->second;
    };
    const std::vector<int> start = {Vocabulary::kBos, Vocabulary::kTaskGround};
    const auto beam = beam_decode(model, start, opts, 6 * 6 * 6);

    double best = -1e300;
    std::vector<int> best_seq;
    std::function<void(std::vector<int>, double)> walk = [&](std::vector<int> seq, double lp) {
      for (int id = 0; id < 6; ++id) {
        std::vector<int> prefix = start;
        prefix.insert(prefix.end(), seq.begin(), seq.end());
        const double next = lp + model(prefix)(id);
        const int steps = static_cast<int>(seq.size()) + 1;
        if (id == opts.eos_id || steps == opts.max_gen_len) {
          std::vector<int> out = seq;
          if (id != opts.eos_id) out.push_back(id);
          if (next / steps > best) best = next / steps, best_seq = out;
        } else {
          std::vector<int> longer = seq;
          longer.push_back(id);
          walk(longer, next);
        }
      }
    };
    walk({}, 0.0);
    CHECK(beam.tokens == best_seq);
  }
}
