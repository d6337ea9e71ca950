#include "doctest.h"

#include "groundseq/config.hpp"

#include <cmath>
#include <string>

using namespace groundseq;

TEST_CASE("parse_key_values: comments, blanks and whitespace") {
  const auto kv = parse_key_values("# run settings\n\n  learning_rate = 1e-3  # faster\nbatch_size=8\r\ntask_mix = GROUND:1\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("learning_rate") == "1e-3");
  CHECK(kv.at("batch_size") == "8");
  CHECK(kv.at("task_mix") == "GROUND:1");
  CHECK(parse_key_values("").empty());
}

TEST_CASE("parse_key_values: malformed lines name the line") {
  try {
    parse_key_values("a = 1\nno equals sign\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_key_values("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values(" = 2\n"), ConfigError);
}

TEST_CASE("RunConfig: stage defaults") {
  const RunConfig pre = RunConfig::from_key_values({}, Stage::Pretrain);
  CHECK(pre.train.learning_rate == 3e-4);
  CHECK(pre.train.batch_size == 16);
  CHECK(pre.train.task_mix == std::map<Task, double>{{Task::Ground, 0.5}, {Task::Caption, 0.5}});
  CHECK(pre.train.clip_norm == 1.0);
  CHECK(pre.train.warmup_steps == 0);
  CHECK(pre.model.encoder.d_model == 128);
  CHECK(pre.model.encoder.patch_size == 16);
  CHECK(pre.model.encoder.n_layers_img == 2);
  CHECK(pre.model.encoder.n_layers_txt == 2);
  CHECK(pre.model.encoder.n_heads == 4);
  CHECK(pre.model.bins.num_bins == 256);
  const RunConfig fine = RunConfig::from_key_values({}, Stage::Finetune);
  CHECK(fine.train.learning_rate == 3e-5);
  CHECK(fine.train.task_mix == std::map<Task, double>{{Task::Ground, 1.0}});
}

TEST_CASE("RunConfig: overrides, shared widths and rejected values") {
  const RunConfig rc = RunConfig::from_key_values(
      {{"d_model", "64"}, {"n_heads", "2"}, {"learning_rate", "0.002"}, {"freeze_image_encoder", "yes"},
       {"precision", "float64"}, {"task_mix", "GROUND:0.25,CAPTION:0.75"}},
      Stage::Pretrain);
  CHECK(rc.model.encoder.d_model == 64);
  CHECK(rc.model.solver.d_model == 64);
  CHECK(rc.model.solver.n_heads == 2);
  CHECK(rc.train.learning_rate == 0.002);
  CHECK(rc.train.freeze_image_encoder);
  CHECK(rc.precision == Precision::Float64);
  CHECK(rc.train.task_mix.at(Task::Caption) == 0.75);

  CHECK_THROWS_AS(RunConfig::from_key_values({{"colour", "red"}}, Stage::Pretrain), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_key_values({{"batch_size", "8x"}}, Stage::Pretrain), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_key_values({{"learning_rate", "-1"}}, Stage::Pretrain), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_key_values({{"seed", "-3"}}, Stage::Pretrain), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_key_values({{"precision", "half"}}, Stage::Pretrain), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_key_values({{"task_mix", "GROUND:0.5,CAPTION:0.5"}}, Stage::Finetune), ConfigError);
}

TEST_CASE("RunConfig::to_text echoes every setting and reads back") {
  const RunConfig rc = RunConfig::from_key_values(
      {{"learning_rate", "0.0007"}, {"seed", "42"}, {"task_mix", "GROUND:0.3,CAPTION:0.7"}}, Stage::Pretrain);
  const std::string text = rc.to_text();
  for (const char* key : {"learning_rate = 0.0007", "seed = 42", "task_mix = GROUND:0.3,CAPTION:0.7", "stage = PRETRAIN",
                          "batch_size = 16", "clip_norm = 1", "num_bins = 256", "frame = 128x128"}) {
    CHECK_MESSAGE(text.find(key) != std::string::npos, key);
  }
  auto kv = parse_key_values(text);
  for (const char* derived : {"stage", "frame", "num_bins", "vocab_size"}) kv.erase(derived);
  const RunConfig back = RunConfig::from_key_values(kv, Stage::Pretrain);
  CHECK(back.to_text() == text);
}

TEST_CASE("task mix strings round-trip") {
  const auto mix = parse_task_mix("CAPTION:0.1, GROUND:0.9");
  CHECK(mix.at(Task::Ground) == 0.9);
  CHECK(parse_task_mix(task_mix_string(mix)) == mix);
  CHECK_THROWS_AS(parse_task_mix("GROUND"), ConfigError);
  CHECK_THROWS_AS(parse_task_mix("GROUND:1,GROUND:0"), ConfigError);
  CHECK_THROWS_AS(parse_task_mix("DETECT:1"), ConfigError);
  CHECK_THROWS_AS(parse_task_mix(""), ConfigError);
}
