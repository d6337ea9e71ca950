#pragma once

#include "groundseq/config.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace groundseq::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3, kCompat = 4 };

struct GenDataArgs {
  std::filesystem::path out;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  double caption_frac = 0.0;
  int min_objects = 2;
  int max_objects = 4;
  int num_bins = 256;
};

struct TrainArgs {
  std::filesystem::path data;
  std::optional<std::filesystem::path> config;
  std::filesystem::path ckpt_out;
  std::optional<std::filesystem::path> init;    // finetune base
  std::optional<std::filesystem::path> resume;  // continue an interrupted run
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps;
  std::vector<std::string> overrides;  // key=value, applied after the config file
  std::string split = "train";
};

struct EvalArgs {
  std::filesystem::path data;
  std::string split = "test";
  std::filesystem::path ckpt;
  std::filesystem::path out;
  int beam = 1;
  double threshold = 0.5;
  bool render = false;
};

struct InferArgs {
  std::filesystem::path image;
  std::string instruction;
  std::filesystem::path ckpt;
  std::optional<std::filesystem::path> render;
  int beam = 1;
};

struct LeaderboardArgs {
  std::optional<std::filesystem::path> input;
  std::optional<std::filesystem::path> json_out;
  std::vector<std::string> add;  // NAME=AP50
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream& err);
int cmd_pretrain(const TrainArgs& a, std::ostream& out, std::ostream& err);
int cmd_finetune(const TrainArgs& a, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err);
int cmd_infer(const InferArgs& a, std::ostream& out, std::ostream& err);
int cmd_leaderboard(const LeaderboardArgs& a, std::ostream& out, std::ostream& err);

/// Parses argv (argv[0] is the program name) and dispatches to a subcommand.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Training run settings after the config file, overrides and flags are applied.
RunConfig effective_run_config(const TrainArgs& a, Stage stage);

std::filesystem::path metrics_path(const std::filesystem::path& ckpt_out);
std::filesystem::path log_path(const std::filesystem::path& ckpt_out);

}  // namespace groundseq::cli
