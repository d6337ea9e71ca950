#pragma once

#include "groundseq/bbox.hpp"
#include "groundseq/data.hpp"
#include "groundseq/image.hpp"
#include "groundseq/postproc.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

/// Intersection over union; 0 for disjoint boxes. Throws InvalidBoxError on unordered boxes.
double iou(const BBox& a, const BBox& b);

struct GroundTruth {
  std::string sample_id;
  BBox box;
};

std::vector<GroundTruth> ground_truths(std::span<const Sample> samples);

struct SampleScore {
  std::string sample_id;
  double iou = 0;
  bool wellformed = false;
  bool missing = false;  // no prediction was supplied for this sample
};

struct EvalResult {
  std::size_t n_samples = 0;
  std::size_t n_correct = 0;
  double ap50 = 0;  // n_correct / n_samples
  double mean_iou = 0;
  std::size_t n_malformed = 0;
  std::size_t n_missing = 0;
  double threshold = 0.5;
  std::vector<SampleScore> per_sample;  // ground-truth order

  std::string to_json() const;
};

class DuplicatePredictionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Single-referent accuracy: a sample is correct when IoU >= threshold.
/// Missing predictions count as wrong with IoU 0; malformed ones are scored
/// with their fallback box. The denominator is always every ground truth.
EvalResult evaluate(std::span<const PredictionRecord> predictions, std::span<const GroundTruth> gts,
                    double threshold = 0.5);

void write_eval_result(const std::filesystem::path& path, const EvalResult& r);

class MissingImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OverlayOptions {
  int scale = 4;  // output pixels per frame pixel
};

/// SVG with the embedded image, ground truth in green, prediction in red on top,
/// and the instruction beneath. A malformed prediction is annotated as such.
std::string render_overlay(const Image& image, const std::string& instruction, const std::optional<BBox>& gt,
                           const PredictionRecord& prediction, const OverlayOptions& opts = {});
std::string render_overlay(const Sample& sample, const PredictionRecord& prediction, const OverlayOptions& opts = {});

/// PNG bytes (8-bit RGB) of an image.
std::vector<std::uint8_t> encode_png(const Image& img);

std::string base64_encode(std::span<const std::uint8_t> bytes);

struct LeaderboardRow {
  std::string model;
  double ap50 = 0;  // percent

  friend bool operator==(const LeaderboardRow&, const LeaderboardRow&) = default;
};

/// Published Talk2Car AP50 results the toy runs are reported next to.
std::vector<LeaderboardRow> talk2car_leaderboard();

struct LeaderboardTable {
  std::vector<LeaderboardRow> rows;  // descending by ap50, ties keep input order
  std::string text;
  std::string json;
};

LeaderboardTable leaderboard_table(std::vector<LeaderboardRow> rows);

std::vector<LeaderboardRow> leaderboard_from_json(const std::string& text);

/// Shortest of %.0f / %.1f / %.2f that prints the value exactly at two decimals.
std::string format_ap50(double v);

}  // namespace groundseq
