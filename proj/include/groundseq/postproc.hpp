#pragma once

#include "groundseq/bbox.hpp"
#include "groundseq/vocab.hpp"

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

struct GroundingOutput {
  BBox box;
  std::vector<int> raw_tokens;
  bool wellformed = false;
  bool repaired = false;  // coordinates needed reordering, clamping or widening
};

/// Swap into order, clamp into the frame, widen any side under 1 px to 1 px.
BBox repair_box(double x0, double y0, double x1, double y1, const CoordBinSpec& spec);

/// Exactly four coordinate tokens (x0 y0 x1 y1) are wellformed; anything else
/// maps to the full frame with wellformed = false. Never throws.
GroundingOutput parse_grounding_sequence(std::span<const int> tokens, const Vocabulary& v, const CoordBinSpec& spec);

/// Word tokens joined by spaces; control and coordinate tokens are skipped.
std::string parse_caption_sequence(std::span<const int> tokens, const Vocabulary& v);

/// "(x0, y0, x1, y1)" with one decimal, ties to even.
std::string render_box_text(const BBox& b);

struct PredictionRecord {
  std::string sample_id;
  BBox box;
  bool wellformed = false;
  std::vector<int> raw_tokens;
  bool repaired = false;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

class PredictionFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

PredictionRecord make_prediction(std::string sample_id, const GroundingOutput& out);

std::string prediction_to_json_line(const PredictionRecord& p);
PredictionRecord prediction_from_json_line(const std::string& line);

void write_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& preds);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

}  // namespace groundseq
