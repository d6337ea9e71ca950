#include "groundseq/postproc.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace groundseq {

namespace {

// Tolerance on the 1 px minimum so a repaired side is a fixed point.
constexpr double kMinSideSlack = 1e-9;

void repair_axis(double& lo, double& hi, double extent) {
  if (lo > hi) std::swap(lo, hi);
  lo = std::clamp(lo, 0.0, extent);
  hi = std::clamp(hi, 0.0, extent);
  const double side = std::min(1.0, extent);
  if (hi - lo >= side - kMinSideSlack) return;
  const double c = (lo + hi) / 2;
  lo = c - side / 2;
  hi = c + side / 2;
  if (lo < 0) {
    lo = 0;
    hi = side;
  } else if (hi > extent) {
    hi = extent;
    lo = extent - side;
  }
}

}  // namespace

BBox repair_box(double x0, double y0, double x1, double y1, const CoordBinSpec& spec) {
  // NaN coordinates carry no information; treat them as the frame edges
  if (std::isnan(x0)) x0 = 0;
  if (std::isnan(y0)) y0 = 0;
  if (std::isnan(x1)) x1 = spec.extent_w;
  if (std::isnan(y1)) y1 = spec.extent_h;
  repair_axis(x0, x1, spec.extent_w);
  repair_axis(y0, y1, spec.extent_h);
  return {x0, y0, x1, y1};
}

GroundingOutput parse_grounding_sequence(std::span<const int> tokens, const Vocabulary& v, const CoordBinSpec& spec) {
  GroundingOutput out;
  out.raw_tokens.assign(tokens.begin(), tokens.end());
  out.box = BBox{0, 0, spec.extent_w, spec.extent_h};
  const bool grammar = tokens.size() == 4 && spec.num_bins == v.num_bins() &&
                       std::all_of(tokens.begin(), tokens.end(), [&](int id) { return v.is_coord(id); });
  if (!grammar) return out;
  const double x0 = dequantize_coord(v.bin_of(tokens[0]), spec.extent_w, spec.num_bins);
  const double y0 = dequantize_coord(v.bin_of(tokens[1]), spec.extent_h, spec.num_bins);
  const double x1 = dequantize_coord(v.bin_of(tokens[2]), spec.extent_w, spec.num_bins);
  const double y1 = dequantize_coord(v.bin_of(tokens[3]), spec.extent_h, spec.num_bins);
  out.box = repair_box(x0, y0, x1, y1, spec);
  out.wellformed = true;
  out.repaired = out.box != BBox{x0, y0, x1, y1};
  return out;
}

std::string parse_caption_sequence(std::span<const int> tokens, const Vocabulary& v) {
  std::string out;
  for (int id : tokens) {
    if (!v.is_word(id) && id != Vocabulary::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += v.token(id);
  }
  return out;
}

std::string render_box_text(const BBox& b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "(%.1f, %.1f, %.1f, %.1f)", b.x0, b.y0, b.x1, b.y1);
  return buf;
}

PredictionRecord make_prediction(std::string sample_id, const GroundingOutput& out) {
  return PredictionRecord{std::move(sample_id), out.box, out.wellformed, out.raw_tokens, out.repaired};
}

std::string prediction_to_json_line(const PredictionRecord& p) {
  nlohmann::ordered_json j;
  j["sample_id"] = p.sample_id;
  j["box"] = p.box.as_array();
  j["wellformed"] = p.wellformed;
  j["raw_tokens"] = p.raw_tokens;
  j["repaired"] = p.repaired;
  return j.dump();
}

PredictionRecord prediction_from_json_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    PredictionRecord p;
    p.sample_id = j.at("sample_id").get<std::string>();
    p.box = BBox::from_array(j.at("box").get<std::array<double, 4>>());
    p.wellformed = j.at("wellformed").get<bool>();
    p.raw_tokens = j.at("raw_tokens").get<std::vector<int>>();
    p.repaired = j.value("repaired", false);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw PredictionFormatError(std::string("malformed prediction line: ") + e.what());
  }
}

void write_predictions(const std::filesystem::path& path, const std::vector<PredictionRecord>& preds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : preds) f << prediction_to_json_line(p) << '\n';
  if (!f) throw std::runtime_error("short write to " + path.string());
}

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(prediction_from_json_line(line));
  }
  return out;
}

}  // namespace groundseq
