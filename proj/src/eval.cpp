#include "groundseq/eval.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace groundseq {

double iou(const BBox& a, const BBox& b) {
  require_ordered(a, "iou");
  require_ordered(b, "iou");
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<GroundTruth> ground_truths(std::span<const Sample> samples) {
  std::vector<GroundTruth> out;
  for (const auto& s : samples) {
    if (!s.target_box) throw std::invalid_argument("sample '" + s.sample_id + "' has no target box");
    out.push_back({s.sample_id, *s.target_box});
  }
  return out;
}

EvalResult evaluate(std::span<const PredictionRecord> predictions, std::span<const GroundTruth> gts, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("evaluate: threshold must lie in (0, 1)");
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.sample_id, &p).second) {
      throw DuplicatePredictionError("duplicate prediction for sample '" + p.sample_id + "'");
    }
  }
  EvalResult r;
  r.threshold = threshold;
  r.n_samples = gts.size();
  double iou_sum = 0;
  for (const auto& gt : gts) {
    SampleScore s{gt.sample_id, 0.0, false, false};
    const auto it = by_id.find(gt.sample_id);
    if (it == by_id.end()) {
      s.missing = true;
      ++r.n_missing;
    } else {
      s.wellformed = it->second->wellformed;
      s.iou = iou(it->second->box, gt.box);
      if (!s.wellformed) ++r.n_malformed;
    }
    if (s.iou >= threshold) ++r.n_correct;
    iou_sum += s.iou;
    r.per_sample.push_back(std::move(s));
  }
  if (r.n_samples > 0) {
    r.ap50 = static_cast<double>(r.n_correct) / static_cast<double>(r.n_samples);
    r.mean_iou = iou_sum / static_cast<double>(r.n_samples);
  }
  return r;
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json j;
  j["n_samples"] = n_samples;
  j["n_correct"] = n_correct;
  j["ap50"] = ap50;
  j["mean_iou"] = mean_iou;
  j["n_malformed"] = n_malformed;
  j["n_missing"] = n_missing;
  j["threshold"] = threshold;
  auto& per = j["per_sample"] = nlohmann::ordered_json::array();
  for (const auto& s : per_sample) {
    nlohmann::ordered_json e;
    e["sample_id"] = s.sample_id;
    e["iou"] = s.iou;
    e["wellformed"] = s.wellformed;
    if (s.missing) e["missing"] = true;
    per.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

void write_eval_result(const std::filesystem::path& path, const EvalResult& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << r.to_json();
  if (!f) throw std::runtime_error("short write to " + path.string());
}

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default:
        // control characters are not allowed in XML 1.0 text
        if (static_cast<unsigned char>(c) >= 0x20 || c == '\t' || c == '\n') out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string rect(const BBox& b, int scale, const char* color) {
  return "  <rect x=\"" + num(b.x0 * scale) + "\" y=\"" + num(b.y0 * scale) + "\" width=\"" + num(b.width() * scale) +
         "\" height=\"" + num(b.height() * scale) + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
  img.validate();
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (1 + img.width * 3));
  const auto ppm = encode_ppm(img);
  const std::size_t header = ppm.size() - static_cast<std::size_t>(img.width) * img.height * 3;
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    const auto* row = ppm.data() + header + static_cast<std::size_t>(y) * img.width * 3;
    raw.insert(raw.end(), row, row + img.width * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("encode_png: deflate failed");
  }
  z.resize(zlen);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit truecolor
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", {});
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += table[(v >> s) & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += table[(v >> 18) & 63];
    out += table[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? table[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string render_overlay(const Image& image, const std::string& instruction, const std::optional<BBox>& gt,
                           const PredictionRecord& prediction, const OverlayOptions& opts) {
  if (image.width <= 0 || image.height <= 0 || image.pixels.empty()) {
    throw MissingImageError("render_overlay: no image for sample '" + prediction.sample_id + "'");
  }
  const int s = opts.scale;
  const int w = image.width * s;
  const int h = image.height * s;
  const int text_band = prediction.wellformed ? 28 : 52;
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\"" << w
     << "\" height=\"" << h + text_band << "\" viewBox=\"0 0 " << w << ' ' << h + text_band << "\">\n"
     << "  <image x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
     << "\" image-rendering=\"pixelated\" xlink:href=\"data:image/png;base64," << base64_encode(encode_png(image))
     << "\"/>\n";
  if (gt) os << rect(*gt, s, "green");
  os << rect(prediction.box, s, "red");
  os << "  <text x=\"4\" y=\"" << h + 20 << "\" font-family=\"sans-serif\" font-size=\"16\">" << xml_escape(instruction)
     << "</text>\n";
  if (!prediction.wellformed) {
    os << "  <text x=\"4\" y=\"" << h + 44
       << "\" font-family=\"sans-serif\" font-size=\"16\" fill=\"red\">malformed prediction (full-frame fallback)</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_overlay(const Sample& sample, const PredictionRecord& prediction, const OverlayOptions& opts) {
  return render_overlay(sample.image, sample.instruction, sample.target_box, prediction, opts);
}

std::vector<LeaderboardRow> talk2car_leaderboard() {
  return {{"HuBo-VLM", 76.74},      {"Deformerable-MDETR", 74.4}, {"Stacked VLBert", 71},
          {"CMRT", 69.1},           {"Vilbert (Base)", 68.9},     {"CMSVG", 68.6},
          {"ASSMR", 66},            {"AttnGrounder", 63.3},       {"VL-Bert (Base)", 63.1},
          {"MSRR", 60.04},          {"MAC", 50.51},               {"SCRC", 38.7},
          {"OSM", 35.31},           {"STACK-NMN", 33.71}};
}

std::string format_ap50(double v) {
  char buf[32];
  for (int digits = 0; digits <= 2; ++digits) {
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    if (std::abs(std::strtod(buf, nullptr) - v) < 5e-9) return buf;
  }
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

LeaderboardTable leaderboard_table(std::vector<LeaderboardRow> rows) {
  for (const auto& r : rows) {
    if (!(r.ap50 >= 0 && r.ap50 <= 100)) {
      throw std::invalid_argument("leaderboard: AP50 of '" + r.model + "' is outside [0, 100]");
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.ap50 > b.ap50; });
  std::size_t name_w = 5;
  for (const auto& r : rows) name_w = std::max(name_w, r.model.size());

  LeaderboardTable t;
  std::ostringstream os;
  auto line = [&](const std::string& a, const std::string& b) {
    os << a << std::string(name_w - a.size() + 2, ' ') << b << '\n';
  };
  line("Model", "AP50");
  os << std::string(name_w + 8, '-') << '\n';
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    line(r.model, format_ap50(r.ap50));
    j.push_back({{"model", r.model}, {"ap50", r.ap50}});
  }
  t.text = os.str();
  t.json = j.dump(2) + "\n";
  t.rows = std::move(rows);
  return t;
}

std::vector<LeaderboardRow> leaderboard_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    std::vector<LeaderboardRow> rows;
    for (const auto& e : j) rows.push_back({e.at("model").get<std::string>(), e.at("ap50").get<double>()});
    return rows;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed leaderboard JSON: ") + e.what());
  }
}

}  // namespace groundseq
