#include "groundseq/vocab.hpp"

#include "groundseq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace groundseq {

namespace {

constexpr std::string_view kVocabHeader = "#groundseq-vocab v1 num_bins=";

bool is_separator(unsigned char c) {
  // bytes >= 0x80 belong to words so UTF-8 text survives splitting
  if (c >= 0x80) return false;
  return !std::isalnum(c);
}

}  // namespace

void CoordBinSpec::validate() const {
  if (num_bins < 2) throw std::invalid_argument("coordinate grid needs at least 2 bins");
  if (!(extent_w > 0 && extent_h > 0)) throw std::invalid_argument("coordinate extents must be positive");
}

const std::array<std::string, Vocabulary::kNumControl>& Vocabulary::control_names() {
  static const std::array<std::string, kNumControl> names = {
      "⟨PAD⟩", "⟨BOS⟩", "⟨EOS⟩", "⟨UNK⟩",
      "⟨SEP⟩", "⟨TASK_GROUND⟩", "⟨TASK_CAPTION⟩"};
  return names;
}

std::string Vocabulary::coord_token_name(int bin) { return "⟨bin_" + std::to_string(bin) + "⟩"; }

Vocabulary::Vocabulary(int num_bins, std::vector<std::string> words) : num_bins_(num_bins) {
  if (num_bins < 2) throw std::invalid_argument("vocabulary needs at least 2 coordinate bins");
  id_to_token_.reserve(kNumControl + num_bins + words.size());
  for (const auto& name : control_names()) id_to_token_.push_back(name);
  for (int b = 0; b < num_bins; ++b) id_to_token_.push_back(coord_token_name(b));
  for (auto& w : words) id_to_token_.push_back(std::move(w));
  for (int id = 0; id < size(); ++id) {
    const auto [it, inserted] = token_to_id_.emplace(id_to_token_[id], id);
    if (!inserted) throw std::invalid_argument("duplicate vocabulary token '" + id_to_token_[id] + "'");
    if (id >= first_word_id() && id_to_token_[id].empty()) throw std::invalid_argument("empty vocabulary token");
  }
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return id_to_token_[id];
}

int Vocabulary::coord_id(int bin) const {
  if (bin < 0 || bin >= num_bins_) throw std::out_of_range("coordinate bin " + std::to_string(bin) + " out of range");
  return kCoordBase + bin;
}

int Vocabulary::bin_of(int id) const {
  if (!is_coord(id)) throw std::out_of_range("token id " + std::to_string(id) + " is not a coordinate token");
  return id - kCoordBase;
}

std::string Vocabulary::serialize() const {
  std::string out(kVocabHeader);
  out += std::to_string(num_bins_);
  out += '\n';
  for (const auto& t : id_to_token_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line.rfind(kVocabHeader, 0) != 0) {
    throw std::invalid_argument("vocabulary file lacks '#groundseq-vocab v1' header");
  }
  int num_bins = 0;
  try {
    num_bins = std::stoi(line.substr(kVocabHeader.size()));
  } catch (const std::exception&) {
    throw std::invalid_argument("vocabulary header has malformed num_bins");
  }
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  if (lines.size() < static_cast<std::size_t>(kNumControl + num_bins)) {
    throw std::invalid_argument("vocabulary file shorter than its control and coordinate blocks");
  }
  for (int i = 0; i < kNumControl; ++i) {
    if (lines[i] != control_names()[i]) throw std::invalid_argument("control token mismatch at line " + std::to_string(i));
  }
  for (int b = 0; b < num_bins; ++b) {
    if (lines[kNumControl + b] != coord_token_name(b)) {
      throw std::invalid_argument("coordinate token mismatch at bin " + std::to_string(b));
    }
  }
  std::vector<std::string> words(lines.begin() + kNumControl + num_bins, lines.end());
  return Vocabulary(num_bins, std::move(words));
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(serialize()); }

std::string Vocabulary::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (is_separator(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, const CoordBinSpec& spec) {
  spec.validate();
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus) {
    for (auto& w : split_words(line)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, n] : ranked) words.push_back(w);
  return Vocabulary(spec.num_bins, std::move(words));
}

std::vector<int> encode_text(std::string_view text, const Vocabulary& v) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    const auto id = v.find(w);
    ids.push_back(id && v.is_word(*id) ? *id : Vocabulary::kUnk);
  }
  return ids;
}

std::string decode_tokens(std::span<const int> ids, const Vocabulary& v) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += v.token(id);
  }
  return out;
}

int quantize_coord(double value, double extent, int num_bins) {
  if (!(extent > 0)) throw std::invalid_argument("quantize_coord: extent must be positive");
  if (num_bins < 1) throw std::invalid_argument("quantize_coord: num_bins must be positive");
  const double scaled = std::floor(value / extent * num_bins);
  return static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(num_bins - 1)));
}

double dequantize_coord(int bin, double extent, int num_bins) {
  if (bin < 0 || bin >= num_bins) {
    throw std::out_of_range("dequantize_coord: bin " + std::to_string(bin) + " outside [0, " +
                            std::to_string(num_bins) + ")");
  }
  return (bin + 0.5) * extent / num_bins;
}

std::array<int, 4> encode_box(const BBox& b, const CoordBinSpec& spec, const Vocabulary& v) {
  spec.validate();
  require_ordered(b, "encode_box");
  if (!b.within(spec.extent_w, spec.extent_h)) throw InvalidBoxError("encode_box: box outside frame " + box_debug_string(b));
  if (spec.num_bins != v.num_bins()) throw std::invalid_argument("encode_box: bin spec disagrees with vocabulary");
  return {v.coord_id(quantize_coord(b.x0, spec.extent_w, spec.num_bins)),
          v.coord_id(quantize_coord(b.y0, spec.extent_h, spec.num_bins)),
          v.coord_id(quantize_coord(b.x1, spec.extent_w, spec.num_bins)),
          v.coord_id(quantize_coord(b.y1, spec.extent_h, spec.num_bins))};
}

}  // namespace groundseq
