#pragma once

#include "groundseq/bbox.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace groundseq {

/// Quantization grid for box coordinates.
struct CoordBinSpec {
  int num_bins = 256;
  double extent_w = 128;
  double extent_h = 128;

  void validate() const;
  friend bool operator==(const CoordBinSpec&, const CoordBinSpec&) = default;
};

/// Token <-> id map over control, coordinate-bin and word tokens.
///
/// Layout: ids 0..6 are the control tokens in the order of the constants
/// below, then num_bins coordinate tokens in bin order, then words.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  static constexpr int kTaskGround = 5;
  static constexpr int kTaskCaption = 6;
  static constexpr int kNumControl = 7;
  static constexpr int kCoordBase = kNumControl;

  static const std::array<std::string, kNumControl>& control_names();
  static std::string coord_token_name(int bin);

  /// Words only; control and bin tokens are generated.
  Vocabulary(int num_bins, std::vector<std::string> words);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int num_bins() const { return num_bins_; }
  int coord_bin_base() const { return kCoordBase; }
  int first_word_id() const { return kCoordBase + num_bins_; }

  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  bool is_control(int id) const { return id >= 0 && id < kNumControl; }
  bool is_coord(int id) const { return id >= kCoordBase && id < kCoordBase + num_bins_; }
  bool is_word(int id) const { return id >= first_word_id() && id < size(); }
  int coord_id(int bin) const;
  int bin_of(int id) const;

  /// Line-oriented text form: header then one token per line, line index == id.
  std::string serialize() const;
  static Vocabulary parse(std::string_view text);

  std::uint64_t hash() const;
  std::string hash_hex() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.num_bins_ == b.num_bins_ && a.id_to_token_ == b.id_to_token_;
  }

 private:
  int num_bins_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Lowercased words; whitespace and ASCII punctuation separate and are dropped.
std::vector<std::string> split_words(std::string_view text);

/// Words joined by single spaces, the canonical form encode_text sees.
std::string normalize_text(std::string_view text);

Vocabulary build_vocab(std::span<const std::string> corpus, const CoordBinSpec& spec);

std::vector<int> encode_text(std::string_view text, const Vocabulary& v);
std::string decode_tokens(std::span<const int> ids, const Vocabulary& v);

int quantize_coord(double value, double extent, int num_bins);
double dequantize_coord(int bin, double extent, int num_bins);

/// x0, y0, x1, y1 coordinate token ids.
std::array<int, 4> encode_box(const BBox& b, const CoordBinSpec& spec, const Vocabulary& v);

}  // namespace groundseq
