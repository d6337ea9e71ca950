#pragma once

#include "groundseq/bbox.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundseq {

/// RGB image, row-major, channels interleaved, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.0f);

  static constexpr int channels = 3;

  float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  /// Checks the length and value-range invariants.
  void validate() const;

  friend bool operator==(const Image&, const Image&) = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary PPM (P6, maxval 255). Values are rounded to the nearest 1/255.
void write_ppm(const std::filesystem::path& path, const Image& img);
std::vector<std::uint8_t> encode_ppm(const Image& img);
Image read_ppm(const std::filesystem::path& path);
Image decode_ppm(const std::vector<std::uint8_t>& bytes);

/// Aspect-preserving map from a source image into a fixed frame, centred with padding.
struct Letterbox {
  double source_w = 0;
  double source_h = 0;
  double frame_w = 0;
  double frame_h = 0;
  double scale = 1;
  double offset_x = 0;
  double offset_y = 0;

  static Letterbox fit(double source_w, double source_h, double frame_w, double frame_h);

  BBox to_frame(const BBox& b) const;
  BBox to_source(const BBox& b) const;
};

/// Bilinear resample of `src` into the letterboxed frame; padding is black.
Image letterbox_image(const Image& src, const Letterbox& lb);

}  // namespace groundseq
