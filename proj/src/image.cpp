#include "groundseq/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <cctype>

namespace groundseq {

Image::Image(int w, int h, float fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("image dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(w) * h * channels, fill);
}

void Image::validate() const {
  if (width <= 0 || height <= 0 || pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw std::invalid_argument("image buffer does not match " + std::to_string(width) + "x" +
                                std::to_string(height));
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image value outside [0,1]");
  }
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  img.validate();
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageIoError("short write to " + path.string());
}

namespace {

// Reads one header token, skipping whitespace and '#' comments.
std::string next_token(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') tok.push_back(static_cast<char>(b[pos++]));
  return tok;
}

}  // namespace

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  if (next_token(bytes, pos) != "P6") throw ImageIoError("not a binary PPM (P6)");
  int w = 0;
  int h = 0;
  int maxval = 0;
  try {
    w = std::stoi(next_token(bytes, pos));
    h = std::stoi(next_token(bytes, pos));
    maxval = std::stoi(next_token(bytes, pos));
  } catch (const std::exception&) {
    throw ImageIoError("malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ImageIoError("unsupported PPM geometry or maxval");
  ++pos;  // single whitespace byte before raster
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw ImageIoError("truncated PPM raster");
  Image img(w, h);
  for (std::size_t i = 0; i < need; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const ImageIoError& e) {
    throw ImageIoError(path.string() + ": " + e.what());
  }
}

Letterbox Letterbox::fit(double source_w, double source_h, double frame_w, double frame_h) {
  if (!(source_w > 0 && source_h > 0 && frame_w > 0 && frame_h > 0)) {
    throw std::invalid_argument("letterbox extents must be positive");
  }
  Letterbox lb;
  lb.source_w = source_w;
  lb.source_h = source_h;
  lb.frame_w = frame_w;
  lb.frame_h = frame_h;
  lb.scale = std::min(frame_w / source_w, frame_h / source_h);
  lb.offset_x = (frame_w - source_w * lb.scale) / 2.0;
  lb.offset_y = (frame_h - source_h * lb.scale) / 2.0;
  return lb;
}

BBox Letterbox::to_frame(const BBox& b) const {
  return {b.x0 * scale + offset_x, b.y0 * scale + offset_y, b.x1 * scale + offset_x, b.y1 * scale + offset_y};
}

BBox Letterbox::to_source(const BBox& b) const {
  return {(b.x0 - offset_x) / scale, (b.y0 - offset_y) / scale, (b.x1 - offset_x) / scale,
          (b.y1 - offset_y) / scale};
}

Image letterbox_image(const Image& src, const Letterbox& lb) {
  src.validate();
  Image out(static_cast<int>(lb.frame_w), static_cast<int>(lb.frame_h), 0.0f);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      // pixel centre mapped back into source pixel coordinates
      const double sx = (x + 0.5 - lb.offset_x) / lb.scale - 0.5;
      const double sy = (y + 0.5 - lb.offset_y) / lb.scale - 0.5;
      if (sx < -0.5 || sy < -0.5 || sx > src.width - 0.5 || sy > src.height - 0.5) continue;
      const double cx = std::clamp(sx, 0.0, static_cast<double>(src.width - 1));
      const double cy = std::clamp(sy, 0.0, static_cast<double>(src.height - 1));
      const int x0 = static_cast<int>(std::floor(cx));
      const int y0 = static_cast<int>(std::floor(cy));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double fx = cx - x0;
      const double fy = cy - y0;
      for (int c = 0; c < Image::channels; ++c) {
        const double top = src.at(x0, y0, c) * (1 - fx) + src.at(x1, y0, c) * fx;
        const double bottom = src.at(x0, y1, c) * (1 - fx) + src.at(x1, y1, c) * fx;
        out.at(x, y, c) = static_cast<float>(std::clamp(top * (1 - fy) + bottom * fy, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace groundseq
