#pragma once

#include <array>
#include <stdexcept>
#include <string>

namespace groundseq {

/// Axis-aligned box in pixel units of the canonical frame.
struct BBox {
  double x0 = 0;
  double y0 = 0;
  double x1 = 0;
  double y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool ordered() const { return x0 < x1 && y0 < y1; }
  bool within(double extent_w, double extent_h) const {
    return x0 >= 0 && y0 >= 0 && x1 <= extent_w && y1 <= extent_h;
  }
  std::array<double, 4> as_array() const { return {x0, y0, x1, y1}; }
  static BBox from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

class InvalidBoxError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string box_debug_string(const BBox& b);

/// Throws InvalidBoxError unless x0 < x1 and y0 < y1.
void require_ordered(const BBox& b, const char* context);

}  // namespace groundseq
