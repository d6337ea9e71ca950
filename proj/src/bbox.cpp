#include "groundseq/bbox.hpp"

#include <sstream>

namespace groundseq {

std::string box_debug_string(const BBox& b) {
  std::ostringstream os;
  os << '(' << b.x0 << ", " << b.y0 << ", " << b.x1 << ", " << b.y1 << ')';
  return os.str();
}

void require_ordered(const BBox& b, const char* context) {
  if (!b.ordered()) throw InvalidBoxError(std::string(context) + ": invalid box " + box_debug_string(b));
}

}  // namespace groundseq
