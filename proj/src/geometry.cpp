#include "aunet/geometry.hpp"

#include <algorithm>
#include <string>

#include "aunet/error.hpp"

namespace aunet {

namespace {

void require_valid(const BoundingBox& b) {
  if (!(b.w > 0.0) || !(b.h > 0.0))
    throw DegenerateBoxError("box with size " + std::to_string(b.w) + "x" + std::to_string(b.h));
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace aunet
