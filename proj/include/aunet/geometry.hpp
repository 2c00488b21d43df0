#pragma once

#include "aunet/datagen.hpp"

namespace aunet {

// Intersection over union; 0 for disjoint boxes. Throws DegenerateBoxError if
// either box has non-positive width or height.
double iou(const BoundingBox& a, const BoundingBox& b);

}  // namespace aunet
