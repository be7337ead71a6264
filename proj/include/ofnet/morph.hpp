#pragma once

#include "ofnet/common.hpp"

namespace ofnet {

// Zhang-Suen thinning primitives shared by the edge thinner and the scene
// generator's validity gate. A mask is "thin" when neither sub-iteration
// can delete a pixel: 1-px-wide 8-connected curves, junctions, and isolated
// points are all fixed points.

/// Pixels either Zhang-Suen sub-iteration would delete from the mask.
Grid<uint8_t> zhang_suen_deletable(const Grid<uint8_t>& mask);

/// One full thinning iteration (both sub-iterations, applied in sequence).
/// Returns the number of deleted pixels.
int zhang_suen_iterate(Grid<uint8_t>& mask);

}  // namespace ofnet
