#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ofnet/common.hpp"

namespace ofnet {

/// Decoded 8-bit image, interleaved row-major, 1 (gray) or 3 (rgb) channels.
struct Image8 {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<uint8_t> data;
};

// Minimal PNG codec over zlib: 8-bit gray and RGB, non-interlaced. Output
// bytes are deterministic for identical input.
void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

}  // namespace ofnet
