#include "ofnet/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace ofnet {

namespace {

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& data) {
  put_be32(out, uint32_t(data.size()));
  size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + type_at, uInt(4 + data.size()));
  put_be32(out, crc);
}

constexpr uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

}  // namespace

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_png supports 1 or 3 channels");
  if (img.data.size() != size_t(img.h) * img.w * img.channels)
    throw ConfigError("write_png data size mismatch");

  // filter 0 on every scanline
  const size_t row = size_t(img.w) * img.channels;
  std::vector<uint8_t> raw;
  raw.reserve((row + 1) * size_t(img.h));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.data.begin() + size_t(y) * row,
               img.data.begin() + size_t(y + 1) * row);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) !=
      Z_OK)
    throw DataError("png deflate failed for " + path);
  compressed.resize(bound);

  std::vector<uint8_t> out(kSignature, kSignature + 8);
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(img.w));
  put_be32(ihdr, uint32_t(img.h));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);          // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", compressed);
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw DataError("failed writing " + path);
}

Image8 read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
    throw DataError(path + " is not a png");

  Image8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  int bit_depth = 0, color_type = -1, interlace = -1;
  while (pos + 12 <= bytes.size()) {
    uint32_t len = get_be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size())
      throw DataError(path + ": truncated png chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.w = int(get_be32(data));
      img.h = int(get_be32(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      interlace = data[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
    throw DataError(path + ": unsupported png layout");
  img.channels = color_type == 2 ? 3 : 1;

  const size_t row = size_t(img.w) * img.channels;
  std::vector<uint8_t> raw((row + 1) * size_t(img.h));
  uLongf raw_len = uLongf(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw DataError(path + ": png inflate failed");

  img.data.assign(size_t(img.h) * row, 0);
  const int bpp = img.channels;
  for (int y = 0; y < img.h; ++y) {
    uint8_t filter = raw[size_t(y) * (row + 1)];
    const uint8_t* src = raw.data() + size_t(y) * (row + 1) + 1;
    uint8_t* dst = img.data.data() + size_t(y) * row;
    const uint8_t* up = y > 0 ? img.data.data() + size_t(y - 1) * row : nullptr;
    for (size_t i = 0; i < row; ++i) {
      int a = i >= size_t(bpp) ? dst[i - size_t(bpp)] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= size_t(bpp)) ? up[i - size_t(bpp)] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DataError(path + ": unknown png filter");
      }
      dst[i] = uint8_t(v);
    }
  }
  return img;
}

}  // namespace ofnet
