#include "ofnet/morph.hpp"

#include <array>

namespace ofnet {

namespace {

// 8-neighborhood in Zhang-Suen order P2..P9: N, NE, E, SE, S, SW, W, NW.
constexpr std::array<int, 8> kDy{-1, -1, 0, 1, 1, 1, 0, -1};
constexpr std::array<int, 8> kDx{0, 1, 1, 1, 0, -1, -1, -1};

bool deletable(const Grid<uint8_t>& m, int y, int x, bool first_pass) {
  std::array<int, 8> p;
  for (int k = 0; k < 8; ++k) {
    int ny = y + kDy[size_t(k)], nx = x + kDx[size_t(k)];
    p[size_t(k)] = m.inside(ny, nx) && m.at(ny, nx) ? 1 : 0;
  }
  int b = 0;
  for (int v : p) b += v;
  if (b < 2 || b > 6) return false;
  int a = 0;
  for (int k = 0; k < 8; ++k) a += p[size_t(k)] == 0 && p[size_t((k + 1) % 8)] == 1;
  if (a != 1) return false;
  // p[0]=N, p[2]=E, p[4]=S, p[6]=W
  if (first_pass)
    return (p[0] * p[2] * p[4]) == 0 && (p[2] * p[4] * p[6]) == 0;
  return (p[0] * p[2] * p[6]) == 0 && (p[0] * p[4] * p[6]) == 0;
}

int subpass(Grid<uint8_t>& m, bool first_pass) {
  std::vector<std::pair<int, int>> doomed;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x) && deletable(m, y, x, first_pass)) doomed.push_back({y, x});
  for (auto [y, x] : doomed) m.at(y, x) = 0;
  return int(doomed.size());
}

}  // namespace

Grid<uint8_t> zhang_suen_deletable(const Grid<uint8_t>& mask) {
  Grid<uint8_t> out(mask.h, mask.w, 0);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x) &&
          (deletable(mask, y, x, true) || deletable(mask, y, x, false)))
        out.at(y, x) = 1;
  return out;
}

int zhang_suen_iterate(Grid<uint8_t>& mask) {
  int removed = subpass(mask, true);
  removed += subpass(mask, false);
  return removed;
}

}  // namespace ofnet
