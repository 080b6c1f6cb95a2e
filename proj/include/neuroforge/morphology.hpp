#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <vector>

#include "neuroforge/volume.hpp"

namespace neuroforge {

enum class Connectivity { Face6, Full26 };

/// Labels connected nonzero regions 1..n in scan order. Returns n.
inline std::uint32_t connected_components(const BinaryGrid& mask, LabelVolume& out,
                                          Connectivity conn = Connectivity::Face6) {
  const auto s = mask.shape();
  out = LabelVolume(s, 0u, mask.resolution());
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (n == 0 || (conn == Connectivity::Face6 && n > 1)) continue;
        offs.push_back({dz, dy, dx});
      }
  std::uint32_t next = 0;
  std::vector<std::array<int, 3>> stack;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!mask(z, y, x) || out(z, y, x)) continue;
        ++next;
        out(z, y, x) = next;
        stack.push_back({z, y, x});
        while (!stack.empty()) {
          const auto p = stack.back();
          stack.pop_back();
          for (const auto& o : offs) {
            const int a = p[0] + o[0], b = p[1] + o[1], c = p[2] + o[2];
            if (!mask.contains(a, b, c) || !mask(a, b, c) || out(a, b, c)) continue;
            out(a, b, c) = next;
            stack.push_back({a, b, c});
          }
        }
      }
  return next;
}

/// Zero-pads every side laterally by `py`/`px` and axially by `pz`.
inline BinaryGrid pad(const BinaryGrid& g, int pz, int py, int px) {
  const auto s = g.shape();
  BinaryGrid out({s.d + 2 * pz, s.h + 2 * py, s.w + 2 * px}, 0, g.resolution());
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) out(z + pz, y + py, x + px) = g(z, y, x);
  return out;
}

/// Crops to the bounding box of nonzero voxels; all-zero input yields a
/// default-constructed (empty) grid.
inline BinaryGrid crop_to_content(const BinaryGrid& g) {
  const auto s = g.shape();
  int lo[3] = {s.d, s.h, s.w}, hi[3] = {-1, -1, -1};
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (g(z, y, x)) {
          const int p[3] = {z, y, x};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
          }
        }
  if (hi[0] < 0) return BinaryGrid{};
  BinaryGrid out({hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}, 0, g.resolution());
  for (int z = 0; z < out.shape().d; ++z)
    for (int y = 0; y < out.shape().h; ++y)
      for (int x = 0; x < out.shape().w; ++x) out(z, y, x) = g(z + lo[0], y + lo[1], x + lo[2]);
  return out;
}

namespace detail {

inline constexpr std::array<std::array<int, 2>, 5> kCross{{{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

inline BinaryGrid lateral_cross(const BinaryGrid& g, bool dilate) {
  const auto s = g.shape();
  BinaryGrid out(s, 0, g.resolution());
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        bool any = false, all = true;
        for (const auto& o : kCross) {
          const int a = y + o[0], b = x + o[1];
          const bool v = g.contains(z, a, b) && g(z, a, b);
          any |= v;
          all &= v;
        }
        out(z, y, x) = (dilate ? any : all) ? 1 : 0;
      }
  return out;
}

}  // namespace detail

/// Per-slice binary closing with a 3x3 cross. Outside the grid counts as
/// background, so callers pad first when content touches the border.
inline BinaryGrid close_lateral(const BinaryGrid& g) {
  return detail::lateral_cross(detail::lateral_cross(g, true), false);
}

/// Per-slice hole filling: background not 4-connected to the slice border
/// becomes foreground.
inline BinaryGrid fill_holes_lateral(const BinaryGrid& g) {
  const auto s = g.shape();
  BinaryGrid out = g;
  std::vector<std::uint8_t> outside(static_cast<std::size_t>(s.h) * s.w);
  std::vector<std::array<int, 2>> stack;
  for (int z = 0; z < s.d; ++z) {
    std::fill(outside.begin(), outside.end(), 0);
    auto seed = [&](int y, int x) {
      if (!g(z, y, x) && !outside[y * s.w + x]) {
        outside[y * s.w + x] = 1;
        stack.push_back({y, x});
      }
    };
    for (int y = 0; y < s.h; ++y) {
      seed(y, 0);
      seed(y, s.w - 1);
    }
    for (int x = 0; x < s.w; ++x) {
      seed(0, x);
      seed(s.h - 1, x);
    }
    while (!stack.empty()) {
      const auto [y, x] = stack.back();
      stack.pop_back();
      for (std::size_t k = 1; k < detail::kCross.size(); ++k) {
        const int a = y + detail::kCross[k][0], b = x + detail::kCross[k][1];
        if (a >= 0 && a < s.h && b >= 0 && b < s.w) seed(a, b);
      }
    }
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (!outside[y * s.w + x]) out(z, y, x) = 1;
  }
  return out;
}

}  // namespace neuroforge
