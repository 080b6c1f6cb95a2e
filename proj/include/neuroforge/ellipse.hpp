#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "neuroforge/errors.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge {

/// Equivalent ellipse of a lateral region. theta is measured from the +x
/// axis towards +y, in (-pi/2, pi/2]; lengths are full axis lengths.
struct EllipseFit {
  double cy = 0.0, cx = 0.0;
  double theta = 0.0;
  double major_len = 0.0, minor_len = 0.0;
};

/// Fits from (y, x) voxel coordinates via normalized second-order central
/// moments.
inline EllipseFit fit_ellipse(const std::vector<std::array<double, 2>>& pts) {
  if (pts.size() < 3) throw DataError("ellipse fit needs at least 3 voxels, got " + std::to_string(pts.size()));
  const double n = static_cast<double>(pts.size());
  double sy = 0, sx = 0;
  for (const auto& p : pts) {
    sy += p[0];
    sx += p[1];
  }
  EllipseFit f;
  f.cy = sy / n;
  f.cx = sx / n;
  double m20 = 0, m02 = 0, m11 = 0;
  for (const auto& p : pts) {
    const double dy = p[0] - f.cy, dx = p[1] - f.cx;
    m20 += dx * dx;
    m02 += dy * dy;
    m11 += dx * dy;
  }
  m20 /= n;
  m02 /= n;
  m11 /= n;
  const double tr = m20 + m02;
  const double root = std::sqrt((m20 - m02) * (m20 - m02) + 4.0 * m11 * m11);
  const double tol = 1e-12 * tr;
  if (std::abs(m11) <= tol && std::abs(m20 - m02) <= tol) {
    f.theta = 0.0;
  } else {
    f.theta = 0.5 * std::atan2(2.0 * m11, m20 - m02);
    if (f.theta <= -std::numbers::pi / 2) f.theta += std::numbers::pi;
  }
  const double lo = tr - root;
  if (lo <= 1e-9 * tr) throw DataError("ellipse fit: region is collinear");
  f.major_len = 2.0 * std::numbers::sqrt2 * std::sqrt(tr + root);
  f.minor_len = 2.0 * std::numbers::sqrt2 * std::sqrt(lo);
  return f;
}

/// Fits the voxels of slice z where pred(z, y, x) holds.
template <typename Pred>
EllipseFit fit_ellipse_slice(Shape3 s, int z, Pred pred) {
  std::vector<std::array<double, 2>> pts;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      if (pred(z, y, x)) pts.push_back({static_cast<double>(y), static_cast<double>(x)});
  return fit_ellipse(pts);
}

/// Index of the lateral slice with the most voxels satisfying pred (first on
/// ties) and that count.
template <typename Pred>
std::pair<int, std::size_t> max_area_slice(Shape3 s, Pred pred) {
  int best = 0;
  std::size_t best_n = 0;
  for (int z = 0; z < s.d; ++z) {
    std::size_t n = 0;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) n += pred(z, y, x) ? 1 : 0;
    if (n > best_n) {
      best = z;
      best_n = n;
    }
  }
  return {best, best_n};
}

/// Rasterizes a filled ellipse with semi-axes (a along theta, b across) and
/// centre (cy, cx) into a single-slice grid.
inline BinaryGrid rasterize_ellipse(int h, int w, double cy, double cx, double a, double b, double theta) {
  BinaryGrid g({1, h, w}, 0);
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * c + dy * s, v = -dx * s + dy * c;
      if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) g(0, y, x) = 1;
    }
  return g;
}

}  // namespace neuroforge
