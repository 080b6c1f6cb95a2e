#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "neuroforge/errors.hpp"

namespace neuroforge {

/// Physical voxel size in nanometers. Lateral sampling is isotropic.
struct Resolution {
  double r_z = 1.0;
  double r_xy = 1.0;

  Resolution() = default;
  Resolution(double rz, double rxy) : r_z(rz), r_xy(rxy) {
    if (!(rz > 0.0) || !(rxy > 0.0)) throw DataError("resolution must be positive");
  }
  bool operator==(const Resolution&) const = default;
};

/// (depth, height, width); storage is row-major z, y, x.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Shape3&) const = default;
  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

/// Dense 3D grid of scalars with a physical resolution.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(Shape3 shape, T fill = T{}, Resolution res = {})
      : shape_(shape), res_(res), data_(shape.size(), fill) {
    if (shape.d < 1 || shape.h < 1 || shape.w < 1)
      throw DataError("grid dimensions must be positive, got " + shape.str());
  }
  Grid(Shape3 shape, std::vector<T> data, Resolution res = {})
      : shape_(shape), res_(res), data_(std::move(data)) {
    if (shape.d < 1 || shape.h < 1 || shape.w < 1)
      throw DataError("grid dimensions must be positive, got " + shape.str());
    if (data_.size() != shape.size())
      throw DataError("grid data length does not match shape " + shape.str());
  }

  const Shape3& shape() const { return shape_; }
  int depth() const { return shape_.d; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  const Resolution& resolution() const { return res_; }
  void set_resolution(Resolution r) { res_ = r; }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int z, int y, int x) { return data_[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const { return data_[index(z, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Border-clamped access.
  const T& at_clamped(int z, int y, int x) const {
    z = std::clamp(z, 0, shape_.d - 1);
    y = std::clamp(y, 0, shape_.h - 1);
    x = std::clamp(x, 0, shape_.w - 1);
    return (*this)(z, y, x);
  }

  bool contains(int z, int y, int x) const {
    return z >= 0 && z < shape_.d && y >= 0 && y < shape_.h && x >= 0 && x < shape_.w;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool operator==(const Grid& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape3 shape_{};
  Resolution res_{};
  std::vector<T> data_;
};

using Volume = Grid<float>;
using LabelVolume = Grid<std::uint32_t>;
using BinaryGrid = Grid<std::uint8_t>;

/// Two-channel binary condition: neuronal boundaries and mitochondria.
struct ConditionVolume {
  BinaryGrid boundary;
  BinaryGrid mito;

  ConditionVolume() = default;
  ConditionVolume(BinaryGrid b, BinaryGrid m) : boundary(std::move(b)), mito(std::move(m)) {
    if (!(boundary.shape() == mito.shape()))
      throw DataError("condition channels differ in shape");
    for (auto v : boundary.data())
      if (v > 1) throw DataError("boundary channel is not binary");
    for (auto v : mito.data())
      if (v > 1) throw DataError("mito channel is not binary");
  }
  const Shape3& shape() const { return boundary.shape(); }
  bool operator==(const ConditionVolume&) const = default;
};

enum class BoundaryMode { LateralOnly, Full3D };

/// Marks every voxel that has a neighbour with a different instance ID.
/// Lateral-only uses the in-slice 4-neighbourhood, Full3D the 6-neighbourhood.
inline BinaryGrid extract_boundaries(const LabelVolume& labels,
                                     BoundaryMode mode = BoundaryMode::LateralOnly) {
  const auto s = labels.shape();
  BinaryGrid out(s, 0, labels.resolution());
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const auto id = labels(z, y, x);
        bool edge = (x > 0 && labels(z, y, x - 1) != id) ||
                    (x + 1 < s.w && labels(z, y, x + 1) != id) ||
                    (y > 0 && labels(z, y - 1, x) != id) ||
                    (y + 1 < s.h && labels(z, y + 1, x) != id);
        if (!edge && mode == BoundaryMode::Full3D)
          edge = (z > 0 && labels(z - 1, y, x) != id) || (z + 1 < s.d && labels(z + 1, y, x) != id);
        out(z, y, x) = edge ? 1 : 0;
      }
  return out;
}

/// Binary mask of nonzero voxels.
template <typename T>
BinaryGrid nonzero_mask(const Grid<T>& g) {
  BinaryGrid out(g.shape(), 0, g.resolution());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] != T{} ? 1 : 0;
  return out;
}

/// Sub-block of `size` voxels starting at `origin`.
template <typename T>
Grid<T> crop(const Grid<T>& g, std::array<int, 3> origin, Shape3 size) {
  const auto s = g.shape();
  if (origin[0] < 0 || origin[1] < 0 || origin[2] < 0 || origin[0] + size.d > s.d || origin[1] + size.h > s.h ||
      origin[2] + size.w > s.w)
    throw DataError("crop " + size.str() + " does not fit in " + s.str());
  Grid<T> out(size, T{}, g.resolution());
  for (int z = 0; z < size.d; ++z)
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) out(z, y, x) = g(z + origin[0], y + origin[1], x + origin[2]);
  return out;
}

inline ConditionVolume crop(const ConditionVolume& c, std::array<int, 3> origin, Shape3 size) {
  return ConditionVolume(crop(c.boundary, origin, size), crop(c.mito, origin, size));
}

/// Condition derived from neuron instance labels and mitochondrion labels.
inline ConditionVolume make_condition(const LabelVolume& neurons, const LabelVolume& mito,
                                      BoundaryMode mode = BoundaryMode::LateralOnly) {
  if (!(neurons.shape() == mito.shape()))
    throw DataError("neuron and mito label volumes differ in shape");
  return ConditionVolume(extract_boundaries(neurons, mode), nonzero_mask(mito));
}

namespace detail {

struct LinearTap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Corner-aligned source coordinate for each target index along one axis.
inline std::vector<LinearTap> corner_aligned_taps(int src, int dst) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(dst));
  for (int i = 0; i < dst; ++i) {
    if (src == 1 || dst == 1) {
      taps[i] = {0, 0, 0.0};
      if (dst == 1 && src > 1) {
        // Single target sample maps to the source centre.
        const double p = 0.5 * (src - 1);
        const int i0 = static_cast<int>(std::floor(p));
        taps[i] = {i0, std::min(i0 + 1, src - 1), p - i0};
      }
      continue;
    }
    const double p = static_cast<double>(i) * (src - 1) / (dst - 1);
    int i0 = static_cast<int>(std::floor(p));
    i0 = std::clamp(i0, 0, src - 1);
    const int i1 = std::min(i0 + 1, src - 1);
    taps[i] = {i0, i1, p - i0};
  }
  return taps;
}

}  // namespace detail

/// Trilinear resize with corner-aligned sampling over a raw (z, y, x) buffer.
template <typename T>
void resample_trilinear_raw(std::span<const T> src, Shape3 s, std::span<T> dst, Shape3 t) {
  const auto tz = detail::corner_aligned_taps(s.d, t.d);
  const auto ty = detail::corner_aligned_taps(s.h, t.h);
  const auto tx = detail::corner_aligned_taps(s.w, t.w);
  auto at = [&](int z, int y, int x) -> T {
    return src[(static_cast<std::size_t>(z) * s.h + y) * s.w + x];
  };
  for (int z = 0; z < t.d; ++z)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) {
        const auto& a = tz[z];
        const auto& b = ty[y];
        const auto& c = tx[x];
        const T wz = static_cast<T>(a.w1), wy = static_cast<T>(b.w1), wx = static_cast<T>(c.w1);
        const T one{1};
        auto lerp_x = [&](int zz, int yy) {
          return (one - wx) * at(zz, yy, c.i0) + wx * at(zz, yy, c.i1);
        };
        const T v0 = (one - wy) * lerp_x(a.i0, b.i0) + wy * lerp_x(a.i0, b.i1);
        const T v1 = (one - wy) * lerp_x(a.i1, b.i0) + wy * lerp_x(a.i1, b.i1);
        dst[(static_cast<std::size_t>(z) * t.h + y) * t.w + x] = (one - wz) * v0 + wz * v1;
      }
}

/// Adjoint of resample_trilinear_raw: scatters dst gradients back onto src.
template <typename T>
void resample_trilinear_adjoint_raw(std::span<const T> grad_dst, Shape3 t, std::span<T> grad_src,
                                    Shape3 s) {
  const auto tz = detail::corner_aligned_taps(s.d, t.d);
  const auto ty = detail::corner_aligned_taps(s.h, t.h);
  const auto tx = detail::corner_aligned_taps(s.w, t.w);
  auto at = [&](int z, int y, int x) -> T& {
    return grad_src[(static_cast<std::size_t>(z) * s.h + y) * s.w + x];
  };
  const T one{1};
  for (int z = 0; z < t.d; ++z)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) {
        const T g = grad_dst[(static_cast<std::size_t>(z) * t.h + y) * t.w + x];
        const auto& a = tz[z];
        const auto& b = ty[y];
        const auto& c = tx[x];
        const T wz = static_cast<T>(a.w1), wy = static_cast<T>(b.w1), wx = static_cast<T>(c.w1);
        const int zs[2] = {a.i0, a.i1};
        const int ys[2] = {b.i0, b.i1};
        const int xs[2] = {c.i0, c.i1};
        const T fz[2] = {one - wz, wz};
        const T fy[2] = {one - wy, wy};
        const T fx[2] = {one - wx, wx};
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) at(zs[i], ys[j], xs[k]) += g * fz[i] * fy[j] * fx[k];
      }
}

/// Trilinear resize of a scalar grid (corner-aligned, clamp-to-edge).
template <typename T>
Grid<T> resample_trilinear(const Grid<T>& v, Shape3 target) {
  static_assert(std::is_floating_point_v<T>, "trilinear resampling needs a floating-point grid");
  Grid<T> out(target, T{}, v.resolution());
  resample_trilinear_raw<T>(v.data(), v.shape(), out.data(), target);
  return out;
}

enum class Interp { Nearest, Trilinear };

/// Per-voxel displacement in voxel units, ordered (dz, dy, dx).
struct DisplacementField {
  Shape3 shape;
  std::vector<std::array<float, 3>> d;

  explicit DisplacementField(Shape3 s) : shape(s), d(s.size(), {0.f, 0.f, 0.f}) {}
};

/// output(p) = input(p + field(p)); samples outside the grid clamp to the border.
/// Trilinear interpolation is rejected for integer grids (labels, masks).
template <typename T>
Grid<T> warp_by_field(const Grid<T>& g, const DisplacementField& field, Interp interp) {
  if (!(field.shape == g.shape())) throw DataError("displacement field shape mismatch");
  if (interp == Interp::Trilinear && !std::is_floating_point_v<T>)
    throw UsageError("trilinear warp requested for an integral grid; use nearest");
  const auto s = g.shape();
  Grid<T> out(s, T{}, g.resolution());
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const auto& d = field.d[g.index(z, y, x)];
        const double pz = z + static_cast<double>(d[0]);
        const double py = y + static_cast<double>(d[1]);
        const double px = x + static_cast<double>(d[2]);
        if (interp == Interp::Nearest) {
          out(z, y, x) = g.at_clamped(static_cast<int>(std::lround(pz)),
                                      static_cast<int>(std::lround(py)),
                                      static_cast<int>(std::lround(px)));
        } else if constexpr (std::is_floating_point_v<T>) {
          const double cz = std::clamp(pz, 0.0, s.d - 1.0);
          const double cy = std::clamp(py, 0.0, s.h - 1.0);
          const double cx = std::clamp(px, 0.0, s.w - 1.0);
          const int z0 = static_cast<int>(std::floor(cz));
          const int y0 = static_cast<int>(std::floor(cy));
          const int x0 = static_cast<int>(std::floor(cx));
          const double fz = cz - z0, fy = cy - y0, fx = cx - x0;
          double acc = 0.0;
          for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
              for (int k = 0; k < 2; ++k) {
                const double w = (i ? fz : 1 - fz) * (j ? fy : 1 - fy) * (k ? fx : 1 - fx);
                if (w == 0.0) continue;
                acc += w * static_cast<double>(g.at_clamped(z0 + i, y0 + j, x0 + k));
              }
          out(z, y, x) = static_cast<T>(acc);
        }
      }
  return out;
}

}  // namespace neuroforge
