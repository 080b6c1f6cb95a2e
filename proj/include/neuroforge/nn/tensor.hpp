#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "neuroforge/errors.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge::nn {

/// Channel-major feature map (C, D, H, W).
template <typename T>
struct Tensor {
  int c = 0;
  Shape3 s{};
  std::vector<T> v;

  Tensor() = default;
  Tensor(int channels, Shape3 shape, T fill = T{})
      : c(channels), s(shape), v(static_cast<std::size_t>(channels) * shape.size(), fill) {}

  std::size_t spatial() const { return s.size(); }
  std::size_t size() const { return v.size(); }
  T* channel(int k) { return v.data() + static_cast<std::size_t>(k) * spatial(); }
  const T* channel(int k) const { return v.data() + static_cast<std::size_t>(k) * spatial(); }
  bool same_layout(const Tensor& o) const { return c == o.c && s == o.s; }
};

template <typename T>
Tensor<T> from_grid(const Grid<T>& g) {
  Tensor<T> t(1, g.shape());
  std::copy(g.data().begin(), g.data().end(), t.v.begin());
  return t;
}

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T{1} / (T{1} + std::exp(-x));
  return s * (T{1} + x * (T{1} - s));
}

template <typename T>
T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& e : y.v) e = silu(e);
  return y;
}

/// dy * silu'(x), elementwise.
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] *= silu_grad(x.v[i]);
  return dx;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_layout(b)) throw DataError("tensor add: layout mismatch");
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.s == b.s)) throw DataError("concat: spatial mismatch");
  Tensor<T> out(a.c + b.c, a.s);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first) {
  Tensor<T> a(first, x.s), b(x.c - first, x.s);
  const auto cut = x.v.begin() + static_cast<std::ptrdiff_t>(a.v.size());
  std::copy(x.v.begin(), cut, a.v.begin());
  std::copy(cut, x.v.end(), b.v.begin());
  return {std::move(a), std::move(b)};
}

/// Nearest-neighbour upsampling by integer factors (fz, fy, fx).
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::array<int, 3> f) {
  const Shape3 o{x.s.d * f[0], x.s.h * f[1], x.s.w * f[2]};
  Tensor<T> y(x.c, o);
  for (int k = 0; k < x.c; ++k) {
    const T* src = x.channel(k);
    T* dst = y.channel(k);
    for (int z = 0; z < o.d; ++z)
      for (int yy = 0; yy < o.h; ++yy) {
        const T* row = src + (static_cast<std::size_t>(z / f[0]) * x.s.h + yy / f[1]) * x.s.w;
        T* out = dst + (static_cast<std::size_t>(z) * o.h + yy) * o.w;
        for (int xx = 0; xx < o.w; ++xx) out[xx] = row[xx / f[2]];
      }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, Shape3 in, std::array<int, 3> f) {
  Tensor<T> dx(dy.c, in);
  for (int k = 0; k < dy.c; ++k) {
    const T* src = dy.channel(k);
    T* dst = dx.channel(k);
    for (int z = 0; z < dy.s.d; ++z)
      for (int yy = 0; yy < dy.s.h; ++yy) {
        T* row = dst + (static_cast<std::size_t>(z / f[0]) * in.h + yy / f[1]) * in.w;
        const T* g = src + (static_cast<std::size_t>(z) * dy.s.h + yy) * dy.s.w;
        for (int xx = 0; xx < dy.s.w; ++xx) row[xx / f[2]] += g[xx];
      }
  }
  return dx;
}

/// Per-channel trilinear resize (corner aligned).
template <typename T>
Tensor<T> resize(const Tensor<T>& x, Shape3 target) {
  if (x.s == target) return x;
  Tensor<T> y(x.c, target);
  for (int k = 0; k < x.c; ++k)
    resample_trilinear_raw<T>(std::span<const T>(x.channel(k), x.spatial()), x.s,
                              std::span<T>(y.channel(k), y.spatial()), target);
  return y;
}

template <typename T>
Tensor<T> resize_backward(const Tensor<T>& dy, Shape3 source) {
  if (dy.s == source) return dy;
  Tensor<T> dx(dy.c, source);
  for (int k = 0; k < dy.c; ++k)
    resample_trilinear_adjoint_raw<T>(std::span<const T>(dy.channel(k), dy.spatial()), dy.s,
                                      std::span<T>(dx.channel(k), dx.spatial()), source);
  return dx;
}

}  // namespace neuroforge::nn
