#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "neuroforge/nn/params.hpp"
#include "neuroforge/nn/tensor.hpp"

namespace neuroforge::nn {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

/// Default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
/// He: weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
enum class Init { Default, Zero, He };

struct ConvGeometry {
  int cin = 1;
  int cout = 1;
  std::array<int, 3> kernel{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{1, 1, 1};

  static ConvGeometry same3(int cin, int cout) { return {cin, cout, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}; }
  static ConvGeometry pointwise(int cin, int cout) {
    return {cin, cout, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  }
  static ConvGeometry strided3(int cin, int cout, std::array<int, 3> s) {
    return {cin, cout, {3, 3, 3}, s, {1, 1, 1}};
  }

  int taps() const { return kernel[0] * kernel[1] * kernel[2]; }
  bool is_pointwise() const {
    return taps() == 1 && stride == std::array<int, 3>{1, 1, 1} && pad == std::array<int, 3>{0, 0, 0};
  }
  Shape3 output(Shape3 in) const {
    auto o = [](int n, int k, int s, int p) { return (n + 2 * p - k) / s + 1; };
    return {o(in.d, kernel[0], stride[0], pad[0]), o(in.h, kernel[1], stride[1], pad[1]),
            o(in.w, kernel[2], stride[2], pad[2])};
  }
};

namespace detail {

// Rows are (ci, kz, ky, kx), columns are output voxels.
template <typename T>
void im2col(const Tensor<T>& x, const ConvGeometry& g, Shape3 o, std::vector<T>& col) {
  const std::size_t n = o.size();
  col.resize(static_cast<std::size_t>(g.cin) * g.taps() * n);
  const std::size_t plane = static_cast<std::size_t>(o.h) * o.w;
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* src = x.channel(ci);
    for (int kz = 0; kz < g.kernel[0]; ++kz)
      for (int ky = 0; ky < g.kernel[1]; ++ky)
        for (int kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          T* dst = col.data() + row * n;
          // Valid output x range for this tap: 0 <= ox * stride + kx - pad < w.
          const int sx = g.stride[2], off = kx - g.pad[2];
          const int x0 = std::clamp((-off + sx - 1) / sx, 0, o.w);
          const int last = x.s.w - 1 - off;
          const int x1 = last < 0 ? x0 : std::clamp(last / sx + 1, x0, o.w);
          for (int oz = 0; oz < o.d; ++oz) {
            const int iz = oz * g.stride[0] + kz - g.pad[0];
            if (iz < 0 || iz >= x.s.d) {
              std::fill_n(dst + oz * plane, plane, T{});
              continue;
            }
            for (int oy = 0; oy < o.h; ++oy) {
              T* out = dst + oz * plane + static_cast<std::size_t>(oy) * o.w;
              const int iy = oy * g.stride[1] + ky - g.pad[1];
              if (iy < 0 || iy >= x.s.h) {
                std::fill_n(out, o.w, T{});
                continue;
              }
              const T* in = src + (static_cast<std::size_t>(iz) * x.s.h + iy) * x.s.w;
              std::fill_n(out, x0, T{});
              if (sx == 1) {
                std::copy(in + x0 + off, in + x1 + off, out + x0);
              } else {
                for (int ox = x0; ox < x1; ++ox) out[ox] = in[ox * sx + off];
              }
              std::fill(out + x1, out + o.w, T{});
            }
          }
        }
  }
}

template <typename T>
void col2im(const std::vector<T>& col, const ConvGeometry& g, Shape3 o, Tensor<T>& dx) {
  const std::size_t n = o.size();
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dst = dx.channel(ci);
    for (int kz = 0; kz < g.kernel[0]; ++kz)
      for (int ky = 0; ky < g.kernel[1]; ++ky)
        for (int kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          const T* src = col.data() + row * n;
          for (int oz = 0; oz < o.d; ++oz) {
            const int iz = oz * g.stride[0] + kz - g.pad[0];
            if (iz < 0 || iz >= dx.s.d) continue;
            for (int oy = 0; oy < o.h; ++oy) {
              const int iy = oy * g.stride[1] + ky - g.pad[1];
              if (iy < 0 || iy >= dx.s.h) continue;
              T* out = dst + (static_cast<std::size_t>(iz) * dx.s.h + iy) * dx.s.w;
              const T* in = src + (static_cast<std::size_t>(oz) * o.h + oy) * o.w;
              for (int ox = 0; ox < o.w; ++ox) {
                const int ix = ox * g.stride[2] + kx - g.pad[2];
                if (ix >= 0 && ix < dx.s.w) out[ix] += in[ox];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// 3D convolution with zero padding, lowered to a GEMM over im2col columns.
/// Weight layout is (cout, cin, kd, kh, kw).
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(ParameterStore<T>& store, const std::string& name, ConvGeometry geom, Rng& rng,
         Init init = Init::Default)
      : g_(geom) {
    w_ = store.add(name + ".weight", {g_.cout, g_.cin, g_.kernel[0], g_.kernel[1], g_.kernel[2]});
    b_ = store.add(name + ".bias", {g_.cout});
    const double fan_in = static_cast<double>(g_.cin * g_.taps());
    if (init == Init::Default) {
      const double bound = 1.0 / std::sqrt(fan_in);
      fill_uniform(store[w_].value, bound, rng);
      fill_uniform(store[b_].value, bound, rng);
    } else if (init == Init::He) {
      fill_uniform(store[w_].value, std::sqrt(6.0 / fan_in), rng);
    }
  }

  const ConvGeometry& geometry() const { return g_; }
  ParamId weight_id() const { return w_; }
  ParamId bias_id() const { return b_; }

  Tensor<T> forward(const ParameterStore<T>& store, const Tensor<T>& x, bool keep) {
    if (x.c != g_.cin) throw DataError("conv: expected " + std::to_string(g_.cin) + " channels");
    const Shape3 o = g_.output(x.s);
    const auto n = static_cast<Eigen::Index>(o.size());
    Tensor<T> y(g_.cout, o);
    CMapR<T> w(store[w_].value.data(), g_.cout, static_cast<Eigen::Index>(g_.cin) * g_.taps());
    MapR<T> ym(y.v.data(), g_.cout, n);
    if (g_.is_pointwise()) {
      ym.noalias() = w * CMapR<T>(x.v.data(), g_.cin, n);
    } else {
      detail::im2col(x, g_, o, col_);
      ym.noalias() = w * CMapR<T>(col_.data(), w.cols(), n);
    }
    const auto& b = store[b_].value;
    for (int k = 0; k < g_.cout; ++k) ym.row(k).array() += b[k];
    if (keep) input_ = x;
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx unless need_input_grad is false.
  Tensor<T> backward(ParameterStore<T>& store, const Tensor<T>& dy, bool need_input_grad = true) {
    const Shape3 o = dy.s;
    const auto n = static_cast<Eigen::Index>(o.size());
    const auto k = static_cast<Eigen::Index>(g_.cin) * g_.taps();
    CMapR<T> dym(dy.v.data(), g_.cout, n);
    MapR<T> dw(store[w_].grad.data(), g_.cout, k);
    auto& db = store[b_].grad;
    for (int c = 0; c < g_.cout; ++c) db[c] += dym.row(c).sum();
    CMapR<T> w(store[w_].value.data(), g_.cout, k);
    Tensor<T> dx(g_.cin, input_.s);
    if (g_.is_pointwise()) {
      dw.noalias() += dym * CMapR<T>(input_.v.data(), g_.cin, n).transpose();
      if (need_input_grad) MapR<T>(dx.v.data(), g_.cin, n).noalias() = w.transpose() * dym;
      return dx;
    }
    detail::im2col(input_, g_, o, col_);
    dw.noalias() += dym * CMapR<T>(col_.data(), k, n).transpose();
    if (need_input_grad) {
      MapR<T>(col_.data(), k, n).noalias() = w.transpose() * dym;
      detail::col2im(col_, g_, o, dx);
    }
    return dx;
  }

  void release() {
    input_ = {};
    col_.clear();
    col_.shrink_to_fit();
  }

 private:
  ConvGeometry g_{};
  ParamId w_ = 0, b_ = 0;
  Tensor<T> input_;
  std::vector<T> col_;
};

/// Row-wise affine map: y = x W^T + b, with x of shape (rows, in).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, Rng& rng,
         Init init = Init::Default, double weight_bound = -1.0, bool bias = true)
      : in_(in), out_(out), has_bias_(bias) {
    w_ = store.add(name + ".weight", {out, in});
    if (bias) b_ = store.add(name + ".bias", {out});
    if (init == Init::Default) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      fill_uniform(store[w_].value, weight_bound > 0 ? weight_bound : bound, rng);
      if (bias) fill_uniform(store[b_].value, bound, rng);
    }
  }

  int in() const { return in_; }
  int out() const { return out_; }
  ParamId weight_id() const { return w_; }

  std::vector<T> forward(const ParameterStore<T>& store, const std::vector<T>& x, bool keep) {
    const auto rows = static_cast<Eigen::Index>(x.size() / in_);
    std::vector<T> y(static_cast<std::size_t>(rows) * out_);
    MapR<T> ym(y.data(), rows, out_);
    ym.noalias() = CMapR<T>(x.data(), rows, in_) * CMapR<T>(store[w_].value.data(), out_, in_).transpose();
    if (has_bias_) {
      const auto& b = store[b_].value;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < out_; ++j) ym(r, j) += b[j];
    }
    if (keep) input_ = x;
    return y;
  }

  std::vector<T> backward(ParameterStore<T>& store, const std::vector<T>& dy) {
    const auto rows = static_cast<Eigen::Index>(dy.size() / out_);
    CMapR<T> dym(dy.data(), rows, out_);
    MapR<T>(store[w_].grad.data(), out_, in_).noalias() +=
        dym.transpose() * CMapR<T>(input_.data(), rows, in_);
    if (has_bias_) {
      auto& db = store[b_].grad;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < out_; ++j) db[j] += dym(r, j);
    }
    std::vector<T> dx(static_cast<std::size_t>(rows) * in_);
    MapR<T>(dx.data(), rows, in_).noalias() = dym * CMapR<T>(store[w_].value.data(), out_, in_);
    return dx;
  }

  void release() { input_ = {}; }

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = true;
  ParamId w_ = 0, b_ = 0;
  std::vector<T> input_;
};

/// Group normalization over (channels in group, D, H, W) with a per-channel
/// affine map. Uses gcd(C / 2, 8) groups for even C (at least two channels
/// per group) and a single group for odd C.
template <typename T>
class GroupNorm {
 public:
  static constexpr double kEps = 1e-5;

  GroupNorm() = default;
  GroupNorm(ParameterStore<T>& store, const std::string& name, int channels)
      : c_(channels), groups_(channels % 2 ? 1 : std::gcd(channels / 2, 8)) {
    g_ = store.add(name + ".weight", {channels});
    b_ = store.add(name + ".bias", {channels});
    std::fill(store[g_].value.begin(), store[g_].value.end(), T{1});
  }

  Tensor<T> forward(const ParameterStore<T>& store, const Tensor<T>& x, bool keep) {
    if (x.c != c_) throw DataError("group norm: expected " + std::to_string(c_) + " channels");
    const int cg = c_ / groups_;
    const std::size_t n = static_cast<std::size_t>(cg) * x.spatial();
    Tensor<T> xhat(x.c, x.s), y(x.c, x.s);
    std::vector<T> rstd(static_cast<std::size_t>(groups_));
    const auto& gamma = store[g_].value;
    const auto& beta = store[b_].value;
    for (int g = 0; g < groups_; ++g) {
      const T* in = x.channel(g * cg);
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += in[i];
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) sq += (in[i] - mean) * (in[i] - mean);
      const double r = 1.0 / std::sqrt(sq / static_cast<double>(n) + kEps);
      rstd[g] = static_cast<T>(r);
      T* xh = xhat.channel(g * cg);
      for (std::size_t i = 0; i < n; ++i) xh[i] = static_cast<T>((in[i] - mean) * r);
    }
    for (int k = 0; k < c_; ++k) {
      const T* xh = xhat.channel(k);
      T* out = y.channel(k);
      for (std::size_t i = 0; i < x.spatial(); ++i) out[i] = gamma[k] * xh[i] + beta[k];
    }
    if (keep) {
      xhat_ = std::move(xhat);
      rstd_ = std::move(rstd);
    }
    return y;
  }

  Tensor<T> backward(ParameterStore<T>& store, const Tensor<T>& dy) {
    const int cg = c_ / groups_;
    const std::size_t sp = dy.spatial(), n = static_cast<std::size_t>(cg) * sp;
    const auto& gamma = store[g_].value;
    auto& dgamma = store[g_].grad;
    auto& dbeta = store[b_].grad;
    Tensor<T> dx(dy.c, dy.s);
    for (int k = 0; k < c_; ++k) {
      const T* d = dy.channel(k);
      const T* xh = xhat_.channel(k);
      T* dxh = dx.channel(k);
      double sg = 0.0, sb = 0.0;
      for (std::size_t i = 0; i < sp; ++i) {
        sg += d[i] * xh[i];
        sb += d[i];
        dxh[i] = d[i] * gamma[k];
      }
      dgamma[k] += static_cast<T>(sg);
      dbeta[k] += static_cast<T>(sb);
    }
    for (int g = 0; g < groups_; ++g) {
      T* dxh = dx.channel(g * cg);
      const T* xh = xhat_.channel(g * cg);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        m1 += dxh[i];
        m2 += dxh[i] * xh[i];
      }
      m1 /= static_cast<double>(n);
      m2 /= static_cast<double>(n);
      const double r = rstd_[g];
      for (std::size_t i = 0; i < n; ++i) dxh[i] = static_cast<T>(r * (dxh[i] - m1 - xh[i] * m2));
    }
    return dx;
  }

  void release() {
    xhat_ = {};
    rstd_.clear();
  }

 private:
  int c_ = 0, groups_ = 1;
  ParamId g_ = 0, b_ = 0;
  Tensor<T> xhat_;
  std::vector<T> rstd_;
};

}  // namespace neuroforge::nn
