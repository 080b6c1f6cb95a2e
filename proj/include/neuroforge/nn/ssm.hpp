#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "neuroforge/nn/layers.hpp"
#include "neuroforge/nn/params.hpp"
#include "neuroforge/nn/tensor.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge::nn {

/// Inputs of a diagonal selective state-space scan over L tokens of width C
/// with state size N. Row-major: x, delta are (L, C); B, Cm are (L, N);
/// A is (C, N) with negative entries; dskip is (C).
template <typename T>
struct ScanInputs {
  int L = 0, C = 0, N = 0;
  std::vector<T> x, delta, A, B, Cm, dskip;
};

/// Reference recurrence, token-major with the full (C, N) state:
///   h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t,   y_t = C_t . h_t + dskip x_t.
template <typename T>
std::vector<T> ssm_scan_naive(const ScanInputs<T>& in) {
  const int L = in.L, C = in.C, N = in.N;
  std::vector<T> h(static_cast<std::size_t>(C) * N, T{});
  std::vector<T> y(static_cast<std::size_t>(L) * C);
  for (int t = 0; t < L; ++t)
    for (int c = 0; c < C; ++c) {
      const T d = in.delta[t * C + c];
      const T u = in.x[t * C + c];
      T acc{};
      for (int n = 0; n < N; ++n) {
        T& s = h[c * N + n];
        const T decay = std::exp(d * in.A[c * N + n]);
        const T drive = d * in.B[t * N + n];
        s = decay * s + drive * u;
        acc += in.Cm[t * N + n] * s;
      }
      y[t * C + c] = acc + in.dskip[c] * u;
    }
  return y;
}

/// Work counter for the scan: one unit per (token, channel, state) update.
struct ScanStats {
  std::uint64_t state_updates = 0;
};

/// Channel-parallel scan. Each channel keeps its N-wide state local and walks
/// the sequence once, so the cost is O(L C N). When `states` is non-null it
/// receives every h_t as (L, C, N) for the adjoint pass.
template <typename T>
std::vector<T> ssm_scan(const ScanInputs<T>& in, std::vector<T>* states = nullptr,
                        ScanStats* stats = nullptr) {
  const int L = in.L, C = in.C, N = in.N;
  std::vector<T> y(static_cast<std::size_t>(L) * C);
  if (states) states->assign(static_cast<std::size_t>(L) * C * N, T{});
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    std::vector<T> h(static_cast<std::size_t>(N), T{});
    const T* a = in.A.data() + static_cast<std::size_t>(c) * N;
    for (int t = 0; t < L; ++t) {
      const T d = in.delta[static_cast<std::size_t>(t) * C + c];
      const T u = in.x[static_cast<std::size_t>(t) * C + c];
      const T* b = in.B.data() + static_cast<std::size_t>(t) * N;
      const T* cm = in.Cm.data() + static_cast<std::size_t>(t) * N;
      T acc{};
      for (int n = 0; n < N; ++n) {
        const T decay = std::exp(d * a[n]);
        const T drive = d * b[n];
        h[n] = decay * h[n] + drive * u;
        acc += cm[n] * h[n];
      }
      y[static_cast<std::size_t>(t) * C + c] = acc + in.dskip[c] * u;
      if (states)
        std::copy(h.begin(), h.end(),
                  states->begin() + (static_cast<std::ptrdiff_t>(t) * C + c) * N);
    }
  }
  if (stats) stats->state_updates += static_cast<std::uint64_t>(L) * C * N;
  return y;
}

template <typename T>
struct ScanGrads {
  std::vector<T> x, delta, A, B, Cm, dskip;
};

/// Adjoint of ssm_scan given the stored states and dL/dy.
template <typename T>
ScanGrads<T> ssm_scan_backward(const ScanInputs<T>& in, const std::vector<T>& states,
                               const std::vector<T>& dy) {
  const int L = in.L, C = in.C, N = in.N;
  ScanGrads<T> g;
  g.x.assign(static_cast<std::size_t>(L) * C, T{});
  g.delta.assign(static_cast<std::size_t>(L) * C, T{});
  g.A.assign(static_cast<std::size_t>(C) * N, T{});
  g.dskip.assign(static_cast<std::size_t>(C), T{});
  // B and C are shared across channels; accumulate per channel then reduce in
  // a fixed order so the result does not depend on the thread count.
  std::vector<T> gB(static_cast<std::size_t>(C) * L * N, T{});
  std::vector<T> gC(static_cast<std::size_t>(C) * L * N, T{});
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    std::vector<T> dh(static_cast<std::size_t>(N), T{});
    const T* a = in.A.data() + static_cast<std::size_t>(c) * N;
    T* ga = g.A.data() + static_cast<std::size_t>(c) * N;
    for (int t = L - 1; t >= 0; --t) {
      const std::size_t tc = static_cast<std::size_t>(t) * C + c;
      const T d = in.delta[tc];
      const T u = in.x[tc];
      const T gy = dy[tc];
      const T* h = states.data() + tc * N;
      const T* hprev = t > 0 ? states.data() + (tc - C) * N : nullptr;
      const T* b = in.B.data() + static_cast<std::size_t>(t) * N;
      const T* cm = in.Cm.data() + static_cast<std::size_t>(t) * N;
      T* gb = gB.data() + (static_cast<std::size_t>(c) * L + t) * N;
      T* gc = gC.data() + (static_cast<std::size_t>(c) * L + t) * N;
      g.dskip[c] += gy * u;
      T gu = gy * in.dskip[c];
      T gd{};
      for (int n = 0; n < N; ++n) {
        gc[n] = gy * h[n];
        dh[n] += gy * cm[n];
        const T decay = std::exp(d * a[n]);
        const T hp = hprev ? hprev[n] : T{};
        const T g_decay = dh[n] * hp;
        gd += g_decay * decay * a[n] + dh[n] * b[n] * u;
        ga[n] += g_decay * decay * d;
        gb[n] = dh[n] * d * u;
        gu += dh[n] * d * b[n];
        dh[n] *= decay;
      }
      g.x[tc] = gu;
      g.delta[tc] = gd;
    }
  }
  g.B.assign(static_cast<std::size_t>(L) * N, T{});
  g.Cm.assign(static_cast<std::size_t>(L) * N, T{});
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < static_cast<std::size_t>(L) * N; ++i) {
      g.B[i] += gB[static_cast<std::size_t>(c) * L * N + i];
      g.Cm[i] += gC[static_cast<std::size_t>(c) * L * N + i];
    }
  return g;
}

/// Physical coordinates (nm) of every voxel of a grid, z-major:
/// [z * r_z, y * r_xy, x * r_xy].
inline std::vector<double> physical_coords(Shape3 s, Resolution res) {
  std::vector<double> p;
  p.reserve(s.size() * 3);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        p.push_back(z * res.r_z);
        p.push_back(y * res.r_xy);
        p.push_back(x * res.r_xy);
      }
  return p;
}

/// Resolution-prior positional encoding: a two-layer MLP over physical
/// voxel coordinates.
template <typename T>
class Rpge {
 public:
  Rpge() = default;
  Rpge(ParameterStore<T>& store, const std::string& name, int hidden, int width, Rng& rng) {
    // Inputs are in nanometers (hundreds); the first layer starts small.
    l1_ = Linear<T>(store, name + ".fc1", 3, hidden, rng, Init::Default, 1.0 / (std::sqrt(3.0) * 256.0));
    l2_ = Linear<T>(store, name + ".fc2", hidden, width, rng);
  }

  int width() const { return l2_.out(); }

  /// coords: (n, 3) physical coordinates; returns (n, width).
  std::vector<T> forward(const ParameterStore<T>& store, const std::vector<double>& coords, bool keep) {
    std::vector<T> in(coords.begin(), coords.end());
    pre_ = l1_.forward(store, in, keep);
    auto act = pre_;
    for (auto& v : act) v = silu(v);
    return l2_.forward(store, act, keep);
  }

  void backward(ParameterStore<T>& store, const std::vector<T>& dout) {
    auto da = l2_.backward(store, dout);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= silu_grad(pre_[i]);
    l1_.backward(store, da);
  }

  void release() {
    l1_.release();
    l2_.release();
    pre_ = {};
  }

 private:
  Linear<T> l1_, l2_;
  std::vector<T> pre_;
};

/// Global modelling block at the U-Net bottleneck: flatten the volume
/// z-major into a voxel sequence, add the resolution-prior encoding,
/// RMS-normalize each token, run a selective scan and project back, with a
/// residual connection.
template <typename T>
class RgmBlock {
 public:
  RgmBlock() = default;
  RgmBlock(ParameterStore<T>& store, const std::string& name, int channels, int state_dim,
           bool bidirectional, Rng& rng)
      : C_(channels), N_(state_dim), bidirectional_(bidirectional) {
    rpge_ = Rpge<T>(store, name + ".rpge", channels, channels, rng);
    norm_ = store.add(name + ".norm.weight", {C_});
    for (auto& v : store[norm_].value) v = T{1};
    const int dirs = bidirectional ? 2 : 1;
    for (int k = 0; k < dirs; ++k) {
      const std::string p = name + (k == 0 ? ".fwd" : ".bwd");
      Dir d;
      d.delta_proj = Linear<T>(store, p + ".delta_proj", C_, C_, rng);
      d.b_proj = Linear<T>(store, p + ".b_proj", C_, N_, rng, Init::Default, -1.0, false);
      d.c_proj = Linear<T>(store, p + ".c_proj", C_, N_, rng, Init::Default, -1.0, false);
      d.a_log = store.add(p + ".a_log", {C_, N_});
      d.dskip = store.add(p + ".dskip", {C_});
      auto& al = store[d.a_log].value;
      for (int c = 0; c < C_; ++c)
        for (int n = 0; n < N_; ++n) al[c * N_ + n] = static_cast<T>(std::log(n + 1.0));
      for (auto& v : store[d.dskip].value) v = T{1};
      // softplus(bias) log-uniform in [1e-3, 1e-1].
      auto& db = store[store.id(p + ".delta_proj.bias")].value;
      for (auto& v : db) {
        const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
      }
      dirs_.push_back(std::move(d));
    }
    out_proj_ = Linear<T>(store, name + ".out_proj", C_ * dirs, C_, rng);
  }

  ParamId out_weight_id() const { return out_proj_.weight_id(); }

  Tensor<T> forward(const ParameterStore<T>& store, const Tensor<T>& f, Resolution res, bool keep) {
    if (f.c != C_) throw DataError("rgm: channel mismatch");
    const int L = static_cast<int>(f.spatial());
    const auto pe = rpge_.forward(store, physical_coords(f.s, res), keep);
    std::vector<T> u(static_cast<std::size_t>(L) * C_);
    for (int c = 0; c < C_; ++c) {
      const T* src = f.channel(c);
      for (int t = 0; t < L; ++t) u[static_cast<std::size_t>(t) * C_ + c] = src[t] + pe[static_cast<std::size_t>(t) * C_ + c];
    }
    u_ = u;
    rstd_.assign(static_cast<std::size_t>(L), T{});
    const auto& g = store[norm_].value;
    for (int t = 0; t < L; ++t) {
      T* row = u.data() + static_cast<std::size_t>(t) * C_;
      T ms{};
      for (int c = 0; c < C_; ++c) ms += row[c] * row[c];
      const T r = T{1} / std::sqrt(ms / static_cast<T>(C_) + static_cast<T>(kNormEps));
      rstd_[t] = r;
      for (int c = 0; c < C_; ++c) row[c] *= r * g[c];
    }
    const int dirs = static_cast<int>(dirs_.size());
    std::vector<T> ycat(static_cast<std::size_t>(L) * C_ * dirs);
    for (int k = 0; k < dirs; ++k) {
      auto& d = dirs_[k];
      const auto seq = k == 0 ? u : reversed(u, L, C_);
      d.in.L = L;
      d.in.C = C_;
      d.in.N = N_;
      d.in.x = seq;
      d.z = d.delta_proj.forward(store, seq, keep);
      d.in.delta.resize(d.z.size());
      for (std::size_t i = 0; i < d.z.size(); ++i) d.in.delta[i] = softplus(d.z[i]);
      d.in.B = d.b_proj.forward(store, seq, keep);
      d.in.Cm = d.c_proj.forward(store, seq, keep);
      const auto& al = store[d.a_log].value;
      d.in.A.resize(al.size());
      for (std::size_t i = 0; i < al.size(); ++i) d.in.A[i] = -std::exp(al[i]);
      d.in.dskip = store[d.dskip].value;
      auto y = ssm_scan(d.in, keep ? &d.states : nullptr);
      if (k == 1) y = reversed(y, L, C_);
      for (int t = 0; t < L; ++t)
        for (int c = 0; c < C_; ++c)
          ycat[(static_cast<std::size_t>(t) * dirs + k) * C_ + c] = y[static_cast<std::size_t>(t) * C_ + c];
    }
    const auto o = out_proj_.forward(store, ycat, keep);
    Tensor<T> out = f;
    for (int c = 0; c < C_; ++c) {
      T* dst = out.channel(c);
      for (int t = 0; t < L; ++t) dst[t] += o[static_cast<std::size_t>(t) * C_ + c];
    }
    if (!keep) release();
    shape_ = f.s;
    return out;
  }

  Tensor<T> backward(ParameterStore<T>& store, const Tensor<T>& dout) {
    const int L = static_cast<int>(dout.spatial());
    const int dirs = static_cast<int>(dirs_.size());
    std::vector<T> dobuf(static_cast<std::size_t>(L) * C_);
    for (int c = 0; c < C_; ++c) {
      const T* g = dout.channel(c);
      for (int t = 0; t < L; ++t) dobuf[static_cast<std::size_t>(t) * C_ + c] = g[t];
    }
    const auto dycat = out_proj_.backward(store, dobuf);
    std::vector<T> du(static_cast<std::size_t>(L) * C_, T{});
    for (int k = 0; k < dirs; ++k) {
      auto& d = dirs_[k];
      std::vector<T> dy(static_cast<std::size_t>(L) * C_);
      for (int t = 0; t < L; ++t)
        for (int c = 0; c < C_; ++c)
          dy[static_cast<std::size_t>(t) * C_ + c] = dycat[(static_cast<std::size_t>(t) * dirs + k) * C_ + c];
      if (k == 1) dy = reversed(dy, L, C_);
      auto g = ssm_scan_backward(d.in, d.states, dy);
      auto& gd = store[d.dskip].grad;
      for (int c = 0; c < C_; ++c) gd[c] += g.dskip[c];
      auto& ga = store[d.a_log].grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.A[i] * d.in.A[i];  // dA/dlog = A
      for (std::size_t i = 0; i < g.delta.size(); ++i) g.delta[i] *= sigmoid(d.z[i]);
      auto dseq = g.x;
      const auto a1 = d.delta_proj.backward(store, g.delta);
      const auto a2 = d.b_proj.backward(store, g.B);
      const auto a3 = d.c_proj.backward(store, g.Cm);
      for (std::size_t i = 0; i < dseq.size(); ++i) dseq[i] += a1[i] + a2[i] + a3[i];
      if (k == 1) dseq = reversed(dseq, L, C_);
      for (std::size_t i = 0; i < du.size(); ++i) du[i] += dseq[i];
    }
    const auto& g = store[norm_].value;
    auto& gg = store[norm_].grad;
    for (int t = 0; t < L; ++t) {
      T* dr = du.data() + static_cast<std::size_t>(t) * C_;
      const T* ur = u_.data() + static_cast<std::size_t>(t) * C_;
      const T r = rstd_[t];
      T dot{};
      for (int c = 0; c < C_; ++c) {
        gg[c] += dr[c] * ur[c] * r;
        dot += dr[c] * g[c] * ur[c];
      }
      const T k = r * r * r * dot / static_cast<T>(C_);
      for (int c = 0; c < C_; ++c) dr[c] = g[c] * r * dr[c] - ur[c] * k;
    }
    rpge_.backward(store, du);
    Tensor<T> df = dout;
    for (int c = 0; c < C_; ++c) {
      T* dst = df.channel(c);
      for (int t = 0; t < L; ++t) dst[t] += du[static_cast<std::size_t>(t) * C_ + c];
    }
    return df;
  }

  void release() {
    rpge_.release();
    out_proj_.release();
    u_ = {};
    rstd_ = {};
    for (auto& d : dirs_) {
      d.delta_proj.release();
      d.b_proj.release();
      d.c_proj.release();
      d.states = {};
    }
  }

 private:
  struct Dir {
    Linear<T> delta_proj, b_proj, c_proj;
    ParamId a_log = 0, dskip = 0;
    ScanInputs<T> in;
    std::vector<T> z, states;
  };

  static std::vector<T> reversed(const std::vector<T>& v, int L, int C) {
    std::vector<T> r(v.size());
    for (int t = 0; t < L; ++t)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(t) * C, C,
                  r.begin() + static_cast<std::ptrdiff_t>(L - 1 - t) * C);
    return r;
  }

  static constexpr double kNormEps = 1e-6;

  int C_ = 0, N_ = 0;
  bool bidirectional_ = false;
  ParamId norm_ = 0;
  std::vector<T> u_, rstd_;
  Rpge<T> rpge_;
  std::vector<Dir> dirs_;
  Linear<T> out_proj_;
  Shape3 shape_{};
};

}  // namespace neuroforge::nn
