#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <string>
#include <vector>

#include "neuroforge/diffusion.hpp"
#include "neuroforge/nn/layers.hpp"
#include "neuroforge/nn/params.hpp"
#include "neuroforge/nn/ssm.hpp"
#include "neuroforge/nn/tensor.hpp"

namespace neuroforge::nn {

struct UNetConfig {
  int levels = 3;
  int base_channels = 16;
  /// Downsampling factor (dz, dy, dx) between consecutive levels.
  std::array<int, 3> down_factor{1, 2, 2};
  int cond_embed_channels = 32;
  /// Lateral downsampling of the condition embedding: 1, 2, 4 or 8.
  int cond_embed_downsample = 8;
  int rgm_state_dim = 8;
  bool learned_variance = false;
  bool bidirectional_scan = false;

  bool operator==(const UNetConfig&) const = default;

  void validate() const {
    if (levels < 1) throw UsageError("unet.levels must be >= 1");
    if (base_channels < 1 || cond_embed_channels < 2 || rgm_state_dim < 1)
      throw UsageError("unet channel counts must be positive (cond_embed_channels >= 2)");
    for (int f : down_factor)
      if (f < 1) throw UsageError("unet.down_factor entries must be >= 1");
    if (down_factor[1] != down_factor[2])
      throw UsageError("unet.down_factor must be laterally isotropic");
    const int e = cond_embed_downsample;
    if (e != 1 && e != 2 && e != 4 && e != 8) throw UsageError("unet.cond_embed_downsample must be 1, 2, 4 or 8");
  }

  int channels(int level) const { return base_channels << level; }
  int out_channels() const { return learned_variance ? 2 : 1; }

  /// Product of the down factors over all level transitions.
  std::array<int, 3> cumulative_factor() const {
    std::array<int, 3> f{1, 1, 1};
    for (int l = 0; l + 1 < levels; ++l)
      for (int a = 0; a < 3; ++a) f[a] *= down_factor[a];
    return f;
  }

  void check_input(Shape3 s) const {
    const auto f = cumulative_factor();
    if (s.d % f[0] || s.h % f[1] || s.w % f[2])
      throw DataError("input " + s.str() + " not divisible by cumulative down factors " +
                      std::to_string(f[0]) + "x" + std::to_string(f[1]) + "x" + std::to_string(f[2]));
    const int e = cond_embed_downsample;
    if (s.h % e || s.w % e)
      throw DataError("input " + s.str() + ": height and width must be divisible by " + std::to_string(e));
  }
};

/// Sinusoidal features of an integer timestep, [sin | cos] halves.
template <typename T>
std::vector<T> timestep_features(int t, int dim) {
  std::vector<T> f(static_cast<std::size_t>(dim), T{});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(half, 1));
    f[i] = static_cast<T>(std::sin(t * freq));
    f[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return f;
}

/// Condition encoder: three 3x3x3 convolutions, SiLU between stages and a group
/// normalization at the end, mapping (2, D, H, W) to (channels, D, H/f, W/f).
/// The first log2(f) convolutions have stride (1,2,2), the rest stride 1; with
/// the default f = 8 all three are strided. The convolutions are He-initialised.
template <typename T>
class ConditionEmbedding {
 public:
  ConditionEmbedding() = default;
  ConditionEmbedding(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng,
                     int downsample = 8)
      : downsample_(downsample) {
    const int mid = std::max(1, channels / 2);
    const int stages = std::countr_zero(static_cast<unsigned>(downsample));
    auto stride = [&](int i) { return i < stages ? std::array<int, 3>{1, 2, 2} : std::array<int, 3>{1, 1, 1}; };
    c1_ = Conv3d<T>(store, name + ".conv1", ConvGeometry::strided3(2, mid, stride(0)), rng, Init::He);
    c2_ = Conv3d<T>(store, name + ".conv2", ConvGeometry::strided3(mid, mid, stride(1)), rng, Init::He);
    c3_ = Conv3d<T>(store, name + ".conv3", ConvGeometry::strided3(mid, channels, stride(2)), rng, Init::He);
    norm_ = GroupNorm<T>(store, name + ".norm", channels);
  }

  static Tensor<T> to_tensor(const ConditionVolume& c) {
    Tensor<T> x(2, c.shape());
    for (std::size_t i = 0; i < x.spatial(); ++i) {
      x.v[i] = static_cast<T>(c.boundary[i]);
      x.v[x.spatial() + i] = static_cast<T>(c.mito[i]);
    }
    return x;
  }

  Tensor<T> forward(const ParameterStore<T>& store, const ConditionVolume& c, bool keep) {
    const auto s = c.shape();
    if (s.h % downsample_ || s.w % downsample_)
      throw DataError("condition " + s.str() + ": height and width must be divisible by " +
                      std::to_string(downsample_));
    h1_ = c1_.forward(store, to_tensor(c), keep);
    h2_ = c2_.forward(store, silu(h1_), keep);
    auto out = norm_.forward(store, c3_.forward(store, silu(h2_), keep), keep);
    if (!keep) {
      h1_ = {};
      h2_ = {};
    }
    return out;
  }

  void backward(ParameterStore<T>& store, const Tensor<T>& dout) {
    auto g = silu_backward(h2_, c3_.backward(store, norm_.backward(store, dout)));
    g = silu_backward(h1_, c2_.backward(store, g));
    c1_.backward(store, g, false);
  }

  void release() {
    c1_.release();
    c2_.release();
    c3_.release();
    norm_.release();
    h1_ = {};
    h2_ = {};
  }

 private:
  int downsample_ = 8;
  Conv3d<T> c1_, c2_, c3_;
  GroupNorm<T> norm_;
  Tensor<T> h1_, h2_;
};

/// Multi-scale condition injection: f + conv1x1(resize(c_embed)), with the
/// 1x1x1 convolution zero-initialised.
template <typename T>
class ConditionInjection {
 public:
  ConditionInjection() = default;
  ConditionInjection(ParameterStore<T>& store, const std::string& name, int embed_channels,
                     int feature_channels, Rng& rng)
      : proj_(store, name, ConvGeometry::pointwise(embed_channels, feature_channels), rng, Init::Zero) {}

  const Conv3d<T>& conv() const { return proj_; }

  Tensor<T> forward(const ParameterStore<T>& store, const Tensor<T>& f, const Tensor<T>& c_embed,
                    bool keep) {
    embed_shape_ = c_embed.s;
    auto ci = proj_.forward(store, resize(c_embed, f.s), keep);
    add_inplace(ci, f);
    return ci;
  }

  /// Returns dL/df and accumulates dL/dc_embed into d_embed.
  Tensor<T> backward(ParameterStore<T>& store, const Tensor<T>& dout, Tensor<T>& d_embed) {
    const auto dr = proj_.backward(store, dout);
    add_inplace(d_embed, resize_backward(dr, embed_shape_));
    return dout;
  }

  void release() { proj_.release(); }

 private:
  Conv3d<T> proj_;
  Shape3 embed_shape_{};
};

/// Pre-activation residual block (GroupNorm, SiLU, conv) with an additive
/// timestep projection.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParameterStore<T>& store, const std::string& name, int cin, int cout, int tdim, Rng& rng)
      : cout_(cout) {
    n1_ = GroupNorm<T>(store, name + ".norm1", cin);
    c1_ = Conv3d<T>(store, name + ".conv1", ConvGeometry::same3(cin, cout), rng);
    n2_ = GroupNorm<T>(store, name + ".norm2", cout);
    c2_ = Conv3d<T>(store, name + ".conv2", ConvGeometry::same3(cout, cout), rng);
    tproj_ = Linear<T>(store, name + ".time_proj", tdim, cout, rng);
    if (cin != cout) {
      skip_ = Conv3d<T>(store, name + ".skip", ConvGeometry::pointwise(cin, cout), rng);
      has_skip_ = true;
    }
  }

  Tensor<T> forward(const ParameterStore<T>& store, const Tensor<T>& x, const std::vector<T>& temb_act,
                    bool keep) {
    auto n1 = n1_.forward(store, x, keep);
    auto h = c1_.forward(store, silu(n1), keep);
    const auto tp = tproj_.forward(store, temb_act, keep);
    for (int k = 0; k < cout_; ++k) {
      T* p = h.channel(k);
      for (std::size_t i = 0; i < h.spatial(); ++i) p[i] += tp[k];
    }
    auto n2 = n2_.forward(store, h, keep);
    auto out = c2_.forward(store, silu(n2), keep);
    if (has_skip_) add_inplace(out, skip_.forward(store, x, keep));
    else add_inplace(out, x);
    if (keep) {
      n1_out_ = std::move(n1);
      n2_out_ = std::move(n2);
    }
    return out;
  }

  /// Returns dL/dx and accumulates dL/d(silu(temb)) into d_temb.
  Tensor<T> backward(ParameterStore<T>& store, const Tensor<T>& dout, std::vector<T>& d_temb) {
    const auto dh = n2_.backward(store, silu_backward(n2_out_, c2_.backward(store, dout)));
    std::vector<T> dtp(static_cast<std::size_t>(cout_), T{});
    for (int k = 0; k < cout_; ++k) {
      const T* p = dh.channel(k);
      T s{};
      for (std::size_t i = 0; i < dh.spatial(); ++i) s += p[i];
      dtp[k] = s;
    }
    const auto dt = tproj_.backward(store, dtp);
    for (std::size_t i = 0; i < dt.size(); ++i) d_temb[i] += dt[i];
    auto dx = n1_.backward(store, silu_backward(n1_out_, c1_.backward(store, dh)));
    if (has_skip_) add_inplace(dx, skip_.backward(store, dout));
    else add_inplace(dx, dout);
    return dx;
  }

  void release() {
    c1_.release();
    c2_.release();
    tproj_.release();
    skip_.release();
    n1_.release();
    n2_.release();
    n1_out_ = {};
    n2_out_ = {};
  }

 private:
  int cout_ = 0;
  GroupNorm<T> n1_, n2_;
  Conv3d<T> c1_, c2_, skip_;
  Linear<T> tproj_;
  bool has_skip_ = false;
  Tensor<T> n1_out_, n2_out_;
};

/// Conditional 3D U-Net noise predictor.
///
/// Encoder and decoder levels each get a condition injection; the bottleneck
/// runs a residual block followed by the global-modelling scan block.
/// Activations needed for backward() are cached only in training mode.
template <typename T>
class UNet {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int L = cfg_.levels;
    const int ce = cfg_.cond_embed_channels;
    tfeat_ = cfg_.base_channels;
    tdim_ = 4 * cfg_.base_channels;
    t1_ = Linear<T>(store_, "time.fc1", tfeat_, tdim_, rng);
    t2_ = Linear<T>(store_, "time.fc2", tdim_, tdim_, rng);
    cond_ = ConditionEmbedding<T>(store_, "cond_embed", ce, rng, cfg_.cond_embed_downsample);
    in_conv_ = Conv3d<T>(store_, "in_conv", ConvGeometry::same3(1, cfg_.channels(0)), rng);
    for (int l = 0; l < L; ++l) {
      const std::string p = "enc" + std::to_string(l);
      const int cin = cfg_.channels(l);
      enc_res_.emplace_back(store_, p + ".res", cin, cfg_.channels(l), tdim_, rng);
      enc_inj_.emplace_back(store_, p + ".inject", ce, cfg_.channels(l), rng);
      if (l + 1 < L)
        down_.emplace_back(store_, p + ".down",
                           ConvGeometry::strided3(cfg_.channels(l), cfg_.channels(l + 1), cfg_.down_factor), rng);
    }
    mid_ = ResBlock<T>(store_, "mid.res", cfg_.channels(L - 1), cfg_.channels(L - 1), tdim_, rng);
    rgm_ = RgmBlock<T>(store_, "mid.rgm", cfg_.channels(L - 1), cfg_.rgm_state_dim, cfg_.bidirectional_scan, rng);
    up_conv_.resize(static_cast<std::size_t>(std::max(L - 1, 0)));
    dec_res_.resize(up_conv_.size());
    dec_inj_.resize(up_conv_.size());
    for (int l = L - 2; l >= 0; --l) {
      const std::string p = "dec" + std::to_string(l);
      up_conv_[l] = Conv3d<T>(store_, p + ".up", ConvGeometry::same3(cfg_.channels(l + 1), cfg_.channels(l)), rng);
      dec_res_[l] = ResBlock<T>(store_, p + ".res", 2 * cfg_.channels(l), cfg_.channels(l), tdim_, rng);
      dec_inj_[l] = ConditionInjection<T>(store_, p + ".inject", ce, cfg_.channels(l), rng);
    }
    out_norm_ = GroupNorm<T>(store_, "out_norm", cfg_.channels(0));
    out_conv_ = Conv3d<T>(store_, "out_conv", ConvGeometry::same3(cfg_.channels(0), cfg_.out_channels()), rng);
  }

  const UNetConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// In training mode activations are cached for backward().
  void set_training(bool on) {
    training_ = on;
    if (!on) release();
  }
  bool training() const { return training_; }

  NoisePrediction<T> operator()(const Grid<T>& x_t, int t, const ConditionVolume& c) {
    return forward(x_t, t, c);
  }

  NoisePrediction<T> forward(const Grid<T>& x_t, int t, const ConditionVolume& c) {
    if (!(c.shape() == x_t.shape())) throw DataError("unet: condition/input shape mismatch");
    cfg_.check_input(x_t.shape());
    const bool keep = training_;
    const int L = cfg_.levels;
    Resolution res = x_t.resolution();

    // Timestep embedding.
    e1_ = t1_.forward(store_, timestep_features<T>(t, tfeat_), keep);
    auto a1 = e1_;
    for (auto& v : a1) v = silu(v);
    temb_ = t2_.forward(store_, a1, keep);
    auto ta = temb_;
    for (auto& v : ta) v = silu(v);

    auto cemb = cond_.forward(store_, c, keep);
    embed_shape_ = cemb.s;

    auto h = in_conv_.forward(store_, from_grid(x_t), keep);
    for (int l = 0; l < L; ++l) {
      h = enc_res_[l].forward(store_, h, ta, keep);
      h = enc_inj_[l].forward(store_, h, cemb, keep);
      if (l + 1 < L) {
        if (skips_.size() < static_cast<std::size_t>(L)) skips_.resize(static_cast<std::size_t>(L));
        skips_[l] = h;
        h = down_[l].forward(store_, h, keep);
        res = Resolution(res.r_z * cfg_.down_factor[0], res.r_xy * cfg_.down_factor[1]);
      }
    }
    h = mid_.forward(store_, h, ta, keep);
    h = rgm_.forward(store_, h, res, keep);
    up_in_.resize(static_cast<std::size_t>(std::max(L - 1, 0)));
    for (int l = L - 2; l >= 0; --l) {
      up_in_[l] = h.s;
      h = up_conv_[l].forward(store_, upsample_nearest(h, cfg_.down_factor), keep);
      h = concat_channels(h, skips_[l]);
      h = dec_res_[l].forward(store_, h, ta, keep);
      h = dec_inj_[l].forward(store_, h, cemb, keep);
    }
    if (!keep) skips_.clear();
    h = out_norm_.forward(store_, h, keep);
    auto out = out_conv_.forward(store_, silu(h), keep);
    if (keep) pre_out_ = std::move(h);

    NoisePrediction<T> pred;
    if (cfg_.learned_variance) {
      auto [eps, var] = split_channels(out, 1);
      pred.epsilon_hat = Grid<T>(x_t.shape(), std::move(eps.v), x_t.resolution());
      pred.var_logits.emplace(x_t.shape(), std::move(var.v), x_t.resolution());
    } else {
      pred.epsilon_hat = Grid<T>(x_t.shape(), std::move(out.v), x_t.resolution());
    }
    return pred;
  }

  /// Back-propagates dL/d(eps_hat) (and dL/d(var_logits) when present) from the
  /// most recent training-mode forward pass, accumulating parameter gradients.
  void backward(const Grid<T>& d_eps, const Grid<T>* d_var) {
    if (!training_) throw UsageError("unet.backward requires training mode");
    const int L = cfg_.levels;
    Tensor<T> dout(cfg_.out_channels(), d_eps.shape());
    std::copy(d_eps.data().begin(), d_eps.data().end(), dout.v.begin());
    if (cfg_.learned_variance && d_var)
      std::copy(d_var->data().begin(), d_var->data().end(), dout.channel(1));

    auto dh = out_norm_.backward(store_, silu_backward(pre_out_, out_conv_.backward(store_, dout)));
    Tensor<T> dcemb(cfg_.cond_embed_channels, embed_shape_);
    std::vector<T> dta(static_cast<std::size_t>(tdim_), T{});
    std::vector<Tensor<T>> dskips(static_cast<std::size_t>(L));
    for (int l = 0; l <= L - 2; ++l) {
      dh = dec_inj_[l].backward(store_, dh, dcemb);
      dh = dec_res_[l].backward(store_, dh, dta);
      auto [dup, dskip] = split_channels(dh, cfg_.channels(l));
      dskips[l] = std::move(dskip);
      dh = upsample_nearest_backward(up_conv_[l].backward(store_, dup), up_in_[l], cfg_.down_factor);
    }
    dh = rgm_.backward(store_, dh);
    dh = mid_.backward(store_, dh, dta);
    for (int l = L - 1; l >= 0; --l) {
      if (l + 1 < L) {
        dh = down_[l].backward(store_, dh);
        add_inplace(dh, dskips[l]);
      }
      dh = enc_inj_[l].backward(store_, dh, dcemb);
      dh = enc_res_[l].backward(store_, dh, dta);
    }
    in_conv_.backward(store_, dh, false);
    cond_.backward(store_, dcemb);

    for (std::size_t i = 0; i < dta.size(); ++i) dta[i] *= silu_grad(temb_[i]);
    auto da = t2_.backward(store_, dta);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= silu_grad(e1_[i]);
    t1_.backward(store_, da);
  }

  void release() {
    t1_.release();
    t2_.release();
    cond_.release();
    in_conv_.release();
    for (auto& b : enc_res_) b.release();
    for (auto& b : enc_inj_) b.release();
    for (auto& b : down_) b.release();
    mid_.release();
    rgm_.release();
    for (auto& b : up_conv_) b.release();
    for (auto& b : dec_res_) b.release();
    for (auto& b : dec_inj_) b.release();
    out_norm_.release();
    out_conv_.release();
    skips_.clear();
    pre_out_ = {};
  }

 private:
  UNetConfig cfg_;
  ParameterStore<T> store_;
  bool training_ = false;
  int tfeat_ = 0, tdim_ = 0;

  Linear<T> t1_, t2_;
  ConditionEmbedding<T> cond_;
  Conv3d<T> in_conv_;
  std::vector<ResBlock<T>> enc_res_;
  std::vector<ConditionInjection<T>> enc_inj_;
  std::vector<Conv3d<T>> down_;
  ResBlock<T> mid_;
  RgmBlock<T> rgm_;
  std::vector<Conv3d<T>> up_conv_;
  std::vector<ResBlock<T>> dec_res_;
  std::vector<ConditionInjection<T>> dec_inj_;
  GroupNorm<T> out_norm_;
  Conv3d<T> out_conv_;

  std::vector<T> e1_, temb_;
  Shape3 embed_shape_{};
  std::vector<Tensor<T>> skips_;
  std::vector<Shape3> up_in_;
  Tensor<T> pre_out_;
};

}  // namespace neuroforge::nn
