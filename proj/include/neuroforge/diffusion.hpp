#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "neuroforge/errors.hpp"
#include "neuroforge/rng.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge {

enum class ScheduleKind { Linear, Cosine };

inline const char* schedule_kind_name(ScheduleKind k) {
  return k == ScheduleKind::Linear ? "linear" : "cosine";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw UsageError("unknown schedule kind '" + s + "'");
}

/// Variance schedule of the forward noising chain. Timesteps are 1-based.
class DiffusionSchedule {
 public:
  static DiffusionSchedule make(int steps, ScheduleKind kind, double beta_start, double beta_end) {
    if (steps < 1) throw UsageError("schedule needs at least one timestep");
    DiffusionSchedule s;
    s.kind_ = kind;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.beta_.resize(static_cast<std::size_t>(steps));
    if (kind == ScheduleKind::Linear) {
      if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw UsageError("linear schedule needs 0 < beta_start <= beta_end < 1");
      for (int i = 0; i < steps; ++i)
        s.beta_[i] = steps == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) * i / (steps - 1.0);
    } else {
      // Squared-cosine cumulative schedule with offset 0.008, betas capped at 0.999.
      constexpr double off = 0.008;
      auto f = [&](double t) {
        const double c = std::cos((t / steps + off) / (1.0 + off) * std::numbers::pi / 2.0);
        return c * c;
      };
      for (int i = 0; i < steps; ++i)
        s.beta_[i] = std::min(1.0 - f(i + 1.0) / f(i), 0.999);
    }
    s.finish();
    return s;
  }

  /// Schedule from explicit betas (tests, checkpoints).
  static DiffusionSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw UsageError("schedule needs at least one timestep");
    DiffusionSchedule s;
    s.beta_ = std::move(betas);
    s.beta_start_ = s.beta_.front();
    s.beta_end_ = s.beta_.back();
    s.finish();
    return s;
  }

  int steps() const { return static_cast<int>(beta_.size()); }
  ScheduleKind kind() const { return kind_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_[check(t)]; }
  double alpha(int t) const { return alpha_[check(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[check(t)]; }
  /// beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t), with beta_tilde_1 = beta_1.
  double posterior_var(int t) const { return posterior_var_[check(t)]; }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t check(int t) const {
    if (t < 1 || t > steps())
      throw UsageError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) +
                       "]");
    return static_cast<std::size_t>(t - 1);
  }

  void finish() {
    const auto n = beta_.size();
    alpha_.resize(n);
    alpha_bar_.resize(n);
    posterior_var_.resize(n);
    double prod = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw UsageError("beta values must lie in (0, 1)");
      alpha_[i] = 1.0 - beta_[i];
      prod *= alpha_[i];
      alpha_bar_[i] = prod;
      posterior_var_[i] = i == 0 ? beta_[0]
                                 : beta_[i] * (1.0 - alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]);
    }
  }

  ScheduleKind kind_ = ScheduleKind::Linear;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_, alpha_, alpha_bar_, posterior_var_;
};

/// Network output: noise estimate plus optional variance-interpolation logits.
template <typename T>
struct NoisePrediction {
  Grid<T> epsilon_hat;
  std::optional<Grid<T>> var_logits;
};

/// Closed-form forward marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename T>
Grid<T> q_sample(const Grid<T>& x0, int t, const Grid<T>& eps, const DiffusionSchedule& sched) {
  if (!(eps.shape() == x0.shape())) throw DataError("q_sample: noise shape mismatch");
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Grid<T> out(x0.shape(), T{}, x0.resolution());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Reverse-process mean from a noise estimate:
/// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
template <typename T>
Grid<T> posterior_mean(const Grid<T>& x_t, const Grid<T>& eps_hat, int t,
                       const DiffusionSchedule& sched) {
  if (!(eps_hat.shape() == x_t.shape())) throw DataError("posterior_mean: shape mismatch");
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(sched.alpha(t));
  Grid<T> out(x_t.shape(), T{}, x_t.resolution());
  for (std::size_t i = 0; i < x_t.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(x_t[i]) - coef * eps_hat[i]) * inv);
  return out;
}

/// Log of the reverse variance. Without logits this is log beta_tilde_t; with
/// logits v' the interpolation weight is v = (v' + 1) / 2.
inline double reverse_log_var(const DiffusionSchedule& sched, int t,
                              std::optional<double> logit = std::nullopt) {
  const double lo = std::log(sched.posterior_var(t));
  if (!logit) return lo;
  const double v = 0.5 * (*logit + 1.0);
  return v * std::log(sched.beta(t)) + (1.0 - v) * lo;
}

/// Anything callable as model(x_t, t, c) -> NoisePrediction<T>.
template <typename M, typename T>
concept Denoiser = requires(M& m, const Grid<T>& x, int t, const ConditionVolume& c) {
  { m(x, t, c) } -> std::same_as<NoisePrediction<T>>;
};

/// Posterior mean computed through x0_hat = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab)
/// clamped to [-1, 1]. Equals posterior_mean whenever no clamping occurs.
template <typename T>
Grid<T> posterior_mean_clipped(const Grid<T>& x_t, const Grid<T>& eps_hat, int t, const DiffusionSchedule& sched) {
  if (!(eps_hat.shape() == x_t.shape())) throw DataError("posterior_mean_clipped: shape mismatch");
  const double ab = sched.alpha_bar(t);
  const double ab_prev = t > 1 ? sched.alpha_bar(t - 1) : 1.0;
  const double c0 = std::sqrt(ab_prev) * sched.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  Grid<T> out(x_t.shape(), T{}, x_t.resolution());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp((x_t[i] - sn * eps_hat[i]) / sa, -1.0, 1.0);
    out[i] = static_cast<T>(c0 * x0 + ct * x_t[i]);
  }
  return out;
}

/// One ancestral step x_t -> x_{t-1}. No noise is added at t = 1.
/// With clip_x0 the mean goes through posterior_mean_clipped.
template <typename T, typename Model>
  requires Denoiser<Model, T>
Grid<T> p_sample_step(const Grid<T>& x_t, const ConditionVolume& c, int t, Model& model,
                      const DiffusionSchedule& sched, Rng& rng, bool clip_x0 = false) {
  if (!(c.shape() == x_t.shape())) throw DataError("p_sample_step: condition shape mismatch");
  auto pred = model(x_t, t, c);
  if (!(pred.epsilon_hat.shape() == x_t.shape()))
    throw DataError("p_sample_step: model output shape mismatch");
  auto mean = clip_x0 ? posterior_mean_clipped(x_t, pred.epsilon_hat, t, sched)
                      : posterior_mean(x_t, pred.epsilon_hat, t, sched);
  if (t == 1) return mean;
  const double fixed_sd = std::exp(0.5 * reverse_log_var(sched, t));
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double sd = pred.var_logits
                          ? std::exp(0.5 * reverse_log_var(sched, t, (*pred.var_logits)[i]))
                          : fixed_sd;
    mean[i] = static_cast<T>(mean[i] + sd * rng.normal());
  }
  return mean;
}

template <typename T>
Grid<T> gaussian_grid(Shape3 shape, Rng& rng, Resolution res = {}) {
  Grid<T> g(shape, T{}, res);
  for (auto& v : g.vec()) v = static_cast<T>(rng.normal());
  return g;
}

/// Full ancestral sampling from x_T ~ N(0, I) down to x_0.
template <typename T, typename Model>
  requires Denoiser<Model, T>
Grid<T> sample(const ConditionVolume& c, Model& model, const DiffusionSchedule& sched, Rng& rng,
               Resolution res = {}, bool clip_x0 = false) {
  auto x = gaussian_grid<T>(c.shape(), rng, res);
  for (int t = sched.steps(); t >= 1; --t) x = p_sample_step(x, c, t, model, sched, rng, clip_x0);
  return x;
}

/// A denoiser that can also back-propagate into its own parameters.
template <typename M, typename T>
concept TrainableDenoiser =
    Denoiser<M, T> && requires(M& m, const Grid<T>& g, const Grid<T>* gv) {
      { m.backward(g, gv) };
    };

struct LossBreakdown {
  double loss = 0.0;  // total objective
  double mse = 0.0;   // epsilon regression term
  double vlb = 0.0;   // variance term, zero unless logits are present
  int t = 0;
};

/// Noise-regression objective at a fixed (t, eps); optionally back-propagates.
/// When the model emits variance logits, lambda_vlb weights a KL term that
/// trains only the logits (the mean is treated as a constant there).
template <typename T, typename Model>
  requires TrainableDenoiser<Model, T>
LossBreakdown training_loss_at(Model& model, const Grid<T>& x0, const ConditionVolume& c, int t,
                               const Grid<T>& eps, const DiffusionSchedule& sched,
                               bool backprop = true, double lambda_vlb = 1e-3) {
  const auto x_t = q_sample(x0, t, eps, sched);
  auto pred = model(x_t, t, c);
  const auto n = static_cast<double>(x0.size());
  LossBreakdown out;
  out.t = t;
  Grid<T> d_eps(x0.shape(), T{});
  double sum = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double r = static_cast<double>(pred.epsilon_hat[i]) - eps[i];
    sum += r * r;
    d_eps[i] = static_cast<T>(2.0 * r / n);
  }
  out.mse = sum / n;

  std::optional<Grid<T>> d_var;
  if (pred.var_logits && lambda_vlb > 0.0) {
    d_var.emplace(x0.shape(), T{});
    const auto mu = posterior_mean(x_t, pred.epsilon_hat, t, sched);
    const double ab = sched.alpha_bar(t);
    const double ab_prev = t > 1 ? sched.alpha_bar(t - 1) : 1.0;
    const double c0 = std::sqrt(ab_prev) * sched.beta(t) / (1.0 - ab);
    const double ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    const double log_true = std::log(sched.posterior_var(t));
    const double dlog_dlogit = 0.5 * (std::log(sched.beta(t)) - log_true);
    double kl = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
      const double mu_true = c0 * x0[i] + ct * x_t[i];
      const double lv = reverse_log_var(sched, t, (*pred.var_logits)[i]);
      const double diff = mu_true - mu[i];
      const double inv = std::exp(-lv);
      kl += 0.5 * (-1.0 + lv - log_true + std::exp(log_true) * inv + diff * diff * inv);
      const double dlv = 0.5 * (1.0 - std::exp(log_true) * inv - diff * diff * inv);
      (*d_var)[i] = static_cast<T>(lambda_vlb * dlv * dlog_dlogit / n);
    }
    out.vlb = kl / n;
  }
  out.loss = out.mse + lambda_vlb * out.vlb;
  if (!std::isfinite(out.loss))
    throw NumericalError("non-finite training loss at t=" + std::to_string(t));
  if (backprop) model.backward(d_eps, d_var ? &*d_var : nullptr);
  return out;
}

/// Draws t ~ U{1..T} and eps ~ N(0, I), then evaluates training_loss_at.
template <typename T, typename Model>
  requires TrainableDenoiser<Model, T>
LossBreakdown training_loss(Model& model, const Grid<T>& x0, const ConditionVolume& c, Rng& rng,
                            const DiffusionSchedule& sched, bool backprop = true,
                            double lambda_vlb = 1e-3) {
  const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
  const auto eps = gaussian_grid<T>(x0.shape(), rng);
  return training_loss_at(model, x0, c, t, eps, sched, backprop, lambda_vlb);
}

/// Maps intensities from [lo, hi] to [-1, 1].
inline Volume normalize_intensity(const Volume& v, double lo, double hi) {
  Volume out(v.shape(), 0.f, v.resolution());
  const double scale = 2.0 / (hi - lo);
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>((v[i] - lo) * scale - 1.0);
  return out;
}

/// Inverse of normalize_intensity, clamping to [lo, hi].
template <typename T>
Volume denormalize_intensity(const Grid<T>& v, double lo, double hi) {
  Volume out(v.shape(), 0.f, v.resolution());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = std::clamp(static_cast<double>(v[i]), -1.0, 1.0);
    out[i] = static_cast<float>((x + 1.0) * 0.5 * (hi - lo) + lo);
  }
  return out;
}

}  // namespace neuroforge
