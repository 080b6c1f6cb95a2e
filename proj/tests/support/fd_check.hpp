#pragma once

// Test-only oracles: central finite differences over named parameters.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "neuroforge/diffusion.hpp"
#include "neuroforge/nn/unet.hpp"

namespace neuroforge::testing {

struct FdResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with an absolute floor so that gradients that are zero up
/// to round-off do not divide by zero.
inline double relative_error(double a, double n, double floor = 1e-8) {
  const double scale = std::max({std::abs(a), std::abs(n), floor});
  return std::abs(a - n) / scale;
}

/// Checks `per_param` entries of every named parameter (always including the
/// largest-magnitude analytic gradient) against central differences of
/// `loss`, which must evaluate the objective at the current parameter values.
/// The store gradients must already hold the analytic gradient.
inline std::vector<FdResult> finite_difference_check(nn::ParameterStore<double>& store,
                                                     const std::function<double()>& loss,
                                                     int per_param, double h, Rng& rng) {
  std::vector<FdResult> out;
  for (auto& p : store) {
    FdResult r;
    r.name = p.name;
    std::vector<std::size_t> idx;
    const auto big = static_cast<std::size_t>(
        std::max_element(p.grad.begin(), p.grad.end(),
                         [](double a, double b) { return std::abs(a) < std::abs(b); }) -
        p.grad.begin());
    idx.push_back(big);
    for (int k = 1; k < per_param && static_cast<std::size_t>(k) < p.count(); ++k)
      idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.count()) - 1)));
    for (auto i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double lp = loss();
      p.value[i] = orig - h;
      const double lm = loss();
      p.value[i] = orig;
      const double numeric = (lp - lm) / (2 * h);
      const double e = relative_error(p.grad[i], numeric);
      if (e >= r.max_rel_error) {
        r.max_rel_error = e;
        r.worst_analytic = p.grad[i];
        r.worst_numeric = numeric;
      }
      ++r.checked;
    }
    out.push_back(r);
  }
  return out;
}

/// Small network whose every parameter, including the zero-initialised
/// injection convolutions, is randomised so that all paths carry gradient.
inline nn::UNet<double> randomized_small_unet(bool learned_variance, std::uint64_t seed) {
  nn::UNetConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 4;
  cfg.cond_embed_channels = 4;
  cfg.rgm_state_dim = 3;
  cfg.learned_variance = learned_variance;
  nn::UNet<double> net(cfg, seed);
  Rng rng(seed ^ 0xabcdef);
  for (auto& p : net.params()) {
    if (p.name.find(".inject.") != std::string::npos)
      for (auto& v : p.value) v = rng.uniform(-0.3, 0.3);
    // Step sizes near 1 so the decay path is not buried in round-off.
    if (p.name.ends_with(".delta_proj.bias") || p.name.ends_with(".a_log"))
      for (auto& v : p.value) v = rng.uniform(-0.5, 0.5);
    if (p.name.find("norm") != std::string::npos)
      for (auto& v : p.value) v += rng.uniform(-0.3, 0.3);
  }
  return net;
}

/// Deterministic condition with both channels populated.
inline ConditionVolume random_condition(Shape3 s, Rng& rng, double p_boundary = 0.3,
                                        double p_mito = 0.15) {
  BinaryGrid b(s, 0), m(s, 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    b[i] = rng.uniform() < p_boundary ? 1 : 0;
    m[i] = rng.uniform() < p_mito ? 1 : 0;
  }
  return ConditionVolume(std::move(b), std::move(m));
}

/// Finite-difference suite on the U-Net at f64. The objective is a fixed
/// random linear probe of both output heads, so the analytic gradient is one
/// backward() call with the probe weights as upstream gradients.
inline std::vector<FdResult> unet_gradient_suite(bool learned_variance, int per_param = 3,
                                                 double h = 1e-4, std::uint64_t seed = 1234) {
  auto net = randomized_small_unet(learned_variance, seed);
  Rng rng(seed + 1);
  const Shape3 s{4, 8, 8};
  const auto c = random_condition(s, rng);
  Grid<double> x(s, 0.0, Resolution(29, 6));
  for (auto& v : x.vec()) v = rng.normal();
  Grid<double> we(s, 0.0), wv(s, 0.0);
  for (auto& v : we.vec()) v = rng.normal();
  for (auto& v : wv.vec()) v = rng.normal();
  const int t = 9;
  auto probe = [&](const NoisePrediction<double>& p) {
    double l = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      l += we[i] * p.epsilon_hat[i];
      if (p.var_logits) l += wv[i] * (*p.var_logits)[i];
    }
    return l;
  };
  net.set_training(true);
  net.params().zero_grad();
  net.forward(x, t, c);
  net.backward(we, learned_variance ? &wv : nullptr);
  net.set_training(false);
  auto loss = [&] { return probe(net.forward(x, t, c)); };
  return finite_difference_check(net.params(), loss, per_param, h, rng);
}

}  // namespace neuroforge::testing
