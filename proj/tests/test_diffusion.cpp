#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "neuroforge/diffusion.hpp"

namespace nf = neuroforge;

namespace {

nf::Grid<double> scalar_grid(double v) { return nf::Grid<double>({1, 1, 1}, v); }

nf::ConditionVolume empty_condition(nf::Shape3 s) {
  return nf::ConditionVolume(nf::BinaryGrid(s, 0), nf::BinaryGrid(s, 0));
}

// Knows x0 and returns the exact noise that explains x_t.
struct PlantedNoiseOracle {
  const nf::Grid<double>* x0;
  const nf::DiffusionSchedule* sched;
  nf::NoisePrediction<double> operator()(const nf::Grid<double>& x, int t, const nf::ConditionVolume&) {
    nf::NoisePrediction<double> p{nf::Grid<double>(x.shape(), 0.0), std::nullopt};
    const double ab = sched->alpha_bar(t);
    for (std::size_t i = 0; i < x.size(); ++i)
      p.epsilon_hat[i] = (x[i] - std::sqrt(ab) * (*x0)[i]) / std::sqrt(1.0 - ab);
    return p;
  }
};

// Emits a fixed prediction; backward is a no-op.
struct ConstantModel {
  nf::Grid<double> out;
  nf::NoisePrediction<double> operator()(const nf::Grid<double>&, int, const nf::ConditionVolume&) {
    return {out, std::nullopt};
  }
  void backward(const nf::Grid<double>&, const nf::Grid<double>*) {}
};

}  // namespace

TEST(Schedule, TwoStepProducts) {
  const auto s = nf::DiffusionSchedule::make(2, nf::ScheduleKind::Linear, 0.1, 0.1);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.81, 1e-15);
}

TEST(Schedule, FirstPosteriorVarianceIsBeta) {
  const auto s = nf::DiffusionSchedule::make(1, nf::ScheduleKind::Linear, 0.5, 0.5);
  EXPECT_EQ(s.posterior_var(1), 0.5);
}

TEST(Schedule, ThousandStepProductMatchesSequentialOracle) {
  const auto s = nf::DiffusionSchedule::make(1000, nf::ScheduleKind::Linear, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int i = 0; i < 1000; ++i) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * i / 999.0L);
  EXPECT_NEAR(s.alpha_bar(1000) / static_cast<double>(prod), 1.0, 1e-10);
}

TEST(Schedule, InvariantsHoldForBothKinds) {
  for (auto kind : {nf::ScheduleKind::Linear, nf::ScheduleKind::Cosine}) {
    const auto s = nf::DiffusionSchedule::make(200, kind, 1e-4, 0.02);
    for (int t = 1; t <= s.steps(); ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_GE(s.posterior_var(t), 0.0);
      if (t > 1) {
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      }
    }
    EXPECT_GT(s.alpha_bar(s.steps()), 0.0);
    EXPECT_LT(s.alpha_bar(1), 1.0);
  }
}

TEST(Schedule, RejectsInvalidBetas) {
  EXPECT_THROW(nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.0, 0.1), nf::UsageError);
  EXPECT_THROW(nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.2, 0.1), nf::UsageError);
  EXPECT_THROW(nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.1, 1.0), nf::UsageError);
  EXPECT_THROW(nf::DiffusionSchedule::make(0, nf::ScheduleKind::Linear, 0.1, 0.2), nf::UsageError);
}

TEST(QSample, WorkedValue) {
  const auto s = nf::DiffusionSchedule::make(2, nf::ScheduleKind::Linear, 0.1, 0.1);
  const auto x = nf::q_sample(scalar_grid(1.0), 2, scalar_grid(1.0), s);
  EXPECT_NEAR(x[0], 0.9 + std::sqrt(0.19), 1e-12);
  EXPECT_NEAR(x[0], 1.33589, 1e-5);
}

TEST(QSample, LimitsAndZeroSignal) {
  const auto tiny = nf::DiffusionSchedule::make(1, nf::ScheduleKind::Linear, 1e-14, 1e-14);
  EXPECT_NEAR(nf::q_sample(scalar_grid(0.7), 1, scalar_grid(2.0), tiny)[0], 0.7, 1e-6);
  const auto s = nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.01, 0.2);
  EXPECT_NEAR(nf::q_sample(scalar_grid(0.0), 7, scalar_grid(1.5), s)[0],
              std::sqrt(1 - s.alpha_bar(7)) * 1.5, 1e-15);
  EXPECT_THROW(nf::q_sample(scalar_grid(0.0), 11, scalar_grid(1.0), s), nf::UsageError);
  EXPECT_THROW(nf::q_sample(scalar_grid(0.0), 0, scalar_grid(1.0), s), nf::UsageError);
}

TEST(QSample, MarginalVarianceMatchesSchedule) {
  const auto s = nf::DiffusionSchedule::make(50, nf::ScheduleKind::Linear, 1e-3, 0.05);
  nf::Rng rng(99);
  const nf::Grid<double> x0({1, 100, 100}, 0.0);
  for (int t : {1, 10, 50}) {
    const auto eps = nf::gaussian_grid<double>(x0.shape(), rng);
    const auto x = nf::q_sample(x0, t, eps, s);
    double m = 0, v = 0;
    for (auto e : x.data()) m += e;
    m /= x.size();
    for (auto e : x.data()) v += (e - m) * (e - m);
    v /= (x.size() - 1);
    EXPECT_NEAR(v / (1 - s.alpha_bar(t)), 1.0, 0.05) << "t=" << t;
  }
}

TEST(PosteriorMean, WorkedValueAndLimits) {
  const auto s = nf::DiffusionSchedule::make(2, nf::ScheduleKind::Linear, 0.1, 0.1);
  const double mu = nf::posterior_mean(scalar_grid(1.0), scalar_grid(1.0), 2, s)[0];
  EXPECT_NEAR(mu, (1 - 0.1 / std::sqrt(0.19)) / std::sqrt(0.9), 1e-12);
  EXPECT_NEAR(mu, 0.81227, 1e-5);
  EXPECT_NEAR(nf::posterior_mean(scalar_grid(2.0), scalar_grid(0.0), 1, s)[0], 2.0 / std::sqrt(0.9), 1e-12);
  const auto tiny = nf::DiffusionSchedule::make(3, nf::ScheduleKind::Linear, 1e-14, 1e-14);
  EXPECT_NEAR(nf::posterior_mean(scalar_grid(0.3), scalar_grid(0.0), 3, tiny)[0], 0.3, 1e-9);
}

TEST(PosteriorMean, ClippedMatchesUnclippedInsideRange) {
  const auto s = nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 1e-3, 0.2);
  nf::Rng rng(5);
  for (int t = 1; t <= 10; ++t) {
    // x0 in [-0.9, 0.9] with arbitrary eps keeps x0_hat inside the clamp range.
    const double x0 = rng.uniform(-0.9, 0.9), eps = rng.normal();
    const double ab = s.alpha_bar(t);
    const auto x = scalar_grid(std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps);
    EXPECT_NEAR(nf::posterior_mean_clipped(x, scalar_grid(eps), t, s)[0],
                nf::posterior_mean(x, scalar_grid(eps), t, s)[0], 1e-12);
  }
}

TEST(PosteriorMean, ClippedFinalStepReturnsClampedEstimate) {
  const auto s = nf::DiffusionSchedule::make(2, nf::ScheduleKind::Linear, 0.1, 0.1);
  EXPECT_NEAR(nf::posterior_mean_clipped(scalar_grid(5.0), scalar_grid(0.0), 1, s)[0], 1.0, 1e-12);
  EXPECT_NEAR(nf::posterior_mean_clipped(scalar_grid(-5.0), scalar_grid(0.0), 1, s)[0], -1.0, 1e-12);
  // t = 2: mean = c0 * clamp(x0_hat) + ct * x_t.
  const double ab = 0.81, c0 = std::sqrt(0.9) * 0.1 / 0.19, ct = std::sqrt(0.9) * 0.1 / 0.19;
  const double x = 3.0, x0 = std::clamp(x / std::sqrt(ab), -1.0, 1.0);
  EXPECT_NEAR(nf::posterior_mean_clipped(scalar_grid(x), scalar_grid(0.0), 2, s)[0], c0 * x0 + ct * x, 1e-12);
}

TEST(PSample, FinalStepAddsNoNoise) {
  const auto s = nf::DiffusionSchedule::make(5, nf::ScheduleKind::Linear, 0.01, 0.1);
  ConstantModel m{nf::Grid<double>({1, 2, 2}, 0.25)};
  nf::Grid<double> x({1, 2, 2}, 0.5);
  nf::Rng rng(1);
  const auto c = empty_condition(x.shape());
  const auto out = nf::p_sample_step(x, c, 1, m, s, rng);
  EXPECT_EQ(out, nf::posterior_mean(x, m.out, 1, s));
}

TEST(PSample, DeterministicForSeed) {
  const auto s = nf::DiffusionSchedule::make(5, nf::ScheduleKind::Linear, 0.01, 0.1);
  ConstantModel m{nf::Grid<double>({2, 2, 2}, 0.1)};
  nf::Grid<double> x({2, 2, 2}, 0.5);
  const auto c = empty_condition(x.shape());
  nf::Rng a(42), b(42);
  EXPECT_EQ(nf::p_sample_step(x, c, 4, m, s, a), nf::p_sample_step(x, c, 4, m, s, b));
}

TEST(PSample, LearnedVarianceInterpolatesLogVariance) {
  const auto s = nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.01, 0.2);
  EXPECT_NEAR(nf::reverse_log_var(s, 5, 1.0), std::log(s.beta(5)), 1e-15);
  EXPECT_NEAR(nf::reverse_log_var(s, 5, -1.0), std::log(s.posterior_var(5)), 1e-15);
  EXPECT_NEAR(nf::reverse_log_var(s, 5), std::log(s.posterior_var(5)), 1e-15);
}

TEST(PSample, PlantedNoiseRoundTripRecoversSignal) {
  const auto s = nf::DiffusionSchedule::make(50, nf::ScheduleKind::Linear, 1e-4, 0.2);
  nf::Rng rng(5);
  nf::Grid<double> x0({4, 8, 8}, 0.0);
  for (auto& v : x0.vec()) v = rng.uniform(-1, 1);
  PlantedNoiseOracle oracle{&x0, &s};
  const auto c = empty_condition(x0.shape());
  const auto out = nf::sample<double>(c, oracle, s, rng);
  double se = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) se += (out[i] - x0[i]) * (out[i] - x0[i]);
  EXPECT_LT(std::sqrt(se / x0.size()), 0.05);
}

TEST(TrainingLoss, ExactPredictionGivesZero) {
  const auto s = nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.01, 0.2);
  nf::Rng rng(3);
  const auto eps = nf::gaussian_grid<double>({2, 4, 4}, rng);
  ConstantModel m{eps};
  const nf::Grid<double> x0({2, 4, 4}, 0.3);
  const auto c = empty_condition(x0.shape());
  const auto r = nf::training_loss_at(m, x0, c, 4, eps, s);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(TrainingLoss, ZeroModelLossIsUnitInExpectation) {
  const auto s = nf::DiffusionSchedule::make(10, nf::ScheduleKind::Linear, 0.01, 0.2);
  ConstantModel m{nf::Grid<double>({1, 1, 1}, 0.0)};
  const nf::Grid<double> x0({1, 1, 1}, 0.3);
  const auto c = empty_condition(x0.shape());
  nf::Rng rng(17);
  double sum = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto r = nf::training_loss(m, x0, c, rng, s);
    EXPECT_GE(r.loss, 0.0);
    sum += r.loss;
  }
  EXPECT_NEAR(sum / n, 1.0, 0.05);
}

// Fixed eps and variance logits; records the upstream gradients.
struct RecordingModel {
  nf::Grid<double> eps, logits;
  nf::Grid<double> d_eps, d_var;
  nf::NoisePrediction<double> operator()(const nf::Grid<double>&, int, const nf::ConditionVolume&) {
    return {eps, logits};
  }
  void backward(const nf::Grid<double>& de, const nf::Grid<double>* dv) {
    d_eps = de;
    if (dv) d_var = *dv;
  }
};

TEST(TrainingLoss, HybridGradientsMatchFiniteDifferences) {
  const auto s = nf::DiffusionSchedule::make(20, nf::ScheduleKind::Linear, 1e-3, 0.1);
  nf::Rng rng(23);
  const nf::Shape3 shape{1, 2, 3};
  nf::Grid<double> x0(shape, 0.0), noise(shape, 0.0);
  for (auto& v : x0.vec()) v = rng.uniform(-1, 1);
  for (auto& v : noise.vec()) v = rng.normal();
  RecordingModel m{nf::Grid<double>(shape, 0.0), nf::Grid<double>(shape, 0.0), {}, {}};
  for (auto& v : m.eps.vec()) v = rng.normal();
  for (auto& v : m.logits.vec()) v = rng.uniform(-1, 1);
  const auto c = empty_condition(shape);
  const double lambda = 0.3;
  nf::training_loss_at(m, x0, c, 7, noise, s, true, lambda);
  const auto d_eps = m.d_eps;
  const auto d_var = m.d_var;
  auto total = [&] { return nf::training_loss_at(m, x0, c, 7, noise, s, false, lambda).loss; };
  auto mse = [&] { return nf::training_loss_at(m, x0, c, 7, noise, s, false, lambda).mse; };
  const double h = 1e-6;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const double lo = m.logits[i];
    m.logits[i] = lo + h;
    const double lp = total();
    m.logits[i] = lo - h;
    const double lm = total();
    m.logits[i] = lo;
    EXPECT_NEAR(d_var[i], (lp - lm) / (2 * h), 1e-8);
    // The variance term sees the mean through a stop-gradient, so only the
    // MSE part reaches eps.
    const double eo = m.eps[i];
    m.eps[i] = eo + h;
    const double ep = mse();
    m.eps[i] = eo - h;
    const double em = mse();
    m.eps[i] = eo;
    EXPECT_NEAR(d_eps[i], (ep - em) / (2 * h), 1e-8);
  }
}

TEST(TrainingLoss, VarianceTermVanishesAtTruePosterior) {
  const auto s = nf::DiffusionSchedule::make(20, nf::ScheduleKind::Linear, 1e-3, 0.1);
  const nf::Grid<double> x0({1, 1, 2}, std::vector<double>{0.4, -0.2});
  const nf::Grid<double> noise({1, 1, 2}, std::vector<double>{0.7, 1.1});
  // Exact noise gives the true posterior mean; logit -1 selects the
  // posterior variance.
  RecordingModel m{noise, nf::Grid<double>({1, 1, 2}, -1.0), {}, {}};
  const auto r = nf::training_loss_at(m, x0, empty_condition(x0.shape()), 5, noise, s, false);
  EXPECT_NEAR(r.vlb, 0.0, 1e-12);
}

TEST(Normalization, RoundTrip) {
  nf::Volume v({1, 1, 3}, std::vector<float>{0.f, 0.5f, 1.f});
  const auto n = nf::normalize_intensity(v, 0, 1);
  EXPECT_FLOAT_EQ(n[0], -1.f);
  EXPECT_FLOAT_EQ(n[2], 1.f);
  EXPECT_EQ(nf::denormalize_intensity(n, 0, 1), v);
}
