#include "cfusion/check/mixture.hpp"
#include "cfusion/diffusion.hpp"
#include "cfusion/optim.hpp"
#include "cfusion/rng.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace cfusion;

TEST(Rng, StreamsAreOrderIndependentAndDistinct) {
  EXPECT_EQ(derive_seed(1, StreamDomain::kReset, 5), derive_seed(1, StreamDomain::kReset, 5));
  std::set<std::uint64_t> seen;
  for (auto d : {StreamDomain::kReset, StreamDomain::kLatent, StreamDomain::kSensorNoise}) {
    for (std::uint64_t i = 0; i < 100; ++i) seen.insert(derive_seed(9, d, i));
  }
  EXPECT_EQ(seen.size(), 300u);
  // splitmix64 reference value for state 0 (first output of the generator).
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(Schedule, SingleStep) {
  auto s = make_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.steps, 1);
  EXPECT_EQ(s.alpha_bar[0], 0.5);
}

TEST(Schedule, DefaultIsMonotoneAndEndsNearNoise) {
  auto s = make_schedule();
  EXPECT_EQ(s.steps, 100);
  double running = 1.0;
  for (int t = 0; t < s.steps; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
    EXPECT_EQ(s.alpha[t], 1.0 - s.beta[t]);
    running *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], running, 1e-12);
    if (t > 0) {
      EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
      const double snr = s.alpha_bar[t] / (1.0 - s.alpha_bar[t]);
      const double prev = s.alpha_bar[t - 1] / (1.0 - s.alpha_bar[t - 1]);
      EXPECT_LT(snr, prev);
    }
  }
  EXPECT_LT(s.alpha_bar[99], 0.01);
}

TEST(Schedule, UnscaledRangeOracle) {
  // Independent product of (1 - beta) with beta linear on [1e-4, 0.02].
  auto s = make_schedule(100, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 0; t < 100; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * t / 99.0L);
  EXPECT_NEAR(s.alpha_bar[99], static_cast<double>(prod), 1e-12);
  EXPECT_NEAR(s.alpha_bar[99], 0.36356, 1e-4);
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(make_schedule(0), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.2, 0.1), ValidationError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), ValidationError);
}

TEST(QSample, Examples) {
  Matrix<double> x(1, 1), e(1, 1);
  x << 1.0;
  e << 2.0;
  EXPECT_NEAR(q_sample<double>(x, 0.25, e)(0, 0), 2.2320508, 1e-7);
  EXPECT_EQ(q_sample<double>(x, 1.0, e)(0, 0), 1.0);
  auto s = make_schedule();
  EXPECT_THROW(q_sample<double>(x, 100, e, s), ValidationError);
  EXPECT_THROW(q_sample<double>(x, -1, e, s), ValidationError);
  Matrix<double> bad(2, 1);
  EXPECT_THROW(q_sample<double>(x, 3, bad, s), ValidationError);
}

TEST(QSample, MonteCarloVariance) {
  auto s = make_schedule();
  auto rng = make_rng(3, StreamDomain::kDiffusionNoise);
  const int n = 100000;
  for (int t : {5, 50, 99}) {
    Matrix<double> x = Matrix<double>::Constant(1, n, 0.7);
    Matrix<double> e(1, n);
    for (int i = 0; i < n; ++i) e(0, i) = gaussian(rng);
    auto y = q_sample<double>(x, t, e, s);
    const double mean = y.mean();
    const double var = (y.array() - mean).square().sum() / (n - 1);
    EXPECT_NEAR(var / (1.0 - s.alpha_bar[t]), 1.0, 0.02) << t;
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bar[t]) * 0.7, 0.01) << t;
  }
}

TEST(ReverseStep, SingleStepRoundTrip) {
  auto s = make_schedule(1, 0.5, 0.5);
  auto rng = make_rng(4, StreamDomain::kDiffusionNoise);
  Matrix<double> x(3, 8), e(3, 8);
  for (int i = 0; i < x.size(); ++i) {
    x.data()[i] = gaussian(rng);
    e.data()[i] = gaussian(rng);
  }
  auto noisy = q_sample<double>(x, 0, e, s);
  auto back = reverse_step<double>(noisy, e, 0, s, Matrix<double>());
  EXPECT_LE((back - x).cwiseAbs().maxCoeff(), 1e-5);
  auto xf = x.cast<float>().eval();
  auto ef = e.cast<float>().eval();
  auto backf = reverse_step<float>(q_sample<float>(xf, 0, ef, s), ef, 0, s, Matrix<float>());
  EXPECT_LE((backf.cast<double>() - x).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(ReverseStep, TerminalStepIsDeterministicAndFinite) {
  auto s = make_schedule();
  Matrix<double> x = Matrix<double>::Constant(2, 2, 0.3), e = Matrix<double>::Constant(2, 2, -0.1);
  Matrix<double> z = Matrix<double>::Constant(2, 2, 5.0);
  EXPECT_EQ(reverse_step<double>(x, e, 0, s, z), reverse_step<double>(x, e, 0, s, Matrix<double>()));
  for (int t = 0; t < s.steps; ++t) EXPECT_TRUE(reverse_step<double>(x, e, t, s, z).allFinite());
  // Posterior-mean formula recomputed by hand at t = 10.
  const int t = 10;
  const double mean = (0.3 - s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]) * -0.1) / std::sqrt(s.alpha[t]);
  EXPECT_NEAR(reverse_step<double>(x, e, t, s, z)(0, 0), mean + std::sqrt(s.beta[t]) * 5.0, 1e-12);
}

TEST(ReverseStep, ClippedMatchesUnclippedInsideBound) {
  auto s = make_schedule();
  auto rng = make_rng(9, StreamDomain::kDiffusionNoise);
  for (int t : {0, 1, 10, 50, 99}) {
    Matrix<double> x0(3, 8), e(3, 8), z(3, 8);
    for (int i = 0; i < x0.size(); ++i) {
      x0.data()[i] = uniform(rng, -0.9, 0.9);
      e.data()[i] = gaussian(rng);
      z.data()[i] = gaussian(rng);
    }
    // The true noise gives a clean estimate equal to x0, which is inside the bound.
    const auto noisy = q_sample<double>(x0, t, e, s);
    const auto a = reverse_step<double>(noisy, e, t, s, z);
    const auto b = reverse_step_clipped<double>(noisy, e, t, s, z, 1.0);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-9) << "t=" << t;
  }
}

TEST(ReverseStep, ClippedChainStaysBoundedUnderRunawayNoise) {
  auto s = make_schedule();
  Matrix<float> x = Matrix<float>::Constant(2, 4, 1.0f);
  for (int t = s.steps - 1; t >= 0; --t) {
    // A noise estimate that amplifies the sample, as an extrapolating network can.
    const Matrix<float> e = -5.0f * x;
    x = reverse_step_clipped<float>(x, e, t, s, t > 0 ? Matrix<float>::Zero(2, 4).eval() : Matrix<float>(), 1.0);
    ASSERT_TRUE(x.allFinite()) << "t=" << t;
  }
  EXPECT_LE(x.cwiseAbs().maxCoeff(), 1.0f + 1e-5f);
  EXPECT_THROW(reverse_step_clipped<double>(Matrix<double>::Zero(1, 1), Matrix<double>::Zero(1, 1), 0, s,
                                            Matrix<double>(), 0.0),
               ValidationError);
}

TEST(Optimizer, FirstStepIsSignedLearningRate) {
  ParameterSet<double> p;
  Matrix<double> w(1, 3);
  w << 1.0, -2.0, 0.5;
  p.add("w", w);
  Gradients<double> g;
  Matrix<double> gw(1, 3);
  gw << 0.3, -4.0, 1e-3;
  g.emplace("w", gw);
  AdamWConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.1;
  AdamW<double> opt(c);
  opt.step(p, g);
  for (int i = 0; i < 3; ++i) {
    const double expect = w(0, i) * (1.0 - c.lr * c.weight_decay) - c.lr * gw(0, i) / (std::abs(gw(0, i)) + c.eps);
    EXPECT_NEAR(p.at("w")(0, i), expect, 1e-12);
  }
}

TEST(Optimizer, ConvergesOnQuadratic) {
  ParameterSet<double> p;
  p.add("x", Matrix<double>::Constant(2, 1, 5.0));
  AdamWConfig c;
  c.lr = 0.05;
  c.weight_decay = 0.0;
  AdamW<double> opt(c);
  Matrix<double> target(2, 1);
  target << 1.0, -3.0;
  for (int i = 0; i < 2000; ++i) {
    Gradients<double> g;
    g.emplace("x", 2.0 * (p.at("x") - target));
    opt.step(p, g);
  }
  EXPECT_LE((p.at("x") - target).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Optimizer, RejectsNonFiniteWithoutMutation) {
  ParameterSet<double> p;
  p.add("x", Matrix<double>::Constant(2, 1, 5.0));
  AdamW<double> opt;
  Gradients<double> g;
  Matrix<double> bad(2, 1);
  bad << 1.0, std::nan("");
  g.emplace("x", bad);
  EXPECT_THROW(opt.step(p, g), NumericalError);
  EXPECT_EQ(p.at("x")(0, 0), 5.0);
  EXPECT_EQ(opt.step_count(), 0);
  EXPECT_TRUE(opt.first_moments().empty());
}

TEST(Mixture, SamplerRecoversWeights) {
  check::MixtureSpec spec;
  auto r = check::run_mixture_oracle(spec);
  EXPECT_LT(r.last_loss, r.first_loss);
  EXPECT_LE(std::abs(r.weight0_hat - spec.weight0), 0.05) << r.weight0_hat;
  EXPECT_NEAR(r.sample_mean0, spec.mean0, 0.2);
  EXPECT_NEAR(r.sample_mean1, spec.mean1, 0.2);
}
