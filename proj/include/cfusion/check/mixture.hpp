#pragma once

// Unconditional 1-D diffusion sampler trained on a two-component Gaussian
// mixture. The fraction of samples landing on each side of the midpoint is
// compared with the analytic mixture weights.

#include "cfusion/diffusion.hpp"
#include "cfusion/models.hpp"
#include "cfusion/optim.hpp"

#include <vector>

namespace cfusion::check {

struct MixtureSpec {
  double weight0 = 0.3;  // probability of the left component
  double mean0 = -1.5;
  double mean1 = 1.5;
  double stddev = 0.3;
};

struct MixtureOptions {
  int train_steps = 3000;
  int batch = 256;
  int samples = 5000;
  double lr = 2e-3;
  std::uint64_t seed = 7;
};

struct MixtureResult {
  double weight0_hat = 0.0;
  double first_loss = 0.0;  // mean over the first 100 steps
  double last_loss = 0.0;   // mean over the last 100 steps
  double sample_mean0 = 0.0;
  double sample_mean1 = 0.0;
};

inline constexpr int kToyEmbed = 32;

inline Mlp toy_denoiser() { return Mlp("toy", {1 + kToyEmbed, 64, 64, 1}); }

template <typename T>
Var<T> toy_predict(const Mlp& net, ParamBinding<T>& p, const Matrix<T>& x, std::span<const int> steps) {
  auto& tape = p.tape();
  auto in = ad::concat_rows<T>({tape.constant(x), tape.constant(timestep_embedding<T>(steps, kToyEmbed))});
  return net(p, in);
}

inline MixtureResult run_mixture_oracle(const MixtureSpec& spec = {}, const MixtureOptions& opt = {}) {
  const auto sched = make_schedule();
  const Mlp net = toy_denoiser();
  ParameterSet<float> params;
  auto init_rng = make_rng(opt.seed, StreamDomain::kParamInit);
  net.init(params, init_rng);
  AdamWConfig ac;
  ac.lr = opt.lr;
  ac.weight_decay = 0.0;
  AdamW<float> adam(ac);

  auto rng = make_rng(opt.seed, StreamDomain::kDiffusionNoise);
  std::uniform_int_distribution<int> pick_t(0, sched.steps - 1);
  std::bernoulli_distribution pick0(spec.weight0);
  MixtureResult r;
  std::vector<int> steps(opt.batch);
  Matrix<float> clean(1, opt.batch), eps(1, opt.batch);
  for (int it = 0; it < opt.train_steps; ++it) {
    for (int n = 0; n < opt.batch; ++n) {
      const double mu = pick0(rng) ? spec.mean0 : spec.mean1;
      clean(0, n) = static_cast<float>(mu + spec.stddev * gaussian(rng));
      eps(0, n) = static_cast<float>(gaussian(rng));
      steps[n] = pick_t(rng);
    }
    auto noisy = q_sample_batch<float>(clean, steps, eps, 1, sched);
    ad::Tape<float> tape;
    ParamBinding<float> p(tape, params, true);
    auto loss = ad::mse(toy_predict(net, p, noisy, steps), tape.constant(eps));
    tape.backward(loss);
    adam.step(params, p.gradients());
    const double l = loss.value()(0, 0);
    if (it < 100) r.first_loss += l / 100.0;
    if (it >= opt.train_steps - 100) r.last_loss += l / 100.0;
  }

  auto srng = make_rng(opt.seed, StreamDomain::kSampling);
  Matrix<float> x(1, opt.samples);
  for (int n = 0; n < opt.samples; ++n) x(0, n) = static_cast<float>(gaussian(srng));
  std::vector<int> t_batch(opt.samples);
  auto out = sample_chain<float>(
      sched, x,
      [&](const Matrix<float>& cur, int t) {
        std::fill(t_batch.begin(), t_batch.end(), t);
        ad::Tape<float> tape;
        ParamBinding<float> p(tape, params, false);
        return Matrix<float>(toy_predict(net, p, cur, t_batch).value());
      },
      [&](int) {
        Matrix<float> z(1, opt.samples);
        for (int n = 0; n < opt.samples; ++n) z(0, n) = static_cast<float>(gaussian(srng));
        return z;
      });
  const double mid = 0.5 * (spec.mean0 + spec.mean1);
  int left = 0;
  double s0 = 0.0, s1 = 0.0;
  for (int n = 0; n < opt.samples; ++n) {
    if (out(0, n) < mid) {
      ++left;
      s0 += out(0, n);
    } else {
      s1 += out(0, n);
    }
  }
  r.weight0_hat = static_cast<double>(left) / opt.samples;
  r.sample_mean0 = left > 0 ? s0 / left : 0.0;
  r.sample_mean1 = left < opt.samples ? s1 / (opt.samples - left) : 0.0;
  return r;
}

}  // namespace cfusion::check
