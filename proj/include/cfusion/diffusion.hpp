#pragma once

// Denoising-diffusion machinery: linear beta schedule, forward noising and
// the ancestral reverse step with sigma_t^2 = beta_t.

#include "cfusion/autodiff.hpp"
#include "cfusion/errors.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace cfusion {

inline constexpr int kDiffusionSteps = 100;
// The common 1000-step range (1e-4, 0.02) rescaled by 1000 / T so that the
// chain ends near N(0, I) at T = 100 (alpha_bar_99 ~ 2e-5 instead of ~0.36).
inline constexpr double kBetaStart = 1e-3;
inline constexpr double kBetaEnd = 0.2;

struct DiffusionSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  void check_step(int t) const {
    if (t < 0 || t >= steps) {
      throw ValidationError("diffusion timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(steps) + ")");
    }
  }
};

inline DiffusionSchedule make_schedule(int steps = kDiffusionSteps, double beta_start = kBetaStart,
                                       double beta_end = kBetaEnd) {
  if (steps < 1) throw ValidationError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

/// sqrt(alpha_bar) * x + sqrt(1 - alpha_bar) * eps.
template <typename T>
ad::Matrix<T> q_sample(const ad::Matrix<T>& clean, double alpha_bar, const ad::Matrix<T>& eps) {
  if (clean.rows() != eps.rows() || clean.cols() != eps.cols()) {
    throw ValidationError("q_sample: noise shape differs from trajectory shape");
  }
  return static_cast<T>(std::sqrt(alpha_bar)) * clean + static_cast<T>(std::sqrt(1.0 - alpha_bar)) * eps;
}

template <typename T>
ad::Matrix<T> q_sample(const ad::Matrix<T>& clean, int t, const ad::Matrix<T>& eps,
                       const DiffusionSchedule& sched) {
  sched.check_step(t);
  return q_sample(clean, sched.alpha_bar[t], eps);
}

/// Batched forward noising: sample n owns columns [n * length, (n+1) * length)
/// and is noised at steps[n].
template <typename T>
ad::Matrix<T> q_sample_batch(const ad::Matrix<T>& clean, std::span<const int> steps,
                             const ad::Matrix<T>& eps, Eigen::Index length,
                             const DiffusionSchedule& sched) {
  if (clean.rows() != eps.rows() || clean.cols() != eps.cols() ||
      clean.cols() != static_cast<Eigen::Index>(steps.size()) * length) {
    throw ValidationError("q_sample_batch: shape mismatch");
  }
  ad::Matrix<T> out(clean.rows(), clean.cols());
  for (std::size_t n = 0; n < steps.size(); ++n) {
    sched.check_step(steps[n]);
    const auto cols = static_cast<Eigen::Index>(n) * length;
    const double ab = sched.alpha_bar[steps[n]];
    out.middleCols(cols, length) = static_cast<T>(std::sqrt(ab)) * clean.middleCols(cols, length) +
                                   static_cast<T>(std::sqrt(1.0 - ab)) * eps.middleCols(cols, length);
  }
  return out;
}

/// Posterior mean from the predicted noise, plus sigma_t * z for t > 0.
template <typename T>
ad::Matrix<T> reverse_step(const ad::Matrix<T>& noisy, const ad::Matrix<T>& eps_hat, int t,
                           const DiffusionSchedule& sched, const ad::Matrix<T>& z) {
  sched.check_step(t);
  if (noisy.rows() != eps_hat.rows() || noisy.cols() != eps_hat.cols()) {
    throw ValidationError("reverse_step: prediction shape differs from trajectory shape");
  }
  const double beta = sched.beta[t];
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar[t]);
  ad::Matrix<T> mean =
      (noisy - static_cast<T>(coef) * eps_hat) * static_cast<T>(1.0 / std::sqrt(sched.alpha[t]));
  if (t == 0) return mean;
  if (z.rows() != noisy.rows() || z.cols() != noisy.cols()) {
    throw ValidationError("reverse_step: noise shape differs from trajectory shape");
  }
  return mean + static_cast<T>(std::sqrt(beta)) * z;
}

/// Reverse step through the clean-sample estimate
/// x0 = (x_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar), clamped to
/// [-bound, bound] before forming the posterior mean. Without clamping this
/// equals reverse_step; with it the chain stays bounded when the noise
/// estimate extrapolates on unfamiliar observations.
template <typename T>
ad::Matrix<T> reverse_step_clipped(const ad::Matrix<T>& noisy, const ad::Matrix<T>& eps_hat, int t,
                                   const DiffusionSchedule& sched, const ad::Matrix<T>& z, double bound) {
  sched.check_step(t);
  if (noisy.rows() != eps_hat.rows() || noisy.cols() != eps_hat.cols()) {
    throw ValidationError("reverse_step: prediction shape differs from trajectory shape");
  }
  if (!(bound > 0.0)) throw ValidationError("reverse_step: clip bound must be positive");
  const double ab = sched.alpha_bar[t];
  const double ab_prev = t > 0 ? sched.alpha_bar[t - 1] : 1.0;
  const double beta = sched.beta[t];
  const auto b = static_cast<T>(bound);
  const ad::Matrix<T> x0 =
      ((noisy - static_cast<T>(std::sqrt(1.0 - ab)) * eps_hat) * static_cast<T>(1.0 / std::sqrt(ab)))
          .cwiseMax(-b)
          .cwiseMin(b);
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double ct = std::sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
  ad::Matrix<T> mean = static_cast<T>(c0) * x0 + static_cast<T>(ct) * noisy;
  if (t == 0) return mean;
  if (z.rows() != noisy.rows() || z.cols() != noisy.cols()) {
    throw ValidationError("reverse_step: noise shape differs from trajectory shape");
  }
  return mean + static_cast<T>(std::sqrt(beta)) * z;
}

/// Runs the full reverse chain from x (initial Gaussian draw).
/// predict(x, t) returns the noise estimate; noise(t) the Gaussian draw used
/// at step t (> 0).
template <typename T, typename Predict, typename Noise>
ad::Matrix<T> sample_chain(const DiffusionSchedule& sched, ad::Matrix<T> x, Predict&& predict, Noise&& noise) {
  for (int t = sched.steps - 1; t >= 0; --t) {
    ad::Matrix<T> eps_hat = predict(x, t);
    ad::Matrix<T> z = t > 0 ? noise(t) : ad::Matrix<T>();
    x = reverse_step(x, eps_hat, t, sched, z);
  }
  return x;
}

}  // namespace cfusion
