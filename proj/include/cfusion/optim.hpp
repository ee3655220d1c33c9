#pragma once

#include "cfusion/errors.hpp"
#include "cfusion/params.hpp"

#include <cmath>
#include <string>

namespace cfusion {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moments are keyed by parameter name and
/// persist across steps.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const noexcept { return config_; }
  long step_count() const noexcept { return step_; }

  /// Applies one update in place. A non-finite gradient rejects the whole
  /// step (parameters and moments untouched) and throws.
  void step(ParameterSet<T>& params, const Gradients<T>& grads) {
    for (const auto& [name, g] : grads) {
      if (!params.contains(name)) throw ValidationError("gradient for unknown parameter " + name);
      const auto& p = params.at(name);
      if (p.rows() != g.rows() || p.cols() != g.cols()) {
        throw ValidationError("gradient shape mismatch for " + name);
      }
      if (!g.allFinite()) throw NumericalError("non-finite gradient for " + name + "; step rejected");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const T decay = static_cast<T>(1.0 - config_.lr * config_.weight_decay);
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T step_size = static_cast<T>(config_.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(config_.eps);

    for (const auto& [name, g] : grads) {
      auto& p = params.at(name);
      auto& m = first_.try_emplace(name, Matrix<T>::Zero(p.rows(), p.cols())).first->second;
      auto& v = second_.try_emplace(name, Matrix<T>::Zero(p.rows(), p.cols())).first->second;
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      p *= decay;
      p.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

  const Gradients<T>& first_moments() const noexcept { return first_; }
  const Gradients<T>& second_moments() const noexcept { return second_; }

 private:
  AdamWConfig config_;
  long step_ = 0;
  Gradients<T> first_;
  Gradients<T> second_;
};

}  // namespace cfusion
