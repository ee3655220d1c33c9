#pragma once

// Differentiable building blocks: perceptrons, modality encoders, contact
// gate, guidance-scale predictor, router and the temporal denoiser.

#include "cfusion/autodiff.hpp"
#include "cfusion/params.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace cfusion {

inline constexpr int kFeatureDim = 64;
inline constexpr int kEncoderHidden = 128;
inline constexpr int kTimeEmbedDim = 64;
inline constexpr double kInitStd = 0.02;

template <typename T>
using Var = ad::Var<T>;

struct Linear {
  std::string name;
  int in = 0;
  int out = 0;

  template <typename T>
  void init(ParameterSet<T>& params, Rng& rng) const {
    params.add(name + ".w", truncated_normal<T>(out, in, kInitStd, rng));
    params.add(name + ".b", Matrix<T>::Zero(out, 1));
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& p, Var<T> x) const {
    return ad::add_bias(ad::matmul(p(name + ".w"), x), p(name + ".b"));
  }
};

/// Stack of linear layers with SiLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(const std::string& name, std::initializer_list<int> widths) {
    std::vector<int> w(widths);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      layers.push_back(Linear{name + ".l" + std::to_string(i), w[i], w[i + 1]});
    }
  }

  int in() const { return layers.front().in; }
  int out() const { return layers.back().out; }
  const Linear& last() const { return layers.back(); }

  template <typename T>
  void init(ParameterSet<T>& params, Rng& rng) const {
    for (const auto& l : layers) l.init(params, rng);
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& p, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](p, x);
      if (i + 1 < layers.size()) x = ad::silu(x);
    }
    return x;
  }
};

/// Two-layer perceptron encoder producing a 64-d feature per column.
inline Mlp make_encoder(const std::string& name, int input_dim) {
  return Mlp(name, {input_dim, kEncoderHidden, kFeatureDim});
}

// ---------------------------------------------------------------------------
// Contact gate.

/// phi = 1 iff some joint of the most recent torque column strictly exceeds
/// the threshold in magnitude.
template <typename Derived>
int detect_contact(const Eigen::MatrixBase<Derived>& history, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("contact threshold must be positive");
  if (history.cols() == 0) return 0;
  const auto latest = history.col(history.cols() - 1);
  for (Eigen::Index j = 0; j < latest.size(); ++j) {
    if (std::abs(static_cast<double>(latest(j))) > threshold) return 1;
  }
  return 0;
}

/// phi * f_torque + (1 - phi) * f_star, column-wise with binary phi. The
/// selected branch is copied so the endpoint identities hold bitwise.
template <typename T>
Var<T> gate_torque(Var<T> f_torque, Var<T> f_star, std::span<const int> phi) {
  ad::detail::require(f_star.cols() == 1 && f_star.rows() == f_torque.rows(), "gate_torque: f_star shape");
  ad::detail::require(static_cast<Eigen::Index>(phi.size()) == f_torque.cols(), "gate_torque: phi size");
  Matrix<T> out(f_torque.rows(), f_torque.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    out.col(j) = phi[j] != 0 ? f_torque.value().col(j) : f_star.value().col(0);
  }
  std::vector<int> mask(phi.begin(), phi.end());
  return f_torque.tape->record(std::move(out), {f_torque, f_star},
                               [f_torque, f_star, mask](ad::Tape<T>& tape, const Matrix<T>& g) {
                                 for (Eigen::Index j = 0; j < g.cols(); ++j) {
                                   if (mask[j] != 0) {
                                     if (tape.requires_grad(f_torque)) tape.grad_ref(f_torque).col(j) += g.col(j);
                                   } else if (tape.requires_grad(f_star)) {
                                     tape.grad_ref(f_star).col(0) += g.col(j);
                                   }
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Guidance scale and router.

template <typename T>
struct GuidanceOutput {
  Var<T> w_scale;   // 1 x N raw predictor output
  Var<T> w_torque;  // 1 x N, phi * softplus(w_scale)
};

/// Three-layer perceptron on [f_gated ; f_vision].
struct ScalePredictor {
  Mlp mlp;
  explicit ScalePredictor(const std::string& name = "scale")
      : mlp(name, {2 * kFeatureDim, kFeatureDim, kFeatureDim, 1}) {}

  template <typename T>
  void init(ParameterSet<T>& params, Rng& rng) const {
    mlp.init(params, rng);
  }

  template <typename T>
  GuidanceOutput<T> operator()(ParamBinding<T>& p, Var<T> f_gated, Var<T> f_vision,
                               std::span<const int> phi) const {
    auto w_scale = mlp(p, ad::concat_rows<T>({f_gated, f_vision}));
    Matrix<T> mask(1, static_cast<Eigen::Index>(phi.size()));
    for (std::size_t j = 0; j < phi.size(); ++j) mask(0, static_cast<Eigen::Index>(j)) = phi[j] != 0 ? T(1) : T(0);
    auto w_torque = ad::scale_cols(ad::softplus(w_scale), p.tape().constant(std::move(mask)));
    return {w_scale, w_torque};
  }
};

/// Router: concatenated features -> two logits -> softmax. Row 0 is w_img,
/// row 1 is w_tor.
struct Router {
  Mlp mlp;
  Router() = default;
  Router(const std::string& name, int input_dim) : mlp(name, {input_dim, kFeatureDim, 2}) {}

  template <typename T>
  void init(ParameterSet<T>& params, Rng& rng) const {
    mlp.init(params, rng);
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& p, Var<T> f_img, Var<T> f_tor) const {
    return ad::softmax_cols(mlp(p, ad::concat_rows<T>({f_img, f_tor})));
  }
};

// ---------------------------------------------------------------------------
// Temporal denoiser.

/// Sinusoidal embedding of integer diffusion timesteps, one column per entry.
template <typename T>
Matrix<T> timestep_embedding(std::span<const int> steps, int dim = kTimeEmbedDim) {
  const int half = dim / 2;
  Matrix<T> out(dim, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t n = 0; n < steps.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = steps[n] * freq;
      out(i, static_cast<Eigen::Index>(n)) = static_cast<T>(std::sin(arg));
      out(half + i, static_cast<Eigen::Index>(n)) = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

struct DenoiserShape {
  int channels = 3;   // trajectory channels (action dim, or action + torque)
  int horizon = 8;    // trajectory length
  int cond_dim = 128;
  int c1 = 16;
  int c2 = 32;
  int cond_hidden = 64;
};

/// Compact 1-D temporal U-Net: conv -> strided conv -> conv (residual) ->
/// upsample + skip -> conv -> 1x1 projection. Every conv block is modulated
/// by a per-sample affine transform predicted from
/// [timestep embedding ; conditioning].
struct Denoiser {
  std::string name;
  DenoiserShape shape;

  Denoiser() = default;
  Denoiser(std::string n, DenoiserShape s) : name(std::move(n)), shape(s) {}

  int down_len() const { return (shape.horizon + 1) / 2; }

  template <typename T>
  void init(ParameterSet<T>& params, Rng& rng) const {
    const auto& s = shape;
    auto conv = [&](const std::string& n, int c_out, int c_in, int k) {
      params.add(name + "." + n + ".w", truncated_normal<T>(c_out, k * c_in, kInitStd, rng));
      params.add(name + "." + n + ".b", Matrix<T>::Zero(c_out, 1));
    };
    Linear{name + ".cond", kTimeEmbedDim + s.cond_dim, s.cond_hidden}.init(params, rng);
    conv("b1", s.c1, s.channels, 3);
    Linear{name + ".b1.film", s.cond_hidden, 2 * s.c1}.init(params, rng);
    conv("down", s.c2, s.c1, 3);
    Linear{name + ".down.film", s.cond_hidden, 2 * s.c2}.init(params, rng);
    conv("mid", s.c2, s.c2, 3);
    Linear{name + ".mid.film", s.cond_hidden, 2 * s.c2}.init(params, rng);
    conv("up", s.c1, s.c1 + s.c2, 3);
    Linear{name + ".up.film", s.cond_hidden, 2 * s.c1}.init(params, rng);
    conv("out", s.channels, s.c1, 1);
  }

  /// x: channels x (N * horizon); steps: N timesteps; cond: cond_dim x N.
  template <typename T>
  Var<T> operator()(ParamBinding<T>& p, Var<T> x, std::span<const int> steps, Var<T> cond) const {
    const auto& s = shape;
    const auto batch = static_cast<Eigen::Index>(steps.size());
    ad::detail::require(x.rows() == s.channels && x.cols() == batch * s.horizon, "denoiser: trajectory shape");
    ad::detail::require(cond.rows() == s.cond_dim && cond.cols() == batch, "denoiser: conditioning shape");

    auto& tape = p.tape();
    auto temb = tape.constant(timestep_embedding<T>(steps));
    auto c = ad::silu(Linear{name + ".cond", kTimeEmbedDim + s.cond_dim, s.cond_hidden}(
        p, ad::concat_rows<T>({temb, cond})));

    auto film = [&](const std::string& block, Var<T> h, int channels, Eigen::Index length) {
      auto gb = Linear{name + "." + block + ".film", s.cond_hidden, 2 * channels}(p, c);
      auto gamma = ad::repeat_cols(ad::slice_rows(gb, 0, channels), length);
      auto beta = ad::repeat_cols(ad::slice_rows(gb, channels, channels), length);
      return ad::silu(h + ad::hadamard(h, gamma) + beta);
    };
    auto conv = [&](const std::string& n, Var<T> h, Eigen::Index length, Eigen::Index stride) {
      return ad::conv1d(h, p(name + "." + n + ".w"), p(name + "." + n + ".b"), length, stride);
    };

    const Eigen::Index len = s.horizon;
    const Eigen::Index half = down_len();
    auto h1 = film("b1", conv("b1", x, len, 1), s.c1, len);
    auto h2 = film("down", conv("down", h1, len, 2), s.c2, half);
    auto h3 = film("mid", conv("mid", h2, half, 1), s.c2, half) + h2;
    auto up = ad::upsample2(h3, half, len);
    auto h4 = film("up", conv("up", ad::concat_rows<T>({up, h1}), len, 1), s.c1, len);
    return conv("out", h4, len, 1);
  }
};

}  // namespace cfusion
