#pragma once

// Vision/torque fusion strategies for a diffusion policy.
//
// A FusionModel owns the layout of one strategy: which encoders exist, how
// the conditioning vectors are assembled, how many denoisers run and how
// their noise predictions are combined.

#include "cfusion/autodiff.hpp"
#include "cfusion/errors.hpp"
#include "cfusion/models.hpp"
#include "cfusion/params.hpp"
#include "cfusion/simenv.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cfusion {

enum class StrategyTag : std::uint8_t {
  kVisionOnly = 0,
  kConcat = 1,
  kGated = 2,
  kAuxGoals = 3,
  kMoE = 4,
  kMoERaw = 5,
  kGatedCFG = 6,
  kMoEGated = 7,
};

inline constexpr std::array<StrategyTag, 8> kAllStrategies = {
    StrategyTag::kVisionOnly, StrategyTag::kConcat,   StrategyTag::kGated,    StrategyTag::kAuxGoals,
    StrategyTag::kMoE,        StrategyTag::kMoERaw,   StrategyTag::kGatedCFG, StrategyTag::kMoEGated};

inline std::string_view to_string(StrategyTag tag) {
  switch (tag) {
    case StrategyTag::kVisionOnly: return "vision_only";
    case StrategyTag::kConcat: return "concat";
    case StrategyTag::kGated: return "gated";
    case StrategyTag::kAuxGoals: return "aux_goals";
    case StrategyTag::kMoE: return "moe";
    case StrategyTag::kMoERaw: return "moe_raw";
    case StrategyTag::kGatedCFG: return "gated_cfg";
    case StrategyTag::kMoEGated: return "moe_gated";
  }
  return "unknown";
}

inline std::string strategy_tag_list() {
  std::string out;
  for (auto t : kAllStrategies) {
    if (!out.empty()) out += ", ";
    out += to_string(t);
  }
  return out;
}

inline StrategyTag parse_strategy(std::string_view s) {
  for (auto t : kAllStrategies) {
    if (to_string(t) == s) return t;
  }
  throw ValidationError("unknown strategy '" + std::string(s) + "' (valid: " + strategy_tag_list() + ")");
}

inline bool is_moe(StrategyTag t) {
  return t == StrategyTag::kMoE || t == StrategyTag::kMoERaw || t == StrategyTag::kMoEGated;
}
inline bool has_two_experts(StrategyTag t) { return is_moe(t) || t == StrategyTag::kGatedCFG; }
inline bool uses_gate(StrategyTag t) {
  return t == StrategyTag::kGated || t == StrategyTag::kGatedCFG || t == StrategyTag::kMoEGated;
}
inline bool uses_torque_encoder(StrategyTag t) {
  return t != StrategyTag::kVisionOnly && t != StrategyTag::kMoERaw;
}

struct StrategyConfig {
  StrategyTag tag = StrategyTag::kGatedCFG;
  double gate_threshold = 1.0;  // N*m
  double alpha = 0.1;           // auxiliary torque-loss weight
  bool moe_gated = false;       // router and torque expert see gated features
  double max_guidance = 20.0;   // sampling-time clamp on w_torque

  bool operator==(const StrategyConfig&) const = default;
};

inline StrategyConfig make_strategy(StrategyTag tag) {
  StrategyConfig c;
  c.tag = tag;
  c.moe_gated = tag == StrategyTag::kMoEGated;
  return c;
}

struct ModelShape {
  int horizon = 8;  // P
  int action_dim = sim::kActionDim;
  int joints = sim::kJoints;
  int history = sim::kHistory;
  int visual_dim = sim::kVisualDim;
  int c1 = 16;
  int c2 = 32;
  int cond_hidden = 64;

  int torque_flat() const { return joints * history; }
  bool operator==(const ModelShape&) const = default;
};

// ---------------------------------------------------------------------------
// Noise combiners on plain matrices (one column block of `length` per sample).

/// eps_vision + w * (eps_torque - eps_vision), with one weight per sample.
template <typename T>
Matrix<T> cfg_combine(const Matrix<T>& eps_vision, const Matrix<T>& eps_torque, std::span<const T> w,
                      Eigen::Index length) {
  if (eps_vision.rows() != eps_torque.rows() || eps_vision.cols() != eps_torque.cols()) {
    throw ValidationError("cfg_combine: prediction shapes differ");
  }
  if (static_cast<Eigen::Index>(w.size()) * length != eps_vision.cols()) {
    throw ValidationError("cfg_combine: weight count does not match batch");
  }
  Matrix<T> out(eps_vision.rows(), eps_vision.cols());
  for (std::size_t n = 0; n < w.size(); ++n) {
    const auto c = static_cast<Eigen::Index>(n) * length;
    out.middleCols(c, length) =
        eps_vision.middleCols(c, length) + w[n] * (eps_torque.middleCols(c, length) - eps_vision.middleCols(c, length));
  }
  return out;
}

/// w_img * eps_vision + w_tor * eps_torque per sample; weights must sum to 1.
template <typename T>
Matrix<T> moe_combine(const Matrix<T>& eps_vision, const Matrix<T>& eps_torque, std::span<const T> w_img,
                      std::span<const T> w_tor, Eigen::Index length) {
  if (eps_vision.rows() != eps_torque.rows() || eps_vision.cols() != eps_torque.cols()) {
    throw ValidationError("moe_combine: prediction shapes differ");
  }
  if (w_img.size() != w_tor.size() || static_cast<Eigen::Index>(w_img.size()) * length != eps_vision.cols()) {
    throw ValidationError("moe_combine: weight count does not match batch");
  }
  Matrix<T> out(eps_vision.rows(), eps_vision.cols());
  for (std::size_t n = 0; n < w_img.size(); ++n) {
    if (std::abs(static_cast<double>(w_img[n]) + static_cast<double>(w_tor[n]) - 1.0) > 1e-9) {
      throw ValidationError("moe_combine: weights do not sum to 1");
    }
    const auto c = static_cast<Eigen::Index>(n) * length;
    out.middleCols(c, length) = w_img[n] * eps_vision.middleCols(c, length) + w_tor[n] * eps_torque.middleCols(c, length);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model.

/// Normalized observations for a batch (one column per sample) plus the
/// contact gate computed on the raw torque.
template <typename T>
struct ObsBatch {
  Matrix<T> visual;   // V x N
  Matrix<T> torque;   // (D * H) x N, column-major flattening of D x H
  Matrix<T> proprio;  // D x N
  std::vector<int> phi;

  Eigen::Index size() const { return visual.cols(); }
};

template <typename T>
struct Conditioning {
  std::vector<int> phi;
  Var<T> single;        // single-denoiser strategies
  Var<T> vision;        // vision expert
  Var<T> torque;        // torque expert
  Var<T> scale_torque;  // gated torque features for the scale predictor
  Var<T> scale_vision;
  Var<T> router_img;
  Var<T> router_tor;
};

template <typename T>
struct NoiseOutput {
  Var<T> eps;                      // channels x (N * horizon)
  std::optional<Var<T>> w_torque;  // 1 x N (GatedCFG)
  std::optional<Var<T>> w_scale;   // 1 x N (GatedCFG)
  std::optional<Var<T>> route;     // 2 x N (MoE family), rows (w_img, w_tor)
  std::optional<Var<T>> eps_vision;
  std::optional<Var<T>> eps_torque;
};

template <typename T>
struct LossOutput {
  Var<T> loss;
  double action_mse = 0.0;
  double torque_mse = 0.0;  // AuxGoals only
};

namespace names {
inline constexpr const char* kVisionEncoder = "enc.vision";
inline constexpr const char* kTorqueEncoder = "enc.torque";
inline constexpr const char* kProprioEncoder = "enc.proprio";
inline constexpr const char* kFreeSpace = "fstar";
inline constexpr const char* kVisionDenoiser = "vision_denoiser";
inline constexpr const char* kTorqueDenoiser = "torque_denoiser";
inline constexpr const char* kDenoiser = "denoiser";
inline constexpr const char* kScale = "scale";
inline constexpr const char* kRouter = "router";
}  // namespace names

class FusionModel {
 public:
  FusionModel(StrategyConfig strategy, ModelShape shape) : strategy_(strategy), shape_(shape) {
    if (strategy_.tag == StrategyTag::kMoEGated) strategy_.moe_gated = true;
    vision_encoder_ = make_encoder(names::kVisionEncoder, shape_.visual_dim);
    torque_encoder_ = make_encoder(names::kTorqueEncoder, shape_.torque_flat());
    proprio_encoder_ = make_encoder(names::kProprioEncoder, shape_.joints);
    const int two = 2 * kFeatureDim;
    switch (strategy_.tag) {
      case StrategyTag::kVisionOnly:
        single_ = Denoiser(names::kVisionDenoiser, denoiser_shape(two));
        break;
      case StrategyTag::kConcat:
      case StrategyTag::kGated:
        single_ = Denoiser(names::kDenoiser, denoiser_shape(3 * kFeatureDim));
        break;
      case StrategyTag::kAuxGoals:
        single_ = Denoiser(names::kDenoiser, denoiser_shape(3 * kFeatureDim));
        single_.shape.channels = shape_.action_dim + shape_.joints;
        break;
      case StrategyTag::kMoE:
      case StrategyTag::kMoEGated:
        vision_ = Denoiser(names::kVisionDenoiser, denoiser_shape(two));
        torque_ = Denoiser(names::kTorqueDenoiser, denoiser_shape(kFeatureDim));
        router_ = Router(names::kRouter, two);
        break;
      case StrategyTag::kMoERaw:
        vision_ = Denoiser(names::kVisionDenoiser, denoiser_shape(two));
        torque_ = Denoiser(names::kTorqueDenoiser, denoiser_shape(shape_.torque_flat()));
        router_ = Router(names::kRouter, kFeatureDim + shape_.torque_flat());
        break;
      case StrategyTag::kGatedCFG:
        vision_ = Denoiser(names::kVisionDenoiser, denoiser_shape(two));
        torque_ = Denoiser(names::kTorqueDenoiser, denoiser_shape(two));
        break;
    }
  }

  const StrategyConfig& strategy() const noexcept { return strategy_; }
  const ModelShape& shape() const noexcept { return shape_; }
  StrategyTag tag() const noexcept { return strategy_.tag; }

  /// Trajectory channels: actions, plus future torque for AuxGoals.
  int channels() const {
    return strategy_.tag == StrategyTag::kAuxGoals ? shape_.action_dim + shape_.joints : shape_.action_dim;
  }

  const Denoiser& single_denoiser() const { return single_; }
  const Denoiser& vision_denoiser() const { return vision_; }
  const Denoiser& torque_denoiser() const { return torque_; }

  template <typename T>
  ParameterSet<T> init(std::uint64_t seed) const {
    ParameterSet<T> p;
    auto rng = make_rng(seed, StreamDomain::kParamInit);
    vision_encoder_.init(p, rng);
    proprio_encoder_.init(p, rng);
    if (uses_torque_encoder(strategy_.tag)) torque_encoder_.init(p, rng);
    if (uses_gate(strategy_.tag)) p.add(names::kFreeSpace, Matrix<T>::Zero(kFeatureDim, 1));
    if (has_two_experts(strategy_.tag)) {
      vision_.init(p, rng);
      torque_.init(p, rng);
    } else {
      single_.init(p, rng);
    }
    if (is_moe(strategy_.tag)) router_.init(p, rng);
    if (strategy_.tag == StrategyTag::kGatedCFG) scale_.init(p, rng);
    return p;
  }

  template <typename T>
  Var<T> encode_vision(ParamBinding<T>& p, Var<T> visual) const {
    return vision_encoder_(p, visual);
  }
  template <typename T>
  Var<T> encode_torque(ParamBinding<T>& p, Var<T> torque) const {
    return torque_encoder_(p, torque);
  }
  template <typename T>
  Var<T> encode_proprio(ParamBinding<T>& p, Var<T> proprio) const {
    return proprio_encoder_(p, proprio);
  }

  template <typename T>
  Conditioning<T> build_conditioning(ParamBinding<T>& p, const ObsBatch<T>& obs) const {
    auto& tape = p.tape();
    if (obs.visual.rows() != shape_.visual_dim || obs.torque.rows() != shape_.torque_flat() ||
        obs.proprio.rows() != shape_.joints || obs.visual.cols() != obs.torque.cols() ||
        obs.visual.cols() != obs.proprio.cols() || static_cast<Eigen::Index>(obs.phi.size()) != obs.visual.cols()) {
      throw ValidationError("observation batch does not match the model layout");
    }
    Conditioning<T> c;
    c.phi = obs.phi;
    auto f_vis = encode_vision(p, tape.constant(obs.visual));
    auto f_prop = encode_proprio(p, tape.constant(obs.proprio));
    const auto tag = strategy_.tag;
    std::optional<Var<T>> f_tor;
    std::optional<Var<T>> f_gated;
    if (uses_torque_encoder(tag)) f_tor = encode_torque(p, tape.constant(obs.torque));
    if (uses_gate(tag)) f_gated = gate_torque(*f_tor, p(names::kFreeSpace), std::span<const int>(obs.phi));

    switch (tag) {
      case StrategyTag::kVisionOnly:
        c.single = ad::concat_rows<T>({f_vis, f_prop});
        break;
      case StrategyTag::kConcat:
      case StrategyTag::kAuxGoals:
        c.single = ad::concat_rows<T>({f_vis, *f_tor, f_prop});
        break;
      case StrategyTag::kGated:
        c.single = ad::concat_rows<T>({f_vis, *f_gated, f_prop});
        break;
      case StrategyTag::kMoE:
        c.vision = ad::concat_rows<T>({f_vis, f_prop});
        c.torque = *f_tor;
        c.router_img = f_vis;
        c.router_tor = *f_tor;
        break;
      case StrategyTag::kMoEGated:
        c.vision = ad::concat_rows<T>({f_vis, f_prop});
        c.torque = *f_gated;
        c.router_img = f_vis;
        c.router_tor = *f_gated;
        break;
      case StrategyTag::kMoERaw: {
        auto raw = tape.constant(obs.torque);
        c.vision = ad::concat_rows<T>({f_vis, f_prop});
        c.torque = raw;
        c.router_img = f_vis;
        c.router_tor = raw;
        break;
      }
      case StrategyTag::kGatedCFG:
        c.vision = ad::concat_rows<T>({f_vis, f_prop});
        c.torque = ad::concat_rows<T>({*f_gated, f_prop});
        c.scale_torque = *f_gated;
        c.scale_vision = f_vis;
        break;
    }
    return c;
  }

  /// Noise estimate for noisy trajectories x (channels x N*horizon). With
  /// `sampling` set, the guidance weight is clamped to max_guidance.
  template <typename T>
  NoiseOutput<T> predict_noise(ParamBinding<T>& p, Var<T> x, std::span<const int> steps, const Conditioning<T>& c,
                               bool sampling = false) const {
    if (x.rows() != channels()) throw ValidationError("trajectory channels do not match the strategy layout");
    NoiseOutput<T> out;
    const auto tag = strategy_.tag;
    if (!has_two_experts(tag)) {
      out.eps = single_(p, x, steps, c.single);
      return out;
    }
    auto eps_v = vision_(p, x, steps, c.vision);
    auto eps_t = torque_(p, x, steps, c.torque);
    out.eps_vision = eps_v;
    out.eps_torque = eps_t;
    const Eigen::Index length = shape_.horizon;
    if (tag == StrategyTag::kGatedCFG) {
      auto g = scale_(p, c.scale_torque, c.scale_vision, std::span<const int>(c.phi));
      out.w_scale = g.w_scale;
      Var<T> w = g.w_torque;
      if (sampling) {
        w = p.tape().constant(g.w_torque.value().cwiseMin(static_cast<T>(strategy_.max_guidance)));
      }
      out.w_torque = w;
      out.eps = eps_v + ad::scale_cols(eps_t - eps_v, ad::repeat_cols(w, length));
      return out;
    }
    auto route = router_(p, c.router_img, c.router_tor);
    out.route = route;
    auto w_img = ad::repeat_cols(ad::slice_rows(route, 0, 1), length);
    auto w_tor = ad::repeat_cols(ad::slice_rows(route, 1, 1), length);
    out.eps = ad::scale_cols(eps_v, w_img) + ad::scale_cols(eps_t, w_tor);
    return out;
  }

  /// Noise-prediction objective; AuxGoals adds alpha * torque-slice MSE.
  template <typename T>
  LossOutput<T> loss(const NoiseOutput<T>& out, Var<T> eps_target) const {
    LossOutput<T> r;
    if (strategy_.tag != StrategyTag::kAuxGoals) {
      r.loss = ad::mse(out.eps, eps_target);
      r.action_mse = static_cast<double>(r.loss.value()(0, 0));
      return r;
    }
    const int a = shape_.action_dim;
    const int d = shape_.joints;
    auto action = ad::mse(ad::slice_rows(out.eps, 0, a), ad::slice_rows(eps_target, 0, a));
    auto torque = ad::mse(ad::slice_rows(out.eps, a, d), ad::slice_rows(eps_target, a, d));
    r.loss = action + ad::scale(torque, static_cast<T>(strategy_.alpha));
    r.action_mse = static_cast<double>(action.value()(0, 0));
    r.torque_mse = static_cast<double>(torque.value()(0, 0));
    return r;
  }

 private:
  DenoiserShape denoiser_shape(int cond_dim) const {
    DenoiserShape d;
    d.channels = shape_.action_dim;
    d.horizon = shape_.horizon;
    d.cond_dim = cond_dim;
    d.c1 = shape_.c1;
    d.c2 = shape_.c2;
    d.cond_hidden = shape_.cond_hidden;
    return d;
  }

  StrategyConfig strategy_;
  ModelShape shape_;
  Mlp vision_encoder_;
  Mlp torque_encoder_;
  Mlp proprio_encoder_;
  Denoiser single_;
  Denoiser vision_;
  Denoiser torque_;
  ScalePredictor scale_;
  Router router_;
};

}  // namespace cfusion
