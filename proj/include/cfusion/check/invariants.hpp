#pragma once

// Invariant suites run by `selftest` and the acceptance binary:
//   identities  exact fusion identities (gate, guidance blend, scale, router)
//   gradients   finite-difference checks of every differentiable operation
//   diffusion   single-step round trip and the mixture-sampling oracle

#include "cfusion/check/gradcheck.hpp"
#include "cfusion/check/mixture.hpp"
#include "cfusion/check/op_cases.hpp"
#include "cfusion/diffusion.hpp"
#include "cfusion/fusion.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace cfusion::check {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool pass() const {
    for (const auto& c : checks) {
      if (!c.pass) return false;
    }
    return !checks.empty();
  }
  std::string failures() const {
    std::string out;
    for (const auto& c : checks) {
      if (!c.pass) out += (out.empty() ? "" : "; ") + c.name + ": " + c.detail;
    }
    return out;
  }
};

namespace detail {

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string num(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

inline void expect(SuiteResult& r, std::string name, bool ok, std::string detail = {}) {
  r.checks.push_back({std::move(name), ok, ok ? std::string() : std::move(detail)});
}

inline double max_abs(const Matrix<double>& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace detail

inline SuiteResult identity_suite(std::uint64_t seed = 1) {
  using detail::expect;
  using detail::max_abs;
  detail::Timer timer;
  SuiteResult r;
  r.name = "identities";
  std::mt19937_64 rng(seed);

  // Contact gate: strict inequality on the latest column.
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(sim::kJoints, sim::kHistory);
  const bool zero_ok = detect_contact(h, 1.0) == 0;
  h(1, sim::kHistory - 1) = 1.0;
  const bool tie_ok = detect_contact(h, 1.0) == 0;
  h(1, sim::kHistory - 1) = 1.5;
  expect(r, "contact gate threshold", zero_ok && tie_ok && detect_contact(h, 1.0) == 1, "strictness violated");

  // Gate endpoints, bitwise.
  {
    ad::Tape<double> tape;
    auto f = tape.constant(random_matrix(kFeatureDim, 6, rng));
    auto fs = tape.constant(random_matrix(kFeatureDim, 1, rng));
    const std::vector<int> phi = {1, 0, 0, 1, 1, 0};
    const auto g = gate_torque(f, fs, std::span<const int>(phi)).value();
    bool ok = true;
    for (int i = 0; i < 6; ++i) ok = ok && (phi[i] ? g.col(i) == f.value().col(i) : g.col(i) == fs.value().col(0));
    expect(r, "gate endpoints bitwise", ok, "gated feature differs from its selected branch");
  }

  // Guidance blend: endpoints and linearity.
  {
    const Eigen::Index len = 8;
    auto ev = random_matrix(sim::kActionDim, 3 * len, rng), et = random_matrix(sim::kActionDim, 3 * len, rng);
    const std::vector<double> w0(3, 0.0), w1(3, 1.0);
    expect(r, "blend w=0 is vision bitwise", cfg_combine<double>(ev, et, w0, len) == ev, "not bitwise");
    const double e1 = max_abs(cfg_combine<double>(ev, et, w1, len) - et);
    expect(r, "blend w=1 is torque", e1 <= 1e-12, "error " + detail::num(e1));
    const std::vector<double> wa = {0.3, 2.0, 7.5}, wb = {1.1, 0.25, 3.0}, wsum = {1.4, 2.25, 10.5};
    Matrix<double> lhs = cfg_combine<double>(ev, et, wsum, len) - ev;
    Matrix<double> rhs = (cfg_combine<double>(ev, et, wa, len) - ev) + (cfg_combine<double>(ev, et, wb, len) - ev);
    const double el = max_abs(lhs - rhs);
    expect(r, "blend linear in w", el <= 1e-12, "error " + detail::num(el));
    Matrix<double> a(1, 1), b(1, 1);
    a << 0.2;
    b << 0.6;
    const std::vector<double> half = {0.5};
    const double ex = std::abs(cfg_combine<double>(a, b, half, 1)(0, 0) - 0.4);
    expect(r, "blend example 0.2/0.6/0.5", ex <= 1e-12, "error " + detail::num(ex));
  }

  // Guidance weight: softplus at zero and free-space zero, through the model.
  {
    const double e = std::abs(ad::softplus_scalar(0.0) - std::log(2.0));
    expect(r, "softplus(0) = ln 2", e <= 1e-12, "error " + detail::num(e));
    const ModelShape shape;
    FusionModel m(make_strategy(StrategyTag::kGatedCFG), shape);
    auto params = m.init<double>(seed);
    randomize(params, rng, 0.3);
    ObsBatch<double> obs;
    obs.phi = {0, 1, 0, 1};
    obs.visual = random_matrix(shape.visual_dim, 4, rng);
    obs.torque = random_matrix(shape.torque_flat(), 4, rng, 3.0);
    obs.proprio = random_matrix(shape.joints, 4, rng);
    ad::Tape<double> tape;
    ParamBinding<double> p(tape, params, false);
    const auto cond = m.build_conditioning(p, obs);
    const std::vector<int> steps = {0, 30, 60, 99};
    const auto out = m.predict_noise(p, tape.constant(random_matrix(shape.action_dim, 4 * shape.horizon, rng)),
                                     std::span<const int>(steps), cond);
    const auto& w = out.w_torque->value();
    const auto& ws = out.w_scale->value();
    expect(r, "free-space w_torque exactly 0", w(0, 0) == 0.0 && w(0, 2) == 0.0, "nonzero weight with phi = 0");
    const double ec = std::max(std::abs(w(0, 1) - ad::softplus_scalar(ws(0, 1))),
                               std::abs(w(0, 3) - ad::softplus_scalar(ws(0, 3))));
    expect(r, "contact w_torque = softplus(w_scale)", ec <= 1e-12 && w(0, 1) > 0.0, "error " + detail::num(ec));
    const bool free_cols = out.eps.value().middleCols(0, shape.horizon) ==
                           out.eps_vision->value().middleCols(0, shape.horizon);
    expect(r, "free-space prediction is the vision expert", free_cols, "not bitwise");
  }

  // Router simplex and convex blend, through the model.
  {
    const ModelShape shape;
    FusionModel m(make_strategy(StrategyTag::kMoE), shape);
    auto params = m.init<double>(seed + 1);
    randomize(params, rng, 0.5);
    ObsBatch<double> obs;
    obs.phi = {0, 1, 1, 0, 1};
    obs.visual = random_matrix(shape.visual_dim, 5, rng);
    obs.torque = random_matrix(shape.torque_flat(), 5, rng, 3.0);
    obs.proprio = random_matrix(shape.joints, 5, rng);
    ad::Tape<double> tape;
    ParamBinding<double> p(tape, params, false);
    const auto cond = m.build_conditioning(p, obs);
    const std::vector<int> steps = {1, 2, 3, 4, 5};
    const auto out = m.predict_noise(p, tape.constant(random_matrix(shape.action_dim, 5 * shape.horizon, rng)),
                                     std::span<const int>(steps), cond);
    const auto& route = out.route->value();
    double simplex = 0.0;
    bool nonneg = true;
    for (Eigen::Index i = 0; i < route.cols(); ++i) {
      simplex = std::max(simplex, std::abs(route.col(i).sum() - 1.0));
      nonneg = nonneg && route(0, i) >= 0.0 && route(1, i) >= 0.0;
    }
    expect(r, "router weights on the simplex", simplex <= 1e-12 && nonneg, "error " + detail::num(simplex));
    std::vector<double> wi, wt;
    for (Eigen::Index i = 0; i < route.cols(); ++i) {
      wi.push_back(route(0, i));
      wt.push_back(route(1, i));
    }
    const double eb = max_abs(out.eps.value() - moe_combine<double>(out.eps_vision->value(), out.eps_torque->value(),
                                                                    wi, wt, shape.horizon));
    expect(r, "MoE output is the convex blend", eb <= 1e-12, "error " + detail::num(eb));
    const std::vector<double> one(1, 1.0), zero(1, 0.0);
    auto ev = random_matrix(sim::kActionDim, 4, rng), et = random_matrix(sim::kActionDim, 4, rng);
    expect(r, "MoE endpoints bitwise",
           moe_combine<double>(ev, et, one, zero, 4) == ev && moe_combine<double>(ev, et, zero, one, 4) == et,
           "not bitwise");
  }
  r.seconds = timer.seconds();
  return r;
}

/// Finite-difference checks of every primitive, model block and strategy
/// loss on `instances` random small cases each.
inline SuiteResult gradient_suite(int instances = 20, double tolerance = 1e-4, std::uint64_t seed = 11) {
  detail::Timer timer;
  SuiteResult r;
  r.name = "gradients";
  auto run = [&](const std::string& name, const std::function<OpCase(std::mt19937_64&)>& make, std::uint64_t s) {
    std::mt19937_64 rng(s);
    double worst = 0.0;
    std::string where;
    std::size_t coords = 0;
    for (int i = 0; i < instances; ++i) {
      auto oc = make(rng);
      auto g = grad_check(oc.fn, oc.inputs, rng, oc.max_coords);
      coords += g.coords;
      if (g.max_rel_error > worst || std::isnan(g.max_rel_error)) {
        worst = g.max_rel_error;
        where = g.worst;
      }
    }
    const bool ok = worst < tolerance && coords > 0;
    r.checks.push_back({name, ok, ok ? "" : "max rel error " + detail::num(worst) + " at " + where});
  };
  for (const auto& op : primitive_ops()) run(op.name, op.make, seed);
  for (const auto& op : block_ops()) run(op.name, op.make, seed + 1);
  for (auto tag : kAllStrategies) {
    run("loss:" + std::string(to_string(tag)), [tag](std::mt19937_64& g) { return strategy_loss_case(tag, g); },
        seed + 2 + static_cast<std::uint64_t>(tag));
  }
  r.seconds = timer.seconds();
  return r;
}

struct DiffusionSuiteResult {
  SuiteResult suite;
  double round_trip_error = 0.0;
  MixtureResult mixture;
};

inline DiffusionSuiteResult diffusion_suite(std::uint64_t seed = 4) {
  detail::Timer timer;
  DiffusionSuiteResult out;
  auto& r = out.suite;
  r.name = "diffusion";
  const auto sched = make_schedule(1, 0.5, 0.5);
  auto rng = make_rng(seed, StreamDomain::kDiffusionNoise);
  Matrix<double> x(sim::kActionDim, 16), e(sim::kActionDim, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = gaussian(rng);
    e.data()[i] = gaussian(rng);
  }
  const auto back = reverse_step<double>(q_sample<double>(x, 0, e, sched), e, 0, sched, Matrix<double>());
  const Matrix<float> xf = x.cast<float>(), ef = e.cast<float>();
  const auto backf = reverse_step<float>(q_sample<float>(xf, 0, ef, sched), ef, 0, sched, Matrix<float>());
  out.round_trip_error = std::max(detail::max_abs(back - x), detail::max_abs(backf.cast<double>() - x));
  detail::expect(r, "single-step round trip", out.round_trip_error <= 1e-5,
                 "error " + detail::num(out.round_trip_error));

  MixtureSpec spec;
  out.mixture = run_mixture_oracle(spec);
  const double err = std::abs(out.mixture.weight0_hat - spec.weight0);
  detail::expect(r, "mixture weights within 0.05", err <= 0.05,
                 "estimated " + detail::num(out.mixture.weight0_hat) + " vs " + detail::num(spec.weight0));
  detail::expect(r, "mixture training loss decreased", out.mixture.last_loss < out.mixture.first_loss,
                 detail::num(out.mixture.first_loss) + " -> " + detail::num(out.mixture.last_loss));
  r.seconds = timer.seconds();
  return out;
}

}  // namespace cfusion::check
