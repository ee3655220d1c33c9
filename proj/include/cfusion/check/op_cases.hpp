#pragma once

// Randomized gradient-check instances for every differentiable op and
// model block.

#include "cfusion/fusion.hpp"
#include "cfusion/check/gradcheck.hpp"

#include <memory>
#include <string>
#include <vector>

namespace cfusion::check {

struct OpCase {
  ParameterSet<double> inputs;
  ScalarFn fn;
  std::size_t max_coords = 64;
};

struct OpSpec {
  std::string name;
  std::function<OpCase(std::mt19937_64&)> make;
};

inline int rand_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline std::vector<int> random_phi(std::mt19937_64& rng, int n) {
  std::vector<int> phi(n);
  for (int i = 0; i < n; ++i) phi[i] = i % 2;  // both branches always present
  std::shuffle(phi.begin(), phi.end(), rng);
  return phi;
}

/// Replaces every tensor with N(0, stddev) draws so gradients are O(1).
inline void randomize(ParameterSet<double>& p, std::mt19937_64& rng, double stddev) {
  for (auto& [_, m] : p.tensors()) m = random_matrix(m.rows(), m.cols(), rng, stddev);
}

inline std::vector<OpSpec> primitive_ops() {
  using V = ad::Var<double>;
  using P = ParamBinding<double>;
  std::vector<OpSpec> ops;
  auto add = [&](std::string name, std::function<OpCase(std::mt19937_64&)> make) {
    ops.push_back({std::move(name), std::move(make)});
  };

  add("matmul", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 1, 6), k = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
    OpCase oc;
    oc.inputs.add("a", random_matrix(r, k, rng));
    oc.inputs.add("b", random_matrix(k, c, rng));
    oc.fn = [](P& p) { return project(ad::matmul(p("a"), p("b"))); };
    return oc;
  });
  for (const char* which : {"add", "sub", "hadamard"}) {
    const std::string op = which;
    add(op, [op](std::mt19937_64& rng) {
      const int r = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
      OpCase oc;
      oc.inputs.add("a", random_matrix(r, c, rng));
      oc.inputs.add("b", random_matrix(r, c, rng));
      oc.fn = [op](P& p) {
        V out = op == "add" ? p("a") + p("b") : op == "sub" ? p("a") - p("b") : ad::hadamard(p("a"), p("b"));
        return project(out);
      };
      return oc;
    });
  }
  add("scale", [](std::mt19937_64& rng) {
    const double s = std::normal_distribution<double>(0.0, 2.0)(rng);
    OpCase oc;
    oc.inputs.add("a", random_matrix(rand_int(rng, 1, 6), rand_int(rng, 1, 6), rng));
    oc.fn = [s](P& p) { return project(ad::scale(p("a"), s)); };
    return oc;
  });
  add("add_scaled", [](std::mt19937_64& rng) {
    const double s = std::normal_distribution<double>(0.0, 2.0)(rng);
    const int r = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
    OpCase oc;
    oc.inputs.add("a", random_matrix(r, c, rng));
    oc.inputs.add("b", random_matrix(r, c, rng));
    oc.fn = [s](P& p) { return project(ad::add_scaled(p("a"), p("b"), s)); };
    return oc;
  });
  add("add_bias", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
    OpCase oc;
    oc.inputs.add("x", random_matrix(r, c, rng));
    oc.inputs.add("b", random_matrix(r, 1, rng));
    oc.fn = [](P& p) { return project(ad::add_bias(p("x"), p("b"))); };
    return oc;
  });
  add("scale_cols", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
    OpCase oc;
    oc.inputs.add("x", random_matrix(r, c, rng));
    oc.inputs.add("w", random_matrix(1, c, rng));
    oc.fn = [](P& p) { return project(ad::scale_cols(p("x"), p("w"))); };
    return oc;
  });
  add("repeat_cols", [](std::mt19937_64& rng) {
    const int times = rand_int(rng, 1, 5);
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 1, 5), rand_int(rng, 1, 4), rng));
    oc.fn = [times](P& p) { return project(ad::repeat_cols(p("x"), times)); };
    return oc;
  });
  add("concat_rows", [](std::mt19937_64& rng) {
    const int c = rand_int(rng, 1, 5);
    OpCase oc;
    oc.inputs.add("a", random_matrix(rand_int(rng, 1, 4), c, rng));
    oc.inputs.add("b", random_matrix(rand_int(rng, 1, 4), c, rng));
    oc.inputs.add("c", random_matrix(rand_int(rng, 1, 4), c, rng));
    oc.fn = [](P& p) { return project(ad::concat_rows<double>({p("a"), p("b"), p("c")})); };
    return oc;
  });
  add("slice_rows", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 2, 8);
    const int start = rand_int(rng, 0, r - 1);
    const int count = rand_int(rng, 1, r - start);
    OpCase oc;
    oc.inputs.add("x", random_matrix(r, rand_int(rng, 1, 5), rng));
    oc.fn = [start, count](P& p) { return project(ad::slice_rows(p("x"), start, count)); };
    return oc;
  });
  add("silu", [](std::mt19937_64& rng) {
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 1, 6), rand_int(rng, 1, 6), rng, 3.0));
    oc.fn = [](P& p) { return project(ad::silu(p("x"))); };
    return oc;
  });
  add("softplus", [](std::mt19937_64& rng) {
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 1, 6), rand_int(rng, 1, 6), rng, 3.0));
    oc.fn = [](P& p) { return project(ad::softplus(p("x"))); };
    return oc;
  });
  add("softmax_cols", [](std::mt19937_64& rng) {
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 2, 6), rand_int(rng, 1, 6), rng, 2.0));
    oc.fn = [](P& p) { return project(ad::softmax_cols(p("x"))); };
    return oc;
  });
  add("conv1d", [](std::mt19937_64& rng) {
    const int c_in = rand_int(rng, 1, 4), c_out = rand_int(rng, 1, 4);
    const int kernel = 2 * rand_int(rng, 0, 2) + 1;
    const int length = rand_int(rng, 1, 9), batch = rand_int(rng, 1, 3), stride = rand_int(rng, 1, 2);
    OpCase oc;
    oc.inputs.add("x", random_matrix(c_in, batch * length, rng));
    oc.inputs.add("w", random_matrix(c_out, kernel * c_in, rng));
    oc.inputs.add("b", random_matrix(c_out, 1, rng));
    oc.fn = [length, stride](P& p) { return project(ad::conv1d(p("x"), p("w"), p("b"), length, stride)); };
    return oc;
  });
  add("upsample2", [](std::mt19937_64& rng) {
    const int in_len = rand_int(rng, 1, 5);
    const int out_len = 2 * in_len - rand_int(rng, 0, in_len > 1 ? 1 : 0);
    const int batch = rand_int(rng, 1, 3);
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 1, 4), batch * in_len, rng));
    oc.fn = [in_len, out_len](P& p) { return project(ad::upsample2(p("x"), in_len, out_len)); };
    return oc;
  });
  add("mean_all", [](std::mt19937_64& rng) {
    OpCase oc;
    oc.inputs.add("x", random_matrix(rand_int(rng, 1, 6), rand_int(rng, 1, 6), rng));
    oc.fn = [](P& p) { return ad::mean_all(ad::hadamard(p("x"), p("x"))); };
    return oc;
  });
  add("mse", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 1, 6), c = rand_int(rng, 1, 6);
    OpCase oc;
    oc.inputs.add("a", random_matrix(r, c, rng));
    oc.inputs.add("b", random_matrix(r, c, rng));
    oc.fn = [](P& p) { return ad::mse(p("a"), p("b")); };
    return oc;
  });
  add("gate_torque", [](std::mt19937_64& rng) {
    const int r = rand_int(rng, 1, 6), n = rand_int(rng, 2, 6);
    auto phi = random_phi(rng, n);
    OpCase oc;
    oc.inputs.add("f", random_matrix(r, n, rng));
    oc.inputs.add("fstar", random_matrix(r, 1, rng));
    oc.fn = [phi](P& p) { return project(gate_torque(p("f"), p("fstar"), std::span<const int>(phi))); };
    return oc;
  });
  return ops;
}

inline std::vector<OpSpec> block_ops() {
  using P = ParamBinding<double>;
  std::vector<OpSpec> ops;
  ops.push_back({"mlp", [](std::mt19937_64& rng) {
                   const int in = rand_int(rng, 1, 6), hid = rand_int(rng, 1, 6), out = rand_int(rng, 1, 4);
                   const int n = rand_int(rng, 1, 4);
                   Mlp mlp("m", {in, hid, out});
                   OpCase oc;
                   auto init_rng = make_rng(rng(), StreamDomain::kParamInit);
                   mlp.init(oc.inputs, init_rng);
                   randomize(oc.inputs, rng, 0.7);
                   oc.inputs.add("x", random_matrix(in, n, rng));
                   oc.fn = [mlp](P& p) { return project(mlp(p, p("x"))); };
                   return oc;
                 }});
  ops.push_back({"scale_predictor", [](std::mt19937_64& rng) {
                   const int n = rand_int(rng, 2, 4);
                   auto phi = random_phi(rng, n);
                   ScalePredictor sp;
                   OpCase oc;
                   auto init_rng = make_rng(rng(), StreamDomain::kParamInit);
                   sp.init(oc.inputs, init_rng);
                   randomize(oc.inputs, rng, 0.15);
                   oc.inputs.add("ft", random_matrix(kFeatureDim, n, rng));
                   oc.inputs.add("fv", random_matrix(kFeatureDim, n, rng));
                   oc.max_coords = 24;
                   oc.fn = [sp, phi](P& p) {
                     auto g = sp(p, p("ft"), p("fv"), std::span<const int>(phi));
                     return project(ad::concat_rows<double>({g.w_scale, g.w_torque}));
                   };
                   return oc;
                 }});
  ops.push_back({"router", [](std::mt19937_64& rng) {
                   const int a = rand_int(rng, 1, 5), b = rand_int(rng, 1, 5), n = rand_int(rng, 1, 4);
                   Router router("r", a + b);
                   OpCase oc;
                   auto init_rng = make_rng(rng(), StreamDomain::kParamInit);
                   router.init(oc.inputs, init_rng);
                   randomize(oc.inputs, rng, 0.5);
                   oc.inputs.add("a", random_matrix(a, n, rng));
                   oc.inputs.add("b", random_matrix(b, n, rng));
                   oc.max_coords = 24;
                   oc.fn = [router](P& p) { return project(router(p, p("a"), p("b"))); };
                   return oc;
                 }});
  ops.push_back({"denoiser", [](std::mt19937_64& rng) {
                   DenoiserShape s;
                   s.channels = rand_int(rng, 1, 4);
                   s.horizon = rand_int(rng, 2, 8);
                   s.cond_dim = rand_int(rng, 1, 6);
                   s.c1 = rand_int(rng, 2, 4);
                   s.c2 = rand_int(rng, 2, 5);
                   s.cond_hidden = rand_int(rng, 2, 6);
                   const int n = rand_int(rng, 1, 3);
                   std::vector<int> steps(n);
                   for (auto& t : steps) t = rand_int(rng, 0, 99);
                   Denoiser d("d", s);
                   OpCase oc;
                   auto init_rng = make_rng(rng(), StreamDomain::kParamInit);
                   d.init(oc.inputs, init_rng);
                   randomize(oc.inputs, rng, 0.4);
                   oc.inputs.add("x", random_matrix(s.channels, n * s.horizon, rng));
                   oc.inputs.add("c", random_matrix(s.cond_dim, n, rng));
                   oc.max_coords = 16;
                   oc.fn = [d, steps](P& p) { return project(d(p, p("x"), std::span<const int>(steps), p("c"))); };
                   return oc;
                 }});
  return ops;
}

/// Full training loss of a strategy on a small random batch, at f64 with
/// randomized parameters. Observations are constants; the noise target is
/// a parameter too so the loss is also checked w.r.t. it.
inline OpCase strategy_loss_case(StrategyTag tag, std::mt19937_64& rng) {
  using P = ParamBinding<double>;
  ModelShape shape;
  shape.c1 = 4;
  shape.c2 = 6;
  shape.cond_hidden = 8;
  auto model = std::make_shared<FusionModel>(make_strategy(tag), shape);
  OpCase oc;
  oc.inputs = model->init<double>(rng());
  randomize(oc.inputs, rng, 0.15);
  const int n = 3;
  auto obs = std::make_shared<ObsBatch<double>>();
  obs->visual = random_matrix(shape.visual_dim, n, rng);
  obs->torque = random_matrix(shape.torque_flat(), n, rng);
  obs->proprio = random_matrix(shape.joints, n, rng);
  obs->phi = random_phi(rng, n);
  std::vector<int> steps(n);
  for (auto& t : steps) t = rand_int(rng, 0, 99);
  oc.inputs.add("x_noisy", random_matrix(model->channels(), n * shape.horizon, rng));
  oc.inputs.add("eps_target", random_matrix(model->channels(), n * shape.horizon, rng));
  oc.max_coords = 6;
  oc.fn = [model, obs, steps](P& p) {
    auto cond = model->build_conditioning(p, *obs);
    auto out = model->predict_noise(p, p("x_noisy"), std::span<const int>(steps), cond);
    return model->loss(out, p("eps_target")).loss;
  };
  return oc;
}

}  // namespace cfusion::check
