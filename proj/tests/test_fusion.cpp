#include "cfusion/fusion.hpp"
#include "cfusion/check/op_cases.hpp"

#include <gtest/gtest.h>

using namespace cfusion;
using cfusion::check::random_matrix;

namespace {

ObsBatch<double> random_obs(const ModelShape& shape, std::vector<int> phi, std::mt19937_64& rng) {
  ObsBatch<double> obs;
  const int n = static_cast<int>(phi.size());
  obs.visual = random_matrix(shape.visual_dim, n, rng);
  obs.torque = random_matrix(shape.torque_flat(), n, rng);
  obs.proprio = random_matrix(shape.joints, n, rng);
  obs.phi = std::move(phi);
  return obs;
}

struct Forward {
  ad::Tape<double> tape;
  std::unique_ptr<ParamBinding<double>> p;
  Conditioning<double> cond;
  NoiseOutput<double> out;
};

std::unique_ptr<Forward> run(const FusionModel& m, const ParameterSet<double>& params, const ObsBatch<double>& obs,
                             const Matrix<double>& x, const std::vector<int>& steps, bool sampling = false,
                             bool trainable = false) {
  auto f = std::make_unique<Forward>();
  f->p = std::make_unique<ParamBinding<double>>(f->tape, params, trainable);
  f->cond = m.build_conditioning(*f->p, obs);
  f->out = m.predict_noise(*f->p, f->tape.constant(x), std::span<const int>(steps), f->cond, sampling);
  return f;
}

}  // namespace

TEST(Strategy, TagsRoundTrip) {
  for (auto t : kAllStrategies) EXPECT_EQ(parse_strategy(to_string(t)), t);
  try {
    parse_strategy("gated-cfg");
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("gated_cfg"), std::string::npos);
  }
}

TEST(Contact, StrictThreshold) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(4, 10);
  h(2, 9) = 1.0;
  EXPECT_EQ(detect_contact(h, 1.0), 0);
  h(2, 9) = -1.0000001;
  EXPECT_EQ(detect_contact(h, 1.0), 1);
  h(2, 9) = 0.0;
  h(1, 3) = 50.0;  // only the latest column counts
  EXPECT_EQ(detect_contact(h, 1.0), 0);
  EXPECT_THROW(detect_contact(h, 0.0), std::invalid_argument);
}

TEST(Gate, EndpointsAreExact) {
  std::mt19937_64 rng(1);
  ad::Tape<double> tape;
  auto f = tape.constant(random_matrix(64, 4, rng));
  auto fs = tape.constant(random_matrix(64, 1, rng));
  std::vector<int> phi = {1, 0, 1, 0};
  auto g = gate_torque(f, fs, std::span<const int>(phi)).value();
  EXPECT_TRUE(g.col(0) == f.value().col(0));
  EXPECT_TRUE(g.col(1) == fs.value().col(0));
  EXPECT_TRUE(g.col(2) == f.value().col(2));
  EXPECT_TRUE(g.col(3) == fs.value().col(0));
}

TEST(Combine, CfgIdentities) {
  std::mt19937_64 rng(2);
  auto ev = random_matrix(3, 16, rng), et = random_matrix(3, 16, rng);
  std::vector<double> w0 = {0.0, 0.0}, w1 = {1.0, 1.0}, wm = {0.0, 2.5};
  EXPECT_TRUE(cfg_combine<double>(ev, et, w0, 8) == ev);
  EXPECT_LE((cfg_combine<double>(ev, et, w1, 8) - et).cwiseAbs().maxCoeff(), 1e-12);
  auto mixed = cfg_combine<double>(ev, et, wm, 8);
  EXPECT_TRUE(mixed.leftCols(8) == ev.leftCols(8));
  Matrix<double> expect = ev.rightCols(8) + 2.5 * (et.rightCols(8) - ev.rightCols(8));
  EXPECT_LE((mixed.rightCols(8) - expect).cwiseAbs().maxCoeff(), 1e-12);
  std::vector<double> wrong = {1.0};
  EXPECT_THROW(cfg_combine<double>(ev, et, wrong, 8), ValidationError);
}

TEST(Combine, MoeConvexBlend) {
  std::mt19937_64 rng(3);
  auto ev = random_matrix(3, 16, rng), et = random_matrix(3, 16, rng);
  std::vector<double> a = {1.0, 0.0}, b = {0.0, 1.0};
  auto out = moe_combine<double>(ev, et, a, b, 8);
  EXPECT_TRUE(out.leftCols(8) == ev.leftCols(8));
  EXPECT_TRUE(out.rightCols(8) == et.rightCols(8));
  std::vector<double> c = {0.3, 0.3}, d = {0.3, 0.7};
  EXPECT_THROW(moe_combine<double>(ev, et, c, d, 8), ValidationError);
  std::vector<double> e = {0.25, 0.5}, f = {0.75, 0.5};
  auto blend = moe_combine<double>(ev, et, e, f, 8);
  Matrix<double> expect = 0.25 * ev.leftCols(8) + 0.75 * et.leftCols(8);
  EXPECT_LE((blend.leftCols(8) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, ConditioningSizes) {
  ModelShape shape;
  std::mt19937_64 rng(4);
  auto obs = random_obs(shape, {1, 0}, rng);
  struct Expect {
    StrategyTag tag;
    int single, vision, torque;
  };
  for (auto e : {Expect{StrategyTag::kVisionOnly, 128, 0, 0}, Expect{StrategyTag::kConcat, 192, 0, 0},
                 Expect{StrategyTag::kGated, 192, 0, 0}, Expect{StrategyTag::kAuxGoals, 192, 0, 0},
                 Expect{StrategyTag::kMoE, 0, 128, 64}, Expect{StrategyTag::kMoERaw, 0, 128, 40},
                 Expect{StrategyTag::kMoEGated, 0, 128, 64}, Expect{StrategyTag::kGatedCFG, 0, 128, 128}}) {
    FusionModel m(make_strategy(e.tag), shape);
    auto params = m.init<double>(7);
    ad::Tape<double> tape;
    ParamBinding<double> p(tape, params, false);
    auto c = m.build_conditioning(p, obs);
    if (e.single) {
      EXPECT_EQ(c.single.rows(), e.single) << to_string(e.tag);
    } else {
      EXPECT_EQ(c.vision.rows(), e.vision) << to_string(e.tag);
      EXPECT_EQ(c.torque.rows(), e.torque) << to_string(e.tag);
    }
  }
}

TEST(Model, InitIsDeterministicAndLayoutSpecific) {
  ModelShape shape;
  for (auto t : kAllStrategies) {
    FusionModel m(make_strategy(t), shape);
    auto a = m.init<float>(42), b = m.init<float>(42), c = m.init<float>(43);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
    EXPECT_EQ(a.contains(names::kFreeSpace), uses_gate(t));
    if (uses_gate(t)) {
      EXPECT_TRUE(a.at(names::kFreeSpace).isZero());
    }
    EXPECT_EQ(a.contains("scale.l0.w"), t == StrategyTag::kGatedCFG);
    EXPECT_EQ(a.contains("router.l0.w"), is_moe(t));
    EXPECT_EQ(a.contains("enc.torque.l0.w"), uses_torque_encoder(t));
  }
}

TEST(Model, GatedCfgFreeSpaceReducesToVisionExpert) {
  ModelShape shape;
  std::mt19937_64 rng(5);
  FusionModel m(make_strategy(StrategyTag::kGatedCFG), shape);
  auto params = m.init<double>(1);
  cfusion::check::randomize(params, rng, 0.2);
  auto obs = random_obs(shape, {0, 1, 0}, rng);
  auto x = random_matrix(3, 3 * shape.horizon, rng);
  std::vector<int> steps = {3, 50, 99};
  auto f = run(m, params, obs, x, steps);
  const auto& eps = f->out.eps.value();
  const auto& ev = f->out.eps_vision->value();
  const auto& w = f->out.w_torque->value();
  EXPECT_EQ(w(0, 0), 0.0);
  EXPECT_EQ(w(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(w(0, 1), ad::softplus_scalar(f->out.w_scale->value()(0, 1)));
  EXPECT_TRUE(eps.middleCols(0, 8) == ev.middleCols(0, 8));
  EXPECT_TRUE(eps.middleCols(16, 8) == ev.middleCols(16, 8));
  // Independent recombination for the contact sample.
  const auto& et = f->out.eps_torque->value();
  Matrix<double> expect = ev.middleCols(8, 8) + w(0, 1) * (et.middleCols(8, 8) - ev.middleCols(8, 8));
  EXPECT_LE((eps.middleCols(8, 8) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, SamplingClampsGuidance) {
  ModelShape shape;
  std::mt19937_64 rng(6);
  FusionModel m(make_strategy(StrategyTag::kGatedCFG), shape);
  auto params = m.init<double>(1);
  // Force a huge raw scale through the last bias.
  params.at("scale.l2.b")(0, 0) = 100.0;
  auto obs = random_obs(shape, {1}, rng);
  auto x = random_matrix(3, shape.horizon, rng);
  std::vector<int> steps = {10};
  auto train = run(m, params, obs, x, steps, false);
  auto sample = run(m, params, obs, x, steps, true);
  EXPECT_GT(train->out.w_torque->value()(0, 0), 20.0);
  EXPECT_EQ(sample->out.w_torque->value()(0, 0), 20.0);
}

TEST(Model, MoeRoutesAreConvex) {
  ModelShape shape;
  std::mt19937_64 rng(7);
  for (auto t : {StrategyTag::kMoE, StrategyTag::kMoERaw, StrategyTag::kMoEGated}) {
    FusionModel m(make_strategy(t), shape);
    auto params = m.init<double>(2);
    cfusion::check::randomize(params, rng, 0.2);
    auto obs = random_obs(shape, {1, 0}, rng);
    auto x = random_matrix(3, 2 * shape.horizon, rng);
    std::vector<int> steps = {1, 2};
    auto f = run(m, params, obs, x, steps);
    const auto& r = f->out.route->value();
    for (int n = 0; n < 2; ++n) {
      EXPECT_NEAR(r(0, n) + r(1, n), 1.0, 1e-12);
      EXPECT_GT(r(0, n), 0.0);
      EXPECT_GT(r(1, n), 0.0);
    }
    std::vector<double> wi = {r(0, 0), r(0, 1)}, wt = {r(1, 0), r(1, 1)};
    auto expect = moe_combine<double>(f->out.eps_vision->value(), f->out.eps_torque->value(), wi, wt, 8);
    EXPECT_LE((f->out.eps.value() - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Model, AuxGoalsLossSplitsSlices) {
  ModelShape shape;
  std::mt19937_64 rng(8);
  FusionModel m(make_strategy(StrategyTag::kAuxGoals), shape);
  EXPECT_EQ(m.channels(), 7);
  auto params = m.init<double>(3);
  auto obs = random_obs(shape, {1, 1}, rng);
  auto x = random_matrix(7, 2 * shape.horizon, rng);
  auto target = random_matrix(7, 2 * shape.horizon, rng);
  std::vector<int> steps = {5, 6};
  auto f = run(m, params, obs, x, steps);
  auto l = m.loss(f->out, f->tape.constant(target));
  Matrix<double> d = f->out.eps.value() - target;
  const double act = d.topRows(3).squaredNorm() / (3.0 * 16);
  const double tor = d.bottomRows(4).squaredNorm() / (4.0 * 16);
  EXPECT_NEAR(l.action_mse, act, 1e-12);
  EXPECT_NEAR(l.torque_mse, tor, 1e-12);
  EXPECT_NEAR(l.loss.value()(0, 0), act + 0.1 * tor, 1e-12);
}

TEST(Model, RejectsMismatchedTrajectory) {
  ModelShape shape;
  std::mt19937_64 rng(9);
  FusionModel m(make_strategy(StrategyTag::kConcat), shape);
  auto params = m.init<double>(3);
  auto obs = random_obs(shape, {1}, rng);
  auto x = random_matrix(7, shape.horizon, rng);
  std::vector<int> steps = {5};
  EXPECT_THROW(run(m, params, obs, x, steps), ValidationError);
}

TEST(Model, ScalePredictorLearnsThroughCombination) {
  ModelShape shape;
  std::mt19937_64 rng(10);
  FusionModel m(make_strategy(StrategyTag::kGatedCFG), shape);
  auto params = m.init<double>(4);
  cfusion::check::randomize(params, rng, 0.1);
  auto x = random_matrix(3, 2 * shape.horizon, rng);
  auto target = random_matrix(3, 2 * shape.horizon, rng);
  std::vector<int> steps = {5, 6};
  for (std::vector<int> phi : {std::vector<int>{1, 0}, std::vector<int>{0, 0}}) {
    auto obs = random_obs(shape, phi, rng);
    auto f = run(m, params, obs, x, steps, false, true);
    auto l = m.loss(f->out, f->tape.constant(target));
    f->tape.backward(l.loss);
    auto g = f->p->gradients();
    const bool any_contact = phi[0] == 1;
    EXPECT_EQ(g.at("scale.l0.w").norm() > 0.0, any_contact);
    EXPECT_EQ(g.at("torque_denoiser.out.w").norm() > 0.0, any_contact);
    EXPECT_GT(g.at("vision_denoiser.out.w").norm(), 0.0);
    // Free-space samples carry w = 0, so f* never influences the loss here.
    EXPECT_EQ(g.at(names::kFreeSpace).norm(), 0.0);
  }
}

TEST(Model, ConcatZeroedTorqueDiffersFromVisionOnlyByLayoutOnly) {
  // With the same denoiser weights and a zeroed torque block, concat
  // conditioning collapses onto the vision+proprio columns.
  ModelShape shape;
  std::mt19937_64 rng(11);
  FusionModel concat(make_strategy(StrategyTag::kConcat), shape);
  FusionModel vision(make_strategy(StrategyTag::kVisionOnly), shape);
  auto pc = concat.init<double>(5);
  auto pv = vision.init<double>(5);
  cfusion::check::randomize(pc, rng, 0.2);
  for (auto& [name, value] : pv.tensors()) {
    std::string cname = name;
    if (cname.rfind("vision_denoiser", 0) == 0) cname = "denoiser" + cname.substr(15);
    if (cname == "denoiser.cond.w") {
      // concat order is [temb(64); f_vis(64); f_tor(64); f_prop(64)].
      const auto& w = pc.at(cname);
      value.resize(w.rows(), 192);
      value << w.leftCols(128), w.rightCols(64);
      pc.at(cname).middleCols(128, 64).setZero();
    } else {
      value = pc.at(cname);
    }
  }
  auto obs = random_obs(shape, {1, 0}, rng);
  auto x = random_matrix(3, 2 * shape.horizon, rng);
  std::vector<int> steps = {20, 70};
  auto a = run(concat, pc, obs, x, steps);
  auto b = run(vision, pv, obs, x, steps);
  EXPECT_LE((a->out.eps.value() - b->out.eps.value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, StrategyLosses) {
  for (auto t : kAllStrategies) {
    std::mt19937_64 rng(100 + static_cast<int>(t));
    for (int i = 0; i < 20; ++i) {
      auto oc = cfusion::check::strategy_loss_case(t, rng);
      auto r = cfusion::check::grad_check(oc.fn, oc.inputs, rng, oc.max_coords);
      EXPECT_LT(r.max_rel_error, 1e-4) << to_string(t) << " instance " << i << " worst " << r.worst;
    }
  }
}

TEST(Model, GatedTrainsFreeSpaceEmbedding) {
  ModelShape shape;
  std::mt19937_64 rng(12);
  FusionModel m(make_strategy(StrategyTag::kGated), shape);
  auto params = m.init<double>(4);
  cfusion::check::randomize(params, rng, 0.1);
  auto obs = random_obs(shape, {1, 0}, rng);
  auto x = random_matrix(3, 2 * shape.horizon, rng);
  auto target = random_matrix(3, 2 * shape.horizon, rng);
  std::vector<int> steps = {5, 6};
  auto f = run(m, params, obs, x, steps, false, true);
  f->tape.backward(m.loss(f->out, f->tape.constant(target)).loss);
  EXPECT_GT(f->p->gradients().at(names::kFreeSpace).norm(), 0.0);
}

TEST(Model, GatedCfgSharedExpertsIgnoreGuidance) {
  // When both experts share weights and ignore the first 64-d feature block
  // of their conditioning, eps_torque == eps_vision and any w is inert.
  ModelShape shape;
  std::mt19937_64 rng(13);
  FusionModel m(make_strategy(StrategyTag::kGatedCFG), shape);
  auto params = m.init<double>(6);
  cfusion::check::randomize(params, rng, 0.2);
  params.at("scale.l2.b")(0, 0) = 3.0;
  for (auto& [name, value] : params.tensors()) {
    if (name.rfind("torque_denoiser.", 0) == 0) value = params.at("vision_denoiser." + name.substr(16));
  }
  params.at("vision_denoiser.cond.w").middleCols(kTimeEmbedDim, kFeatureDim).setZero();
  params.at("torque_denoiser.cond.w").middleCols(kTimeEmbedDim, kFeatureDim).setZero();
  auto obs = random_obs(shape, {1, 1, 0}, rng);
  auto x = random_matrix(3, 3 * shape.horizon, rng);
  std::vector<int> steps = {4, 40, 90};
  auto f = run(m, params, obs, x, steps);
  EXPECT_GT(f->out.w_torque->value()(0, 0), 1.0);
  EXPECT_TRUE(f->out.eps_torque->value() == f->out.eps_vision->value());
  EXPECT_TRUE(f->out.eps.value() == f->out.eps_vision->value());
}

TEST(Model, VisionOnlyIgnoresTorque) {
  ModelShape shape;
  std::mt19937_64 rng(14);
  FusionModel m(make_strategy(StrategyTag::kVisionOnly), shape);
  auto params = m.init<double>(6);
  cfusion::check::randomize(params, rng, 0.2);
  auto obs = random_obs(shape, {0, 1}, rng);
  auto x = random_matrix(3, 2 * shape.horizon, rng);
  std::vector<int> steps = {4, 40};
  auto a = run(m, params, obs, x, steps);
  obs.torque = random_matrix(shape.torque_flat(), 2, rng, 10.0);
  obs.phi = {1, 0};
  auto b = run(m, params, obs, x, steps);
  EXPECT_TRUE(a->out.eps.value() == b->out.eps.value());
}

TEST(Model, GatedAbsorbsFreeSpaceTorque) {
  ModelShape shape;
  std::mt19937_64 rng(15);
  FusionModel gated(make_strategy(StrategyTag::kGated), shape);
  FusionModel concat(make_strategy(StrategyTag::kConcat), shape);
  auto params = gated.init<double>(6);
  cfusion::check::randomize(params, rng, 0.2);
  ParameterSet<double> concat_params;
  for (const auto& [name, value] : params.tensors()) {
    if (name != names::kFreeSpace) concat_params.add(name, value);
  }
  auto obs = random_obs(shape, {0, 1}, rng);
  auto x = random_matrix(3, 2 * shape.horizon, rng);
  std::vector<int> steps = {4, 40};
  auto a = run(gated, params, obs, x, steps);
  auto c = run(concat, concat_params, obs, x, steps);
  auto obs2 = obs;
  obs2.torque = random_matrix(shape.torque_flat(), 2, rng, 10.0);
  auto b = run(gated, params, obs2, x, steps);
  // Free-space sample: conditioning and prediction unaffected by torque.
  EXPECT_TRUE(a->cond.single.value().col(0) == b->cond.single.value().col(0));
  EXPECT_TRUE(a->out.eps.value().leftCols(8) == b->out.eps.value().leftCols(8));
  EXPECT_FALSE(a->out.eps.value().rightCols(8) == b->out.eps.value().rightCols(8));
  // Gated and concat share the contact path and differ only through f*.
  EXPECT_TRUE(a->out.eps.value().rightCols(8) == c->out.eps.value().rightCols(8));
  EXPECT_FALSE(a->out.eps.value().leftCols(8) == c->out.eps.value().leftCols(8));
}
