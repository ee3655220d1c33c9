#include "cfusion/harness.hpp"

#include <gtest/gtest.h>

using namespace cfusion;

namespace {

TrainConfig tiny_config(StrategyTag tag, sim::TaskId task = sim::TaskId::kWeighSort) {
  TrainConfig c;
  c.task = task;
  c.strategy = tag;
  c.demos = 4;
  c.epochs = 2;
  c.batch_size = 32;
  c.lr = 1e-3;
  c.c1 = 4;
  c.c2 = 6;
  c.cond_hidden = 8;
  return c;
}

Dataset demos(sim::TaskId task, int n, std::uint64_t seed = 1) {
  Dataset ds;
  ds.task = task;
  ds.episodes = sim::generate_demo_episodes(task, n, seed);
  return ds;
}

sim::EpisodeRecord scripted_record(std::vector<int> phases, std::vector<int> contact, bool success) {
  sim::EpisodeRecord e;
  for (int p : phases) e.phases.push_back(static_cast<sim::Phase>(p));
  for (int c : contact) e.contact_flags.push_back(static_cast<std::uint8_t>(c));
  e.success = success;
  e.steps_used = static_cast<int>(phases.size());
  return e;
}

}  // namespace

TEST(Harness, ExpertSucceedsAndZeroPolicyFails) {
  for (auto task : sim::kAllTasks) {
    ExpertPolicy expert;
    ZeroPolicy zero;
    EXPECT_EQ(run_episodes(expert, task, 20, 3, 1).successes, 20) << sim::to_string(task);
    const auto z = run_episodes(zero, task, 20, 3, 4);
    EXPECT_EQ(z.successes, 0) << sim::to_string(task);
    for (const auto& e : z.episodes) {
      EXPECT_EQ(e.steps_used, sim::kHorizonCap);
      EXPECT_EQ(e.failure_reason, sim::FailureReason::kTimeout);
    }
  }
}

TEST(Harness, EpisodeSeedsDoNotDependOnBatchSize) {
  ExpertPolicy expert;
  const auto a = run_episodes(expert, sim::TaskId::kLidOpen, 5, 9, 1);
  const auto b = run_episodes(expert, sim::TaskId::kLidOpen, 2, 9, 1);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(a.episodes[i].seed, b.episodes[i].seed);
    EXPECT_EQ(a.episodes[i].actions, b.episodes[i].actions);
  }
}

TEST(Harness, RejectsTaskMismatch) {
  EXPECT_THROW(train_policy(tiny_config(StrategyTag::kConcat, sim::TaskId::kLidOpen), demos(sim::TaskId::kWeighSort, 1)),
               ValidationError);
}

TEST(Harness, TrainingAndEvaluationAreDeterministic) {
  const auto ds = demos(sim::TaskId::kTwistPull, 4);
  const auto cfg = tiny_config(StrategyTag::kGatedCFG, sim::TaskId::kTwistPull);
  const auto a = train_policy(cfg, ds);
  const auto b = train_policy(cfg, ds);
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  EXPECT_EQ(loss_curve_csv(a.curve), loss_curve_csv(b.curve));
  const auto ea = evaluate_checkpoint(a.checkpoint, 3, 17, true);
  const auto eb = evaluate_checkpoint(b.checkpoint, 3, 17, true);
  ASSERT_EQ(ea.episodes.size(), eb.episodes.size());
  for (std::size_t i = 0; i < ea.episodes.size(); ++i) EXPECT_EQ(ea.episodes[i].actions, eb.episodes[i].actions);
  EXPECT_EQ(trace_csv(ea.trace, "gated_cfg"), trace_csv(eb.trace, "gated_cfg"));
  EXPECT_FALSE(ea.trace.empty());
}

TEST(Harness, LossDecreasesForEveryStrategy) {
  const auto ds = demos(sim::TaskId::kWeighSort, 10);
  for (auto tag : kAllStrategies) {
    auto cfg = tiny_config(tag);
    cfg.epochs = 10;
    const auto r = train_policy(cfg, ds);
    ASSERT_EQ(r.curve.size(), 10u);
    EXPECT_LT(r.curve.back().loss, r.curve.front().loss) << to_string(tag);
    for (const auto& e : r.curve) EXPECT_TRUE(std::isfinite(e.loss)) << to_string(tag);
  }
}

TEST(Harness, AuxGoalsWithZeroAlphaIsActionLoss) {
  auto cfg = tiny_config(StrategyTag::kAuxGoals);
  cfg.alpha = 0.0;
  const auto r = train_policy(cfg, demos(cfg.task, 3));
  for (const auto& e : r.curve) {
    EXPECT_NEAR(e.loss, e.action_mse, 1e-9 * std::max(1.0, e.loss));
    EXPECT_GT(e.torque_mse, 0.0);
  }
}

TEST(Harness, AuxGoalsWithZeroAlphaMatchesConcatWhenAligned) {
  // Aux weights are built from concat weights with zero input columns for
  // the torque channels. With alpha = 0 the two objectives and every shared
  // gradient then coincide on the same batch and action noise.
  const auto ds = demos(sim::TaskId::kWeighSort, 2);
  auto cfg = tiny_config(StrategyTag::kConcat);
  auto aux_cfg = cfg;
  aux_cfg.strategy = StrategyTag::kAuxGoals;
  aux_cfg.alpha = 0.0;
  const FusionModel concat(cfg.strategy_config(), cfg.model_shape());
  const FusionModel aux(aux_cfg.strategy_config(), aux_cfg.model_shape());
  const auto pc = concat.init<double>(4);
  auto pa = aux.init<double>(9);
  const int a = sim::kActionDim;
  const int ch = a + sim::kJoints;
  for (const auto& [name, m] : pc.tensors()) {
    auto& dst = pa.at(name);
    if (name == "denoiser.b1.w") {
      dst.setZero();
      for (int k = 0; k < 3; ++k) dst.middleCols(k * ch, a) = m.middleCols(k * a, a);
    } else if (name == "denoiser.out.w" || name == "denoiser.out.b") {
      dst.topRows(a) = m;
    } else {
      dst = m;
    }
  }
  const auto norm = fit_normalizer(ds);
  std::vector<const sim::ObservationWindow*> windows;
  for (int i = 0; i < 5; ++i) windows.push_back(&ds.episodes[0].observations[static_cast<std::size_t>(i) * 7]);
  const auto obs = make_obs_batch<double>(windows, norm, cfg.gate_threshold);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Matrix<double> x(ch, 5 * cfg.horizon), eps(ch, 5 * cfg.horizon);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = g(rng);
    eps.data()[i] = g(rng);
  }
  const std::vector<int> steps = {0, 20, 40, 60, 99};
  auto run = [&](const FusionModel& m, const ParameterSet<double>& params, int rows) {
    ad::Tape<double> tape;
    ParamBinding<double> p(tape, params, true);
    auto cond = m.build_conditioning(p, obs);
    Matrix<double> xs = x.topRows(rows), es = eps.topRows(rows);
    auto out = m.predict_noise(p, tape.constant(xs), std::span<const int>(steps), cond);
    auto l = m.loss(out, tape.constant(es));
    tape.backward(l.loss);
    return std::make_pair(l.loss.value()(0, 0), p.gradients());
  };
  const auto [lc, gc] = run(concat, pc, a);
  const auto [la, ga] = run(aux, pa, ch);
  EXPECT_NEAR(la, lc, 1e-12);
  for (const auto& [name, grad] : gc) {
    Matrix<double> other = ga.at(name);
    if (name == "denoiser.b1.w") {
      Matrix<double> picked(grad.rows(), grad.cols());
      for (int k = 0; k < 3; ++k) picked.middleCols(k * a, a) = other.middleCols(k * ch, a);
      other = picked;
    } else if (name == "denoiser.out.w" || name == "denoiser.out.b") {
      other = Matrix<double>(other.topRows(a));
      EXPECT_EQ(ga.at(name).bottomRows(sim::kJoints).norm(), 0.0) << name;
    }
    EXPECT_LE((other - grad).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + grad.cwiseAbs().maxCoeff())) << name;
  }
}

TEST(Harness, FreeSpaceGatedCfgSamplesLikeVisionOnly) {
  // With identical vision-side weights and sampling seed, a free-space
  // window yields the same action chunk under both strategies.
  const auto ds = demos(sim::TaskId::kWeighSort, 3);
  const auto cfg = tiny_config(StrategyTag::kGatedCFG);
  auto cfg_ck = train_policy(cfg, ds).checkpoint;
  Checkpoint vis_ck;
  vis_ck.config = cfg;
  vis_ck.config.strategy = StrategyTag::kVisionOnly;
  vis_ck.norm = cfg_ck.norm;
  FusionModel vis_model(vis_ck.config.strategy_config(), vis_ck.config.model_shape());
  const auto layout = vis_model.init<float>(0);
  for (const auto& [name, m] : layout.tensors()) {
    ASSERT_TRUE(cfg_ck.params.contains(name)) << name;
    ASSERT_EQ(cfg_ck.params.at(name).rows(), m.rows()) << name;
    ASSERT_EQ(cfg_ck.params.at(name).cols(), m.cols()) << name;
    vis_ck.params.add(name, cfg_ck.params.at(name));
  }
  // Free-space noise trips the gate on some resets; take the first that
  // does not.
  std::uint64_t seed = 21;
  while (detect_contact(sim::env_reset(sim::TaskId::kWeighSort, seed).torque_history, cfg.gate_threshold)) ++seed;
  const auto state = sim::env_reset(sim::TaskId::kWeighSort, seed);
  const auto window = sim::observe(state);
  ASSERT_FALSE(state.contact);
  std::vector<PlanRequest> req = {{0, 0, &state, &window}};
  DiffusionPolicy a(cfg_ck, 5, true);
  DiffusionPolicy b(vis_ck, 5, false);
  const auto ca = a.plan(req);
  const auto cb = b.plan(req);
  ASSERT_EQ(ca[0].size(), cb[0].size());
  for (std::size_t k = 0; k < ca[0].size(); ++k) {
    for (int d = 0; d < sim::kActionDim; ++d) EXPECT_EQ(ca[0][k][d], cb[0][k][d]);
  }
  for (const auto& row : a.trace()) EXPECT_EQ(row.w_torque, 0.0);
  EXPECT_EQ(a.trace().size(), 100u);
}

TEST(Attempts, CountsRegraspsAfterPhaseRegression) {
  // approach, contact, slip back to approach, re-contact, finish.
  const auto e = scripted_record({0, 1, 3, 3, 0, 0, 1, 3, 3}, {0, 1, 1, 1, 0, 0, 1, 1, 1}, true);
  EXPECT_EQ(count_attempts(e), 2);
  // Contact toggling without a phase regression is the same attempt.
  const auto f = scripted_record({0, 1, 1, 1, 3}, {0, 1, 0, 1, 1}, true);
  EXPECT_EQ(count_attempts(f), 1);
  const auto g = scripted_record({0, 1, 0, 1, 0, 1}, {0, 1, 0, 1, 0, 1}, false);
  EXPECT_EQ(count_attempts(g), 3);
}

TEST(Attempts, AggregationArithmetic) {
  std::vector<sim::EpisodeRecord> eps;
  eps.push_back(scripted_record({0, 1, 3}, {0, 1, 1}, true));                    // first try, 3 steps
  eps.push_back(scripted_record({0, 1, 0, 1, 3}, {0, 1, 0, 1, 1}, true));        // second try, 5 steps
  eps.push_back(scripted_record({0, 0}, {0, 0}, false));                          // failure
  const auto m = attempt_metrics(eps);
  EXPECT_EQ(m.episodes, 3);
  EXPECT_EQ(m.successes, 2);
  EXPECT_EQ(m.first_attempt_successes, 1);
  EXPECT_DOUBLE_EQ(m.first_attempt_rate(), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.avg_horizon(), (3.0 + 5.0 + sim::kHorizonCap) / 3.0);
}

TEST(Weights, SummaryAndCsv) {
  std::vector<TraceRow> rows(4);
  rows[0].phi = 1;
  rows[0].w_torque = 2.0;
  rows[1].phi = 1;
  rows[1].w_torque = 4.0;
  rows[1].env_step = 1;
  rows[2].phi = 0;
  rows[2].w_torque = 0.0;
  rows[3].phi = 0;  // no torque-side weight: ignored
  const auto s = analyze_weights(rows, "gated_cfg");
  EXPECT_EQ(s.contact_rows, 2);
  EXPECT_EQ(s.free_rows, 1);
  EXPECT_DOUBLE_EQ(s.contact_mean, 3.0);
  EXPECT_EQ(s.free_mean, 0.0);
  EXPECT_TRUE(std::isinf(s.ratio()));
  EXPECT_DOUBLE_EQ(s.delta(), 3.0);

  const auto text = trace_csv(rows, "gated_cfg");
  const auto [back, strategy] = parse_trace_csv(text, "trace");
  EXPECT_EQ(strategy, "gated_cfg");
  ASSERT_EQ(back.size(), rows.size());
  EXPECT_EQ(back[1].w_torque, 4.0);
  EXPECT_TRUE(std::isnan(back[3].w_torque));
  EXPECT_THROW(parse_trace_csv("bad header\n", "trace"), FormatError);

  const auto csv = weights_csv(rows, "gated_cfg");
  EXPECT_NE(csv.find("gated_cfg,0,1,2,1"), std::string::npos) << csv;
  EXPECT_NE(csv.find("gated_cfg,1,1,4,1"), std::string::npos) << csv;
}
