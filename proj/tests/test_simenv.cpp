#include "cfusion/simenv.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace cfusion;
using namespace cfusion::sim;

namespace {

Action expert(const WorldState& s, const ObservationWindow&) { return scripted_expert(s); }

// Steps the expert until the predicate holds (or the episode ends).
template <typename Pred>
WorldState run_expert_until(WorldState s, Pred pred, const SensorConfig& cfg = {}) {
  while (!s.done && !pred(s)) s = env_step(s, scripted_expert(s), cfg).state;
  return s;
}

// Two-sample Kolmogorov-Smirnov test, asymptotic p-value.
double ks_p_value(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(double(i) / a.size() - double(j) / b.size()));
  }
  const double n = double(a.size()) * b.size() / (a.size() + b.size());
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

TEST(EnvReset, SameSeedIsBitwiseIdentical) {
  const auto a = env_reset(TaskId::kWeighSort, 7);
  const auto b = env_reset(TaskId::kWeighSort, 7);
  EXPECT_TRUE(a == b);
  EXPECT_TRUE(observe(a) == observe(b));
}

TEST(EnvReset, WeighSortLatentIsBalanced) {
  int heavy = 0;
  for (int seed = 0; seed < 1000; ++seed) heavy += env_reset(TaskId::kWeighSort, seed).latent_class;
  EXPECT_GE(heavy, 475);
  EXPECT_LE(heavy, 525);
}

TEST(EnvReset, InitialStateIsPreContact) {
  for (auto task : kAllTasks) {
    const auto s = env_reset(task, 0);
    EXPECT_FALSE(s.contact);
    EXPECT_EQ(s.phase, Phase::kApproach);
    EXPECT_EQ(s.step_count, 0);
  }
}

TEST(EnvStep, ZeroActionLeavesPoseUnchanged) {
  for (auto task : kAllTasks) {
    const auto s = env_reset(task, 3);
    const auto r = env_step(s, Action{});
    EXPECT_EQ(r.state.pose, s.pose);
    EXPECT_FALSE(r.done);
  }
}

TEST(EnvStep, RejectsNonFiniteAction) {
  const auto s = env_reset(TaskId::kLidOpen, 1);
  EXPECT_THROW(env_step(s, Action{0.0, NAN, 0.0}), ValidationError);
  EXPECT_THROW(env_step(s, Action{INFINITY, 0.0, 0.0}), ValidationError);
}

TEST(EnvStep, TorqueHistoryShiftsLeft) {
  const auto s = env_reset(TaskId::kWeighSort, 11);
  const auto r = env_step(s, Action{0.01, 0.0, 0.0});
  EXPECT_EQ(r.window.torque_history.leftCols(kHistory - 1), s.torque_history.rightCols(kHistory - 1));
}

TEST(EnvStep, PrematurePullAborts) {
  auto s = run_expert_until(env_reset(TaskId::kTwistPull, 0), [](const WorldState& w) { return w.contact; });
  ASSERT_TRUE(s.contact);
  ASSERT_LT(s.object_angle, s.latent - k::kAngleTolerance);
  for (int i = 0; i < 3 && !s.done; ++i) s = env_step(s, Action{0.0, -0.04, 0.0}).state;
  EXPECT_TRUE(s.done);
  EXPECT_FALSE(s.success);
  EXPECT_EQ(s.failure, FailureReason::kAbort);
}

TEST(EnvStep, PullWithinToleranceOfStopIsAccepted) {
  auto s = run_expert_until(env_reset(TaskId::kTwistPull, 4), [](const WorldState& w) {
    return w.contact && w.object_angle >= w.latent - 0.5 * k::kAngleTolerance;
  });
  ASSERT_FALSE(s.done);
  s = env_step(s, Action{0.0, -0.04, 0.0}).state;
  EXPECT_EQ(s.phase, Phase::kTransport);
  EXPECT_FALSE(s.done);
}

TEST(EnvStep, EarlyLidLiftAborts) {
  auto s = run_expert_until(env_reset(TaskId::kLidOpen, 2), [](const WorldState& w) { return w.contact; });
  ASSERT_TRUE(s.contact);
  s = env_step(s, Action{0.0, 0.04, 0.0}).state;
  EXPECT_TRUE(s.done);
  EXPECT_EQ(s.failure, FailureReason::kAbort);
}

TEST(EnvStep, MisalignedDescentCollides) {
  auto s = env_reset(TaskId::kWeighSort, 5);
  s.pose = {s.object[0] + 0.05, s.object[1], 0.15};
  s = env_step(s, Action{0.0, 0.0, -0.04}).state;
  EXPECT_TRUE(s.done);
  EXPECT_EQ(s.failure, FailureReason::kAbort);
}

TEST(EnvStep, WrongPlateAborts) {
  auto s = run_expert_until(env_reset(TaskId::kWeighSort, 9),
                            [](const WorldState& w) { return w.phase == Phase::kTransport; });
  // Carry to the plate of the other class.
  const auto plate = s.latent_class == 0 ? k::kHeavyPlate : k::kLightPlate;
  while (!s.done) {
    Action a{std::clamp(plate[0] - s.pose[0], -0.04, 0.04), std::clamp(plate[1] - s.pose[1], -0.04, 0.04), 0.0};
    if (std::hypot(plate[0] - s.pose[0], plate[1] - s.pose[1]) < 1e-6) a[2] = -0.04;
    s = env_step(s, a).state;
  }
  EXPECT_FALSE(s.success);
  EXPECT_EQ(s.failure, FailureReason::kAbort);
}

TEST(EnvStep, LateralDriftDuringTwistRegressesPhase) {
  auto s = run_expert_until(env_reset(TaskId::kLidOpen, 6), [](const WorldState& w) { return w.contact; });
  ASSERT_EQ(s.phase, Phase::kContactWork);
  s = env_step(s, Action{0.04, 0.0, 0.0}).state;
  EXPECT_FALSE(s.contact);
  EXPECT_EQ(s.phase, Phase::kApproach);
  EXPECT_FALSE(s.done);
  // The expert can re-engage and still finish.
  s = run_expert_until(s, [](const WorldState&) { return false; });
  EXPECT_TRUE(s.success);
}

TEST(EnvStep, ZeroPolicyTimesOut) {
  for (auto task : kAllTasks) {
    auto rec = rollout(task, 1, [](const WorldState&, const ObservationWindow&) { return Action{}; });
    EXPECT_FALSE(rec.success);
    EXPECT_EQ(rec.failure_reason, FailureReason::kTimeout);
    EXPECT_EQ(rec.steps_used, kHorizonCap);
  }
}

TEST(SynthesizeTorque, QuietFreeSpaceIsZero) {
  SensorConfig cfg;
  cfg.sigma_free = 0.0;
  auto s = env_reset(TaskId::kWeighSort, 0);
  SplitMix64 gen(1);
  const auto tau = synthesize_torque(s, Action{}, gen, cfg);
  for (double v : tau) EXPECT_EQ(v, 0.0);
}

TEST(SynthesizeTorque, WeighSortGapMatchesMassDifference) {
  SensorConfig cfg;
  cfg.sigma_contact = 0.0;
  auto s = env_reset(TaskId::kWeighSort, 0);
  s.contact = true;
  s.phase = Phase::kEngage;
  SplitMix64 gen(1);
  s.latent = k::kHeavyMass;
  const auto heavy = synthesize_torque(s, Action{}, gen, cfg);
  s.latent = k::kLightMass;
  const auto light = synthesize_torque(s, Action{}, gen, cfg);
  double max_gap = 0.0;
  for (int j = 0; j < kJoints; ++j) {
    const double expected = (k::kHeavyMass - k::kLightMass) * k::kGravity * k::kGravityLever[j];
    EXPECT_NEAR(heavy[j] - light[j], expected, 1e-12);
    max_gap = std::max(max_gap, heavy[j] - light[j]);
  }
  EXPECT_NEAR(max_gap, signal_gap(TaskId::kWeighSort), 1e-12);
}

TEST(SynthesizeTorque, ContactNoiseIsTenPercentOfSmallestGap) {
  double smallest = 1e9;
  for (auto task : kAllTasks) smallest = std::min(smallest, signal_gap(task));
  EXPECT_NEAR(SensorConfig{}.sigma_contact, 0.1 * smallest, 1e-12);
}

TEST(SynthesizeTorque, PreContactTorqueCarriesNoLatent) {
  std::vector<double> heavy, light;
  for (int seed = 0; heavy.size() < 10000 || light.size() < 10000; ++seed) {
    auto rec = rollout(TaskId::kWeighSort, seed, expert);
    auto& bucket = rec.latent_class == 1 ? heavy : light;
    for (std::size_t t = 0; t < rec.observations.size(); ++t) {
      if (rec.contact_flags[t]) break;
      const auto col = rec.observations[t].torque_history.col(kHistory - 1);
      for (int j = 0; j < kJoints; ++j) bucket.push_back(col(j));
    }
  }
  heavy.resize(10000);
  light.resize(10000);
  EXPECT_GT(ks_p_value(heavy, light), 0.01);
}

TEST(SynthesizeTorque, FreeSpaceFalsePositiveRateNearTenPercent) {
  long free_steps = 0, over = 0;
  for (auto task : kAllTasks) {
    for (int seed = 0; seed < 300; ++seed) {
      auto rec = rollout(task, 5000 + seed, expert);
      for (std::size_t t = 0; t < rec.observations.size(); ++t) {
        if (rec.contact_flags[t]) continue;
        ++free_steps;
        over += rec.observations[t].torque_history.col(kHistory - 1).cwiseAbs().maxCoeff() > 1.0;
      }
    }
  }
  const double rate = double(over) / free_steps;
  EXPECT_GT(rate, 0.07);
  EXPECT_LT(rate, 0.13);
}

TEST(SynthesizeTorque, ContactTorqueIsInjectiveInLatent) {
  SensorConfig quiet;
  quiet.sigma_contact = 0.0;
  SplitMix64 gen(0);
  for (auto task : {TaskId::kTwistPull, TaskId::kLidOpen}) {
    auto s = env_reset(task, 0);
    s.contact = true;
    s.phase = Phase::kContactWork;
    s.object_angle = 0.7;
    double previous = -1.0;
    for (double latent = 0.8; latent <= 1.6; latent += 0.05) {
      s.latent = latent;
      const double tau = synthesize_torque(s, Action{}, gen, quiet)[3];
      if (previous >= 0.0) {
        EXPECT_LT(tau, previous);  // strictly monotone
      }
      previous = tau;
    }
  }
}

TEST(Invariants, VisualStreamIgnoresLatentUntilContact) {
  for (auto task : kAllTasks) {
    for (int seed = 0; seed < 20; ++seed) {
      auto a = env_reset(task, seed);
      auto b = a;
      b.latent_class = 1 - a.latent_class;
      b.latent = task == TaskId::kWeighSort ? (b.latent_class ? k::kHeavyMass : k::kLightMass) : a.latent + 0.3;
      while (!a.contact && !b.contact && !a.done) {
        const auto wa = observe(a), wb = observe(b);
        ASSERT_EQ(wa.visual, wb.visual);
        ASSERT_EQ(wa.proprio, wb.proprio);
        ASSERT_EQ(wa.torque_history, wb.torque_history);
        a = env_step(a, scripted_expert(a)).state;
        b = env_step(b, scripted_expert(b)).state;
      }
      EXPECT_EQ(a.contact, b.contact);
    }
  }
}

TEST(ScriptedExpert, HeavyBottleGoesToHeavyPlate) {
  auto s = env_reset(TaskId::kWeighSort, 0);
  s.latent_class = 1;
  s.latent = k::kHeavyMass;
  s = run_expert_until(s, [](const WorldState& w) { return w.phase == Phase::kTransport; });
  const auto a = scripted_expert(s);
  EXPECT_GT(a[0] * (k::kHeavyPlate[0] - s.pose[0]), 0.0);
}

TEST(ScriptedExpert, SwitchesFromRotateToPullAtStop) {
  auto s = run_expert_until(env_reset(TaskId::kTwistPull, 8), [](const WorldState& w) { return w.contact; });
  s.object_angle = s.latent - 0.05;
  auto a = scripted_expert(s);
  EXPECT_GT(a[2], 0.0);
  EXPECT_EQ(a[1], 0.0);
  s.object_angle = s.latent;
  a = scripted_expert(s);
  EXPECT_EQ(a[2], 0.0);
  EXPECT_LT(a[1], 0.0);
}

TEST(ScriptedExpert, SucceedsOnHundredSeedsPerTask) {
  for (auto task : kAllTasks) {
    for (int seed = 0; seed < 100; ++seed) {
      auto rec = rollout(task, seed, expert);
      EXPECT_TRUE(rec.success) << to_string(task) << " seed " << seed;
      EXPECT_EQ(rec.failure_reason, FailureReason::kNone);
      EXPECT_EQ(rec.observations.size(), static_cast<std::size_t>(rec.steps_used));
      EXPECT_EQ(rec.actions.size(), rec.contact_flags.size());
      EXPECT_LE(rec.steps_used, kHorizonCap);
    }
  }
}

TEST(GenerateDemos, RejectsEmptyRequest) {
  EXPECT_THROW(generate_demo_episodes(TaskId::kTwistPull, 0, 0), ValidationError);
}

TEST(GenerateDemos, AllEpisodesSucceedAndAreDeterministic) {
  const auto a = generate_demo_episodes(TaskId::kWeighSort, 200, 0);
  ASSERT_EQ(a.size(), 200u);
  for (const auto& e : a) EXPECT_TRUE(e.success);
  const auto b = generate_demo_episodes(TaskId::kWeighSort, 3, 0);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].actions, b[i].actions);
  }
}
