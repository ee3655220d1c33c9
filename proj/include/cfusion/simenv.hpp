#pragma once

// Synthetic contact-rich manipulation tasks with a joint-torque sensor model
// and privileged scripted experts.
//
// Each task hides one latent quantity that is observable only through the
// torque channel once contact is established:
//   WeighSort  carry one of two visually identical bottles to the plate that
//              matches its (hidden) mass class.
//   TwistPull  rotate a twist-lock connector to its hidden stop angle, then
//              pull it out axially. Pulling early aborts.
//   LidOpen    twist a lid until it unlocks at a hidden angle, then lift.
//              Lifting before the unlock aborts.

#include "cfusion/errors.hpp"
#include "cfusion/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cfusion::sim {

inline constexpr int kJoints = 4;       // simulated torque-sensing joints (D)
inline constexpr int kHistory = 10;     // torque history length (H)
inline constexpr int kActionDim = 3;    // A
inline constexpr int kVisualDim = 8;    // V
inline constexpr int kHorizonCap = 120;

enum class TaskId : std::uint8_t { kWeighSort = 0, kTwistPull = 1, kLidOpen = 2 };
inline constexpr std::array<TaskId, 3> kAllTasks = {TaskId::kWeighSort, TaskId::kTwistPull, TaskId::kLidOpen};

enum class Phase : std::uint8_t { kApproach = 0, kEngage = 1, kContactWork = 2, kTransport = 3 };
enum class FailureReason : std::uint8_t { kNone = 0, kTimeout = 1, kAbort = 2 };

inline std::string_view to_string(TaskId task) {
  switch (task) {
    case TaskId::kWeighSort: return "weigh_sort";
    case TaskId::kTwistPull: return "twist_pull";
    case TaskId::kLidOpen: return "lid_open";
  }
  return "unknown";
}

inline TaskId parse_task(std::string_view s) {
  for (auto t : kAllTasks) {
    if (to_string(t) == s) return t;
  }
  throw ValidationError("unknown task '" + std::string(s) + "' (valid: weigh_sort, twist_pull, lid_open)");
}

inline std::string_view to_string(FailureReason r) {
  switch (r) {
    case FailureReason::kNone: return "none";
    case FailureReason::kTimeout: return "timeout";
    case FailureReason::kAbort: return "abort";
  }
  return "unknown";
}

using Action = std::array<double, kActionDim>;
using JointVector = std::array<double, kJoints>;
using TorqueHistory = Eigen::Matrix<double, kJoints, kHistory>;

struct ObservationWindow {
  std::array<double, kVisualDim> visual{};
  TorqueHistory torque_history = TorqueHistory::Zero();  // most recent column last
  JointVector proprio{};

  bool operator==(const ObservationWindow&) const = default;
};

/// Sensor model. Defaults are the calibrated benchmark values; tests zero
/// individual noise sources.
struct SensorConfig {
  double sigma_free = 0.43;       // per-joint free-space noise (N*m)
  double sigma_contact = 0.0125;  // 10% of the smallest task signal gap
  double inertial_gain = 0.35;    // N*m per unit normalized command change
};

// Geometry and signal constants shared by the tasks.
namespace k {
inline constexpr double kGravity = 9.81;
inline constexpr double kLightMass = 0.25;
inline constexpr double kHeavyMass = 0.75;
inline constexpr JointVector kGravityLever = {0.15, 0.9, 0.55, 0.2};
inline constexpr JointVector kRotationLever = {0.1, 0.25, 0.45, 1.0};
inline constexpr JointVector kAxialLever = {0.3, 1.0, 0.4, 0.1};
inline constexpr double kGripBase = 1.5;         // resistance floor while engaged
inline constexpr double kRampGain = 3.0;         // resistance added across the ramp
inline constexpr double kStallGain = 4.0;        // per unit of blocked normalized rotation
inline constexpr double kTwistRampWidth = 2.4;   // rad, wider than any stop angle
inline constexpr double kLidRampWidth = 2.0;
inline constexpr double kLidReleased = 1.2;      // resistance after the lid unlocks
inline constexpr double kPullResistance = 2.0;
inline constexpr double kLidWeight = 1.6;
inline constexpr double kAngleTolerance = 0.1;   // rad short of the stop that still counts
inline constexpr double kAxialTolerance = 0.015; // axial travel allowed before the rule fires
inline constexpr double kGraspRadius = 0.035;
inline constexpr double kCollisionRadius = 0.07;
inline constexpr double kPlateRadius = 0.06;
inline constexpr double kCarryHeight = 0.2;
inline constexpr double kReleaseHeight = 0.07;
inline constexpr double kBottleTop = 0.12;
inline constexpr double kGraspHeight = 0.06;
inline constexpr double kMinHeight = 0.05;
inline constexpr double kExtractDistance = 0.12;
inline constexpr double kLidHeight = 0.1;
inline constexpr double kOverTwist = 0.6;
inline constexpr std::array<double, 2> kLightPlate = {-0.3, 0.3};
inline constexpr std::array<double, 2> kHeavyPlate = {0.3, 0.3};
inline constexpr double kStopMin = 1.0, kStopMax = 2.0;
inline constexpr double kAngleEps = 1e-9;
inline constexpr double kSlipRetreat = 0.03;
inline constexpr double kUnlockMin = 0.8, kUnlockMax = 1.6;
}  // namespace k

/// Magnitude of the smallest latent-dependent torque difference each task is
/// required to resolve (infinity norm over joints).
inline double signal_gap(TaskId task) {
  switch (task) {
    case TaskId::kWeighSort:
      return (k::kHeavyMass - k::kLightMass) * k::kGravity * k::kGravityLever[1];
    case TaskId::kTwistPull:
      return k::kRampGain * k::kAngleTolerance / k::kTwistRampWidth * k::kRotationLever[3];
    case TaskId::kLidOpen:
      return k::kRampGain * k::kAngleTolerance / k::kLidRampWidth * k::kRotationLever[3];
  }
  return 0.0;
}

inline Action action_bounds(TaskId task) {
  switch (task) {
    case TaskId::kWeighSort: return {0.04, 0.04, 0.04};
    case TaskId::kTwistPull: return {0.04, 0.04, 0.15};
    case TaskId::kLidOpen: return {0.04, 0.04, 0.15};
  }
  return {0.0, 0.0, 0.0};
}

struct WorldState {
  TaskId task = TaskId::kWeighSort;
  // WeighSort (x, y, z); TwistPull (lateral u, axial w, wrist angle);
  // LidOpen (x, z, wrist angle).
  std::array<double, 3> pose{};
  Phase phase = Phase::kApproach;
  int latent_class = 0;  // WeighSort: 0 light, 1 heavy
  double latent = 0.0;   // WeighSort mass (kg); stop / unlock angle (rad)
  std::array<double, 3> object{};  // visible object position
  double object_angle = 0.0;       // rotation applied to the twisted part
  double engage_ref = 0.0;         // axial/vertical coordinate at engagement
  double blocked_rotation = 0.0;   // normalized rotation pushed into a hard stop
  bool contact = false;
  int step_count = 0;
  Action last_command{};  // normalized previous command
  bool done = false;
  bool success = false;
  FailureReason failure = FailureReason::kNone;
  SplitMix64 noise;
  TorqueHistory torque_history = TorqueHistory::Zero();

  bool operator==(const WorldState& o) const {
    return task == o.task && pose == o.pose && phase == o.phase && latent_class == o.latent_class &&
           latent == o.latent && object == o.object && object_angle == o.object_angle &&
           engage_ref == o.engage_ref && blocked_rotation == o.blocked_rotation && contact == o.contact &&
           step_count == o.step_count && last_command == o.last_command && done == o.done &&
           success == o.success && failure == o.failure && noise == o.noise &&
           torque_history == o.torque_history;
  }
};

// ---------------------------------------------------------------------------
// Torque synthesis.

namespace detail {
inline constexpr double kInertialMap[kJoints][kActionDim] = {
    {0.8, 0.1, 0.0}, {0.2, 0.9, 0.1}, {0.1, 0.3, 0.6}, {0.0, 0.1, 0.9}};

inline JointVector scaled(const JointVector& lever, double s) {
  JointVector out{};
  for (int j = 0; j < kJoints; ++j) out[j] = lever[j] * s;
  return out;
}

inline double ramp(double remaining, double width) { return std::clamp(1.0 - remaining / width, 0.0, 1.0); }
}  // namespace detail

/// Noise-free contact torque for the current state (zero when not in contact).
inline JointVector contact_signal(const WorldState& s) {
  if (!s.contact) return JointVector{};
  switch (s.task) {
    case TaskId::kWeighSort:
      return detail::scaled(k::kGravityLever, s.latent * k::kGravity);
    case TaskId::kTwistPull: {
      if (s.phase == Phase::kTransport) return detail::scaled(k::kAxialLever, k::kPullResistance);
      const double r = k::kGripBase + k::kRampGain * detail::ramp(s.latent - s.object_angle, k::kTwistRampWidth) +
                       k::kStallGain * s.blocked_rotation;
      return detail::scaled(k::kRotationLever, r);
    }
    case TaskId::kLidOpen: {
      if (s.phase == Phase::kTransport) return detail::scaled(k::kAxialLever, k::kLidWeight);
      double r = s.object_angle >= s.latent - k::kAngleEps
                     ? k::kLidReleased
                     : k::kGripBase + k::kRampGain * detail::ramp(s.latent - s.object_angle, k::kLidRampWidth);
      r += k::kStallGain * s.blocked_rotation;
      return detail::scaled(k::kRotationLever, r);
    }
  }
  return JointVector{};
}

/// One torque column. Free space: inertial term plus noise with sigma_free
/// (independent of the latent). Contact: task signal plus noise with
/// sigma_contact. `accel` is the change of the normalized command.
template <typename Gen>
JointVector synthesize_torque(const WorldState& s, const Action& accel, Gen& gen, const SensorConfig& cfg) {
  JointVector tau{};
  if (!s.contact) {
    for (int j = 0; j < kJoints; ++j) {
      double v = 0.0;
      for (int a = 0; a < kActionDim; ++a) v += detail::kInertialMap[j][a] * accel[a];
      tau[j] = cfg.inertial_gain * v;
    }
    for (int j = 0; j < kJoints; ++j) tau[j] += cfg.sigma_free * gaussian(gen);
    return tau;
  }
  tau = contact_signal(s);
  for (int j = 0; j < kJoints; ++j) tau[j] += cfg.sigma_contact * gaussian(gen);
  return tau;
}

// ---------------------------------------------------------------------------
// Observations.

inline ObservationWindow observe(const WorldState& s) {
  ObservationWindow w;
  w.visual.fill(0.0);
  w.visual[0] = s.pose[0];
  w.visual[1] = s.pose[1];
  w.visual[2] = s.pose[2];
  switch (s.task) {
    case TaskId::kWeighSort:
      w.visual[3] = s.object[0];
      w.visual[4] = s.object[1];
      w.visual[5] = s.object[2];
      w.visual[6] = s.object[0] - s.pose[0];
      w.visual[7] = s.object[1] - s.pose[1];
      break;
    case TaskId::kTwistPull:
    case TaskId::kLidOpen:
      w.visual[3] = s.object[0];
      w.visual[4] = s.object[1];
      w.visual[5] = s.object_angle;
      w.visual[6] = s.object[0] - s.pose[0];
      w.visual[7] = s.object[1] - s.pose[1];
      break;
  }
  w.torque_history = s.torque_history;
  w.proprio = {s.pose[0], s.pose[1], s.pose[2], s.contact ? 1.0 : 0.0};
  return w;
}

// ---------------------------------------------------------------------------
// Reset and step.

inline WorldState env_reset(TaskId task, std::uint64_t seed, const SensorConfig& cfg = {}) {
  WorldState s;
  s.task = task;
  auto layout = make_rng(seed, StreamDomain::kReset);
  auto latent = make_rng(seed, StreamDomain::kLatent);
  s.noise = SplitMix64(derive_seed(seed, StreamDomain::kSensorNoise));
  switch (task) {
    case TaskId::kWeighSort:
      s.pose = {uniform(layout, -0.05, 0.05), -0.35 + uniform(layout, -0.05, 0.05), 0.25};
      s.object = {uniform(layout, -0.1, 0.1), uniform(layout, -0.05, 0.05), 0.0};
      s.latent_class = std::uniform_int_distribution<int>(0, 1)(latent);
      s.latent = s.latent_class == 0 ? k::kLightMass : k::kHeavyMass;
      break;
    case TaskId::kTwistPull:
      s.pose = {uniform(layout, -0.05, 0.05), -0.3 + uniform(layout, -0.03, 0.03), 0.0};
      s.object = {uniform(layout, -0.08, 0.08), 0.0, 0.0};
      s.latent = uniform(latent, k::kStopMin, k::kStopMax);
      break;
    case TaskId::kLidOpen:
      s.pose = {uniform(layout, -0.05, 0.05), 0.35 + uniform(layout, -0.03, 0.03), 0.0};
      s.object = {uniform(layout, -0.08, 0.08), 0.0, 0.0};
      s.latent = uniform(latent, k::kUnlockMin, k::kUnlockMax);
      break;
  }
  const Action still{};
  for (int h = 0; h < kHistory; ++h) {
    const auto tau = synthesize_torque(s, still, s.noise, cfg);
    for (int j = 0; j < kJoints; ++j) s.torque_history(j, h) = tau[j];
  }
  return s;
}

struct StepResult {
  WorldState state;
  ObservationWindow window;
  bool done = false;
  bool success = false;
};

namespace detail {

inline double clip(double v, double bound) { return std::clamp(v, -bound, bound); }

inline void finish(WorldState& s, bool success, FailureReason reason) {
  s.done = true;
  s.success = success;
  s.failure = success ? FailureReason::kNone : reason;
}

inline void step_weigh_sort(WorldState& s, const Action& a) {
  auto& p = s.pose;
  switch (s.phase) {
    case Phase::kApproach: {
      p[0] += a[0];
      p[1] += a[1];
      p[2] = std::max(k::kMinHeight, p[2] + a[2]);
      const double d = std::hypot(p[0] - s.object[0], p[1] - s.object[1]);
      if (p[2] <= k::kBottleTop && d > k::kGraspRadius && d < k::kCollisionRadius) {
        finish(s, false, FailureReason::kAbort);
      } else if (p[2] <= k::kGraspHeight && d <= k::kGraspRadius) {
        s.contact = true;
        s.phase = Phase::kEngage;
        s.engage_ref = p[2];
      }
      break;
    }
    case Phase::kEngage:
    case Phase::kTransport: {
      p[0] += a[0];
      p[1] += a[1];
      p[2] = std::max(k::kMinHeight, p[2] + a[2]);
      s.object = {p[0], p[1], p[2] - k::kMinHeight};
      if (s.phase == Phase::kEngage) {
        if (p[2] >= k::kCarryHeight) s.phase = Phase::kTransport;
        break;
      }
      if (p[2] <= k::kReleaseHeight) {
        const auto& mine = s.latent_class == 0 ? k::kLightPlate : k::kHeavyPlate;
        const auto& other = s.latent_class == 0 ? k::kHeavyPlate : k::kLightPlate;
        const bool on_mine = std::hypot(p[0] - mine[0], p[1] - mine[1]) <= k::kPlateRadius;
        const bool on_other = std::hypot(p[0] - other[0], p[1] - other[1]) <= k::kPlateRadius;
        s.contact = false;
        finish(s, on_mine && !on_other, FailureReason::kAbort);
      }
      break;
    }
    case Phase::kContactWork:
      break;
  }
}

// TwistPull and LidOpen share the engage -> twist -> extract structure; they
// differ in which axis extracts and what the latent angle means.
inline void step_twist(WorldState& s, const Action& a, const Action& bounds) {
  auto& p = s.pose;
  const bool lid = s.task == TaskId::kLidOpen;
  // Axis conventions: p[0] lateral, p[1] extraction axis (w for TwistPull,
  // z for LidOpen), p[2] wrist angle.
  const double approach_sign = lid ? -1.0 : 1.0;   // direction of travel towards the object
  const double contact_plane = lid ? k::kLidHeight : 0.0;
  s.blocked_rotation = 0.0;
  switch (s.phase) {
    case Phase::kApproach: {
      p[0] += a[0];
      p[2] += a[2];
      double axial = p[1] + a[1];
      if (approach_sign * (axial - contact_plane) > 0.0) axial = contact_plane;  // object surface
      p[1] = axial;
      const double lateral = std::abs(p[0] - s.object[0]);
      if (approach_sign * (p[1] - contact_plane) >= -0.01) {
        if (lateral <= k::kGraspRadius) {
          s.contact = true;
          s.phase = Phase::kContactWork;
          s.engage_ref = p[1];
        } else if (lateral < k::kCollisionRadius) {
          finish(s, false, FailureReason::kAbort);
        }
      }
      break;
    }
    case Phase::kContactWork: {
      p[0] += a[0];
      if (std::abs(p[0] - s.object[0]) > k::kGraspRadius) {
        // Lost the grasp: the gripper slides off the object and backs away;
        // twist progress is kept.
        s.contact = false;
        s.phase = Phase::kApproach;
        p[1] = contact_plane - approach_sign * k::kSlipRetreat;
        break;
      }
      const double limit = lid ? s.latent + k::kOverTwist : s.latent;
      const double wanted = s.object_angle + a[2];
      const double reached = std::clamp(wanted, 0.0, limit);
      s.blocked_rotation = std::max(0.0, wanted - limit) / bounds[2];
      p[2] += reached - s.object_angle;
      s.object_angle = reached;

      double axial = p[1] + a[1];
      // Cannot push further into the object than the engagement point.
      if (approach_sign * (axial - s.engage_ref) > 0.0) axial = s.engage_ref;
      p[1] = axial;
      const double withdrawn = -approach_sign * (p[1] - s.engage_ref);
      if (withdrawn > k::kAxialTolerance) {
        const bool released = lid ? s.object_angle >= s.latent - k::kAngleEps
                                  : s.object_angle >= s.latent - k::kAngleTolerance;
        if (released) {
          s.phase = Phase::kTransport;
        } else {
          finish(s, false, FailureReason::kAbort);
        }
      }
      break;
    }
    case Phase::kTransport: {
      p[0] += a[0];
      p[1] += a[1];
      const double withdrawn = -approach_sign * (p[1] - s.engage_ref);
      s.object[1] = std::max(0.0, withdrawn);
      if (withdrawn >= k::kExtractDistance) {
        finish(s, true, FailureReason::kNone);
      }
      break;
    }
    case Phase::kEngage:
      break;
  }
}

}  // namespace detail

inline bool is_finite(const Action& a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

/// Advances one control tick. The input state is not modified.
inline StepResult env_step(const WorldState& state, const Action& action, const SensorConfig& cfg = {}) {
  if (!is_finite(action)) throw ValidationError("env_step: non-finite action");
  if (state.done) throw ValidationError("env_step: episode already finished");
  WorldState s = state;
  const Action bounds = action_bounds(s.task);
  Action a{};
  Action command{};
  for (int i = 0; i < kActionDim; ++i) {
    a[i] = detail::clip(action[i], bounds[i]);
    command[i] = a[i] / bounds[i];
  }
  if (s.task == TaskId::kWeighSort) {
    detail::step_weigh_sort(s, a);
  } else {
    detail::step_twist(s, a, bounds);
  }
  ++s.step_count;
  if (!s.done && s.step_count >= kHorizonCap) detail::finish(s, false, FailureReason::kTimeout);

  Action accel{};
  for (int i = 0; i < kActionDim; ++i) accel[i] = command[i] - s.last_command[i];
  s.last_command = command;
  const auto tau = synthesize_torque(s, accel, s.noise, cfg);
  TorqueHistory shifted;
  shifted.leftCols(kHistory - 1) = s.torque_history.rightCols(kHistory - 1);
  for (int j = 0; j < kJoints; ++j) shifted(j, kHistory - 1) = tau[j];
  s.torque_history = shifted;

  StepResult r;
  r.window = observe(s);
  r.done = s.done;
  r.success = s.success;
  r.state = std::move(s);
  return r;
}

// ---------------------------------------------------------------------------
// Scripted expert. Reads the latent directly.

inline Action scripted_expert(const WorldState& s) {
  const Action b = action_bounds(s.task);
  auto toward = [](double from, double to, double bound) { return std::clamp(to - from, -bound, bound); };
  Action a{};
  const auto& p = s.pose;
  switch (s.task) {
    case TaskId::kWeighSort: {
      if (s.phase == Phase::kApproach) {
        a[0] = toward(p[0], s.object[0], b[0]);
        a[1] = toward(p[1], s.object[1], b[1]);
        const double d = std::hypot(p[0] + a[0] - s.object[0], p[1] + a[1] - s.object[1]);
        if (d < 1e-3) a[2] = toward(p[2], k::kMinHeight, b[2]);
      } else if (s.phase == Phase::kEngage) {
        a[2] = b[2];
      } else {
        const auto& plate = s.latent_class == 0 ? k::kLightPlate : k::kHeavyPlate;
        a[0] = toward(p[0], plate[0], b[0]);
        a[1] = toward(p[1], plate[1], b[1]);
        const double d = std::hypot(p[0] + a[0] - plate[0], p[1] + a[1] - plate[1]);
        if (d < 1e-3) a[2] = -b[2];
      }
      break;
    }
    case TaskId::kTwistPull:
    case TaskId::kLidOpen: {
      const bool lid = s.task == TaskId::kLidOpen;
      const double sign = lid ? -1.0 : 1.0;
      const double plane = lid ? k::kLidHeight : 0.0;
      if (s.phase == Phase::kApproach) {
        a[0] = toward(p[0], s.object[0], b[0]);
        const bool aligned = std::abs(p[0] + a[0] - s.object[0]) < 1e-3;
        const double hover = plane - sign * 0.08;
        a[1] = toward(p[1], aligned ? plane : (sign * (p[1] - hover) < 0.0 ? hover : p[1]), b[1]);
      } else if (s.phase == Phase::kContactWork) {
        a[0] = toward(p[0], s.object[0], b[0]);
        if (s.object_angle < s.latent - k::kAngleEps) {
          a[2] = std::min(b[2], s.latent - s.object_angle);
        } else {
          a[1] = -sign * b[1];
        }
      } else {
        a[1] = -sign * b[1];
      }
      break;
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Episodes.

struct EpisodeRecord {
  TaskId task = TaskId::kWeighSort;
  std::uint64_t seed = 0;
  int latent_class = 0;
  double latent = 0.0;
  std::vector<ObservationWindow> observations;
  std::vector<Action> actions;
  std::vector<std::uint8_t> contact_flags;
  std::vector<Phase> phases;
  bool success = false;
  FailureReason failure_reason = FailureReason::kNone;
  int steps_used = 0;
};

/// Rolls one episode with a state-feedback policy.
template <typename Policy>
EpisodeRecord rollout(TaskId task, std::uint64_t seed, Policy&& policy, const SensorConfig& cfg = {}) {
  EpisodeRecord rec;
  rec.task = task;
  rec.seed = seed;
  WorldState s = env_reset(task, seed, cfg);
  rec.latent_class = s.latent_class;
  rec.latent = s.latent;
  ObservationWindow window = observe(s);
  while (!s.done) {
    const Action a = policy(s, window);
    rec.observations.push_back(window);
    rec.actions.push_back(a);
    rec.contact_flags.push_back(s.contact ? 1 : 0);
    rec.phases.push_back(s.phase);
    auto r = env_step(s, a, cfg);
    s = std::move(r.state);
    window = r.window;
  }
  rec.success = s.success;
  rec.failure_reason = s.failure;
  rec.steps_used = static_cast<int>(rec.actions.size());
  return rec;
}

inline std::vector<EpisodeRecord> generate_demo_episodes(TaskId task, int n, std::uint64_t seed,
                                                         const SensorConfig& cfg = {}) {
  if (n < 1) throw ValidationError("demo count must be >= 1");
  std::vector<EpisodeRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto episode_seed = derive_seed(seed, StreamDomain::kDemoEpisode, static_cast<std::uint64_t>(i));
    auto rec = rollout(task, episode_seed, [](const WorldState& s, const ObservationWindow&) {
      return scripted_expert(s);
    }, cfg);
    if (!rec.success) {
      throw NumericalError("scripted expert failed on " + std::string(to_string(task)) + " seed " +
                           std::to_string(episode_seed));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace cfusion::sim
