#pragma once

// Demonstration datasets: the CFBD container, its key=value sidecar, and
// the conversion of episodes into normalized training batches.
//
// CFBD layout (all little-endian):
//   "CFBD" | u32 version | u32 task | u32 episodes | u32 V | u32 D | u32 H |
//   u32 A | u32 horizon_cap
//   per episode: u32 byte length, then
//     u64 seed | u32 latent_class | f32 latent | u8 success | u8 failure |
//     u32 steps | six arrays (visual, torque, proprio, actions, contact,
//     phase), each u8 dtype (0 f32, 1 u8) | u32 ndim | u32 dims[] | payload

#include "cfusion/binio.hpp"
#include "cfusion/errors.hpp"
#include "cfusion/fusion.hpp"
#include "cfusion/models.hpp"
#include "cfusion/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace cfusion {

inline constexpr char kDatasetMagic[4] = {'C', 'F', 'B', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  sim::TaskId task = sim::TaskId::kWeighSort;
  std::vector<sim::EpisodeRecord> episodes;

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.observations.size();
    return n;
  }
};

namespace detail {

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

inline void array_header(io::ByteWriter& w, DType dtype, std::initializer_list<std::uint32_t> dims) {
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u32(d);
}

inline std::vector<std::uint32_t> read_array_header(io::ByteReader& r, DType expected,
                                                    std::initializer_list<std::uint32_t> dims) {
  const auto dtype = r.u8();
  const auto ndim = r.u32();
  if (dtype != static_cast<std::uint8_t>(expected) || ndim != dims.size()) {
    throw FormatError(FormatError::Kind::kCorrupt, "dataset: unexpected array layout");
  }
  std::vector<std::uint32_t> out;
  for (auto d : dims) {
    const auto got = r.u32();
    if (got != d) throw FormatError(FormatError::Kind::kCorrupt, "dataset: array shape mismatch");
    out.push_back(got);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  using namespace sim;
  io::ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.task));
  w.u32(static_cast<std::uint32_t>(ds.episodes.size()));
  w.u32(kVisualDim);
  w.u32(kJoints);
  w.u32(kHistory);
  w.u32(kActionDim);
  w.u32(kHorizonCap);
  for (const auto& e : ds.episodes) {
    io::ByteWriter rec;
    const auto steps = static_cast<std::uint32_t>(e.observations.size());
    rec.u64(e.seed);
    rec.u32(static_cast<std::uint32_t>(e.latent_class));
    rec.f32(static_cast<float>(e.latent));
    rec.u8(e.success ? 1 : 0);
    rec.u8(static_cast<std::uint8_t>(e.failure_reason));
    rec.u32(steps);
    cfusion::detail::array_header(rec, cfusion::detail::DType::kF32, {steps, kVisualDim});
    for (const auto& o : e.observations) {
      for (double v : o.visual) rec.f32(static_cast<float>(v));
    }
    cfusion::detail::array_header(rec, cfusion::detail::DType::kF32, {steps, kJoints, kHistory});
    for (const auto& o : e.observations) {
      for (int j = 0; j < kJoints; ++j) {
        for (int h = 0; h < kHistory; ++h) rec.f32(static_cast<float>(o.torque_history(j, h)));
      }
    }
    cfusion::detail::array_header(rec, cfusion::detail::DType::kF32, {steps, kJoints});
    for (const auto& o : e.observations) {
      for (double v : o.proprio) rec.f32(static_cast<float>(v));
    }
    cfusion::detail::array_header(rec, cfusion::detail::DType::kF32, {steps, kActionDim});
    for (const auto& a : e.actions) {
      for (double v : a) rec.f32(static_cast<float>(v));
    }
    cfusion::detail::array_header(rec, cfusion::detail::DType::kU8, {steps});
    for (auto c : e.contact_flags) rec.u8(c);
    cfusion::detail::array_header(rec, cfusion::detail::DType::kU8, {steps});
    for (auto p : e.phases) rec.u8(static_cast<std::uint8_t>(p));
    w.u32(static_cast<std::uint32_t>(rec.size()));
    w.bytes().insert(w.bytes().end(), rec.bytes().begin(), rec.bytes().end());
  }
  return w.bytes();
}

inline Dataset decode_dataset(const std::vector<std::uint8_t>& bytes, const std::string& context = "dataset") {
  using namespace sim;
  io::ByteReader r(bytes, context);
  if (bytes.size() < 4 || r.raw(4) != std::string_view(kDatasetMagic, 4)) {
    throw FormatError(FormatError::Kind::kMagic, context + ": not a CFBD dataset");
  }
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::kVersion,
                      context + ": unsupported dataset version " + std::to_string(version));
  }
  Dataset ds;
  const auto task = r.u32();
  if (task > 2) throw FormatError(FormatError::Kind::kCorrupt, context + ": bad task id");
  ds.task = static_cast<TaskId>(task);
  const auto n = r.u32();
  if (r.u32() != kVisualDim || r.u32() != kJoints || r.u32() != kHistory || r.u32() != kActionDim ||
      r.u32() != kHorizonCap) {
    throw FormatError(FormatError::Kind::kCorrupt, context + ": dimension header mismatch");
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto length = r.u32();
    const auto start = r.position();
    EpisodeRecord e;
    e.task = ds.task;
    e.seed = r.u64();
    e.latent_class = static_cast<int>(r.u32());
    e.latent = r.f32();
    e.success = r.u8() != 0;
    e.failure_reason = static_cast<FailureReason>(r.u8());
    const auto steps = r.u32();
    e.steps_used = static_cast<int>(steps);
    e.observations.resize(steps);
    e.actions.resize(steps);
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kF32, {steps, kVisualDim});
    for (auto& o : e.observations) {
      for (double& v : o.visual) v = r.f32();
    }
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kF32, {steps, kJoints, kHistory});
    for (auto& o : e.observations) {
      for (int j = 0; j < kJoints; ++j) {
        for (int h = 0; h < kHistory; ++h) o.torque_history(j, h) = r.f32();
      }
    }
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kF32, {steps, kJoints});
    for (auto& o : e.observations) {
      for (double& v : o.proprio) v = r.f32();
    }
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kF32, {steps, kActionDim});
    for (auto& a : e.actions) {
      for (double& v : a) v = r.f32();
    }
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kU8, {steps});
    e.contact_flags.resize(steps);
    for (auto& c : e.contact_flags) c = r.u8();
    cfusion::detail::read_array_header(r, cfusion::detail::DType::kU8, {steps});
    e.phases.resize(steps);
    for (auto& p : e.phases) {
      const auto v = r.u8();
      if (v > 3) throw FormatError(FormatError::Kind::kCorrupt, context + ": bad phase value");
      p = static_cast<Phase>(v);
    }
    if (r.position() - start != length) {
      throw FormatError(FormatError::Kind::kCorrupt, context + ": episode record length mismatch");
    }
    ds.episodes.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::kCorrupt, context + ": trailing bytes");
  return ds;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".meta";
  return p;
}

inline std::string dataset_sidecar(const Dataset& ds, std::uint64_t seed, const sim::SensorConfig& sensor) {
  std::ostringstream s;
  s.precision(17);
  s << "format = CFBD\n"
    << "version = " << kDatasetVersion << "\n"
    << "task = " << sim::to_string(ds.task) << "\n"
    << "episodes = " << ds.episodes.size() << "\n"
    << "steps = " << ds.total_steps() << "\n"
    << "seed = " << seed << "\n"
    << "visual_dim = " << sim::kVisualDim << "\n"
    << "joints = " << sim::kJoints << "\n"
    << "history = " << sim::kHistory << "\n"
    << "action_dim = " << sim::kActionDim << "\n"
    << "horizon_cap = " << sim::kHorizonCap << "\n"
    << "sigma_free = " << sensor.sigma_free << "\n"
    << "sigma_contact = " << sensor.sigma_contact << "\n"
    << "inertial_gain = " << sensor.inertial_gain << "\n";
  return s.str();
}

/// Generates n expert demonstrations and writes the dataset plus sidecar.
inline Dataset generate_demos(sim::TaskId task, int n, std::uint64_t seed, const std::filesystem::path& out,
                              const sim::SensorConfig& sensor = {}) {
  Dataset ds;
  ds.task = task;
  ds.episodes = sim::generate_demo_episodes(task, n, seed, sensor);
  try {
    io::write_file_atomic(out, encode_dataset(ds));
    io::write_text_atomic(sidecar_path(out), dataset_sidecar(ds, seed, sensor));
  } catch (const IoError& e) {
    throw IoError(std::string("writing dataset ") + out.string() + ": " + e.what());
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Normalization and batching.

/// Per-feature affine normalization fitted on a training set. Actions are
/// scaled by the task's action bounds into [-1, 1].
struct Normalizer {
  std::vector<double> action_scale;
  std::vector<double> visual_mean, visual_std;
  std::vector<double> proprio_mean, proprio_std;
  std::vector<double> torque_mean, torque_std;  // per joint

  bool operator==(const Normalizer&) const = default;
};

namespace detail {
inline void finish_stats(std::vector<double>& mean, std::vector<double>& sd, double count) {
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] /= count;
    const double var = sd[i] / count - mean[i] * mean[i];
    sd[i] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}
}  // namespace detail

inline Normalizer fit_normalizer(const Dataset& ds) {
  using namespace sim;
  Normalizer n;
  const auto bounds = action_bounds(ds.task);
  n.action_scale.assign(bounds.begin(), bounds.end());
  n.visual_mean.assign(kVisualDim, 0.0);
  n.visual_std.assign(kVisualDim, 0.0);
  n.proprio_mean.assign(kJoints, 0.0);
  n.proprio_std.assign(kJoints, 0.0);
  n.torque_mean.assign(kJoints, 0.0);
  n.torque_std.assign(kJoints, 0.0);
  double count = 0.0;
  for (const auto& e : ds.episodes) {
    for (const auto& o : e.observations) {
      count += 1.0;
      for (int i = 0; i < kVisualDim; ++i) {
        n.visual_mean[i] += o.visual[i];
        n.visual_std[i] += o.visual[i] * o.visual[i];
      }
      for (int j = 0; j < kJoints; ++j) {
        n.proprio_mean[j] += o.proprio[j];
        n.proprio_std[j] += o.proprio[j] * o.proprio[j];
        const double t = o.torque_history(j, kHistory - 1);
        n.torque_mean[j] += t;
        n.torque_std[j] += t * t;
      }
    }
  }
  if (count == 0.0) throw ValidationError("cannot fit normalization on an empty dataset");
  cfusion::detail::finish_stats(n.visual_mean, n.visual_std, count);
  cfusion::detail::finish_stats(n.proprio_mean, n.proprio_std, count);
  cfusion::detail::finish_stats(n.torque_mean, n.torque_std, count);
  return n;
}

/// Normalized observation batch; the contact gate is evaluated on raw torque.
template <typename T>
ObsBatch<T> make_obs_batch(std::span<const sim::ObservationWindow* const> windows, const Normalizer& norm,
                           double gate_threshold) {
  using namespace sim;
  const auto n = static_cast<Eigen::Index>(windows.size());
  ObsBatch<T> b;
  b.visual.resize(kVisualDim, n);
  b.torque.resize(kJoints * kHistory, n);
  b.proprio.resize(kJoints, n);
  b.phi.resize(windows.size());
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto& w = *windows[c];
    for (int i = 0; i < kVisualDim; ++i) {
      b.visual(i, c) = static_cast<T>((w.visual[i] - norm.visual_mean[i]) / norm.visual_std[i]);
    }
    for (int j = 0; j < kJoints; ++j) {
      b.proprio(j, c) = static_cast<T>((w.proprio[j] - norm.proprio_mean[j]) / norm.proprio_std[j]);
    }
    // Column-major flattening of the D x H history.
    for (int h = 0; h < kHistory; ++h) {
      for (int j = 0; j < kJoints; ++j) {
        b.torque(h * kJoints + j, c) =
            static_cast<T>((w.torque_history(j, h) - norm.torque_mean[j]) / norm.torque_std[j]);
      }
    }
    b.phi[c] = detect_contact(w.torque_history, gate_threshold);
  }
  return b;
}

/// Reference to one training sample (episode, step).
struct SampleRef {
  std::uint32_t episode = 0;
  std::uint32_t step = 0;
};

inline std::vector<SampleRef> enumerate_samples(const Dataset& ds) {
  std::vector<SampleRef> out;
  for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
    for (std::size_t t = 0; t < ds.episodes[e].observations.size(); ++t) {
      out.push_back({static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(t)});
    }
  }
  return out;
}

/// Clean trajectory targets, channels x (N * horizon). Actions for steps
/// t..t+P-1 (last action repeated past the end); with `with_torque`, rows
/// A..A+D-1 hold the normalized torque measured after each of those steps.
template <typename T>
Matrix<T> make_target_batch(const Dataset& ds, std::span<const SampleRef> samples, int horizon,
                            const Normalizer& norm, bool with_torque) {
  using namespace sim;
  const int channels = kActionDim + (with_torque ? kJoints : 0);
  Matrix<T> out(channels, static_cast<Eigen::Index>(samples.size()) * horizon);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& e = ds.episodes[samples[n].episode];
    const int len = static_cast<int>(e.actions.size());
    for (int p = 0; p < horizon; ++p) {
      const auto col = static_cast<Eigen::Index>(n) * horizon + p;
      const int t = std::min<int>(static_cast<int>(samples[n].step) + p, len - 1);
      for (int a = 0; a < kActionDim; ++a) out(a, col) = static_cast<T>(e.actions[t][a] / norm.action_scale[a]);
      if (!with_torque) continue;
      const int next = std::min(static_cast<int>(samples[n].step) + p + 1, len - 1);
      const auto& hist = e.observations[next].torque_history;
      for (int j = 0; j < kJoints; ++j) {
        out(kActionDim + j, col) =
            static_cast<T>((hist(j, kHistory - 1) - norm.torque_mean[j]) / norm.torque_std[j]);
      }
    }
  }
  return out;
}

}  // namespace cfusion
