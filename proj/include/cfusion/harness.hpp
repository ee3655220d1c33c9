#pragma once

// Training, lockstep evaluation, and the per-episode metrics derived from
// evaluation runs.

#include "cfusion/checkpoint.hpp"
#include "cfusion/config.hpp"
#include "cfusion/dataset.hpp"
#include "cfusion/diffusion.hpp"
#include "cfusion/fusion.hpp"
#include "cfusion/optim.hpp"
#include "cfusion/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

namespace cfusion {

// ---------------------------------------------------------------------------
// Training.

struct EpochLoss {
  int epoch = 0;
  double loss = 0.0;
  double action_mse = 0.0;
  double torque_mse = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLoss> curve;
};

inline std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
  std::ostringstream s;
  s.precision(9);
  s << "epoch,loss,action_mse,torque_mse\n";
  for (const auto& e : curve) s << e.epoch << "," << e.loss << "," << e.action_mse << "," << e.torque_mse << "\n";
  return s.str();
}

/// Trains one strategy on a demonstration set. Fully determined by
/// (config, dataset).
inline TrainResult train_policy(const TrainConfig& cfg, const Dataset& ds,
                                const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (ds.task != cfg.task) {
    throw ValidationError("dataset holds task '" + std::string(sim::to_string(ds.task)) + "' but the config asks for '" +
                          std::string(sim::to_string(cfg.task)) + "'");
  }
  if (ds.episodes.empty()) throw ValidationError("dataset has no episodes");
  const FusionModel model(cfg.strategy_config(), cfg.model_shape());
  const auto sched = make_schedule();
  TrainResult result;
  auto& ck = result.checkpoint;
  ck.config = cfg;
  ck.norm = round_to_f32(fit_normalizer(ds));
  ck.params = model.init<float>(derive_seed(cfg.seed, StreamDomain::kTrainSeed));

  AdamWConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  AdamW<float> adam(ac);

  const auto samples = enumerate_samples(ds);
  const bool aux = cfg.strategy == StrategyTag::kAuxGoals;
  const int horizon = cfg.horizon;
  std::vector<std::size_t> order(samples.size());
  std::uniform_int_distribution<int> pick_t(0, sched.steps - 1);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto order_rng = make_rng(cfg.seed, StreamDomain::kBatchOrder, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), order_rng);
    auto noise_rng = make_rng(cfg.seed, StreamDomain::kDiffusionNoise, static_cast<std::uint64_t>(epoch));
    EpochLoss acc;
    acc.epoch = epoch + 1;
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<SampleRef> batch(n);
      std::vector<const sim::ObservationWindow*> windows(n);
      for (std::size_t i = 0; i < n; ++i) {
        batch[i] = samples[order[start + i]];
        windows[i] = &ds.episodes[batch[i].episode].observations[batch[i].step];
      }
      const auto obs = make_obs_batch<float>(windows, ck.norm, cfg.gate_threshold);
      const auto clean = make_target_batch<float>(ds, batch, horizon, ck.norm, aux);
      std::vector<int> steps(n);
      Matrix<float> eps(clean.rows(), clean.cols());
      for (std::size_t i = 0; i < n; ++i) steps[i] = pick_t(noise_rng);
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<float>(gaussian(noise_rng));
      const auto noisy = q_sample_batch<float>(clean, steps, eps, horizon, sched);

      ad::Tape<float> tape;
      ParamBinding<float> p(tape, ck.params, true);
      const auto cond = model.build_conditioning(p, obs);
      const auto out = model.predict_noise(p, tape.constant(noisy), std::span<const int>(steps), cond);
      const auto loss = model.loss(out, tape.constant(eps));
      const double value = loss.loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch starting at " +
                             std::to_string(start) + " (strategy " + std::string(to_string(cfg.strategy)) + ")");
      }
      tape.backward(loss.loss);
      adam.step(ck.params, p.gradients());
      const double w = static_cast<double>(n);
      acc.loss += w * value;
      acc.action_mse += w * loss.action_mse;
      acc.torque_mse += w * loss.torque_mse;
      weight += w;
    }
    acc.loss /= weight;
    acc.action_mse /= weight;
    acc.torque_mse /= weight;
    result.curve.push_back(acc);
    if (on_epoch) on_epoch(acc);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Policies and lockstep evaluation.

struct TraceRow {
  int episode = 0;
  int env_step = 0;
  int diffusion_t = 0;
  int phi = 0;
  double w_torque = std::numeric_limits<double>::quiet_NaN();  // gated_cfg
  double w_img = std::numeric_limits<double>::quiet_NaN();     // MoE family
  double w_tor = std::numeric_limits<double>::quiet_NaN();
};

struct PlanRequest {
  int episode = 0;
  int env_step = 0;
  const sim::WorldState* state = nullptr;
  const sim::ObservationWindow* window = nullptr;
};

/// A policy maps a batch of requests to one action chunk per request.
class ChunkPolicy {
 public:
  virtual ~ChunkPolicy() = default;
  virtual std::vector<std::vector<sim::Action>> plan(std::span<const PlanRequest> requests) = 0;
};

class ExpertPolicy final : public ChunkPolicy {
 public:
  std::vector<std::vector<sim::Action>> plan(std::span<const PlanRequest> requests) override {
    std::vector<std::vector<sim::Action>> out;
    for (const auto& r : requests) out.push_back({sim::scripted_expert(*r.state)});
    return out;
  }
};

class ZeroPolicy final : public ChunkPolicy {
 public:
  std::vector<std::vector<sim::Action>> plan(std::span<const PlanRequest> requests) override {
    return std::vector<std::vector<sim::Action>>(requests.size(), {sim::Action{0.0, 0.0, 0.0}});
  }
};

namespace detail {

template <typename T>
Var<T> detach(Var<T> v, ad::Tape<T>& tape) {
  return v.tape ? tape.constant(v.value()) : Var<T>{};
}

template <typename T>
Conditioning<T> detach(const Conditioning<T>& c, ad::Tape<T>& tape) {
  Conditioning<T> out;
  out.phi = c.phi;
  out.single = detach(c.single, tape);
  out.vision = detach(c.vision, tape);
  out.torque = detach(c.torque, tape);
  out.scale_torque = detach(c.scale_torque, tape);
  out.scale_vision = detach(c.scale_vision, tape);
  out.router_img = detach(c.router_img, tape);
  out.router_tor = detach(c.router_tor, tape);
  return out;
}

}  // namespace detail

/// Normalized actions lie in [-1, 1]; the sampler clamps its clean-sample
/// estimate to this range.
inline constexpr double kActionClip = 1.0;

/// Diffusion policy backed by a checkpoint. Each episode draws its sampling
/// noise from its own stream, so results do not depend on batch makeup
/// beyond floating-point association.
class DiffusionPolicy final : public ChunkPolicy {
 public:
  DiffusionPolicy(const Checkpoint& ck, std::uint64_t sampling_seed, bool keep_trace,
                  double clip = kActionClip)
      : ck_(ck),
        model_(ck.config.strategy_config(), ck.config.model_shape()),
        sched_(make_schedule()),
        seed_(sampling_seed),
        keep_trace_(keep_trace),
        clip_(clip) {}

  const std::vector<TraceRow>& trace() const noexcept { return trace_; }

  /// Full reverse chain for a batch of windows. Returns the clean action
  /// chunks (horizon x A, denormalized) in request order.
  std::vector<std::vector<sim::Action>> plan(std::span<const PlanRequest> requests) override {
    const auto n = static_cast<Eigen::Index>(requests.size());
    const int horizon = ck_.config.horizon;
    const int channels = model_.channels();
    const auto tag = ck_.config.strategy;
    std::vector<const sim::ObservationWindow*> windows;
    for (const auto& r : requests) windows.push_back(r.window);
    const auto obs = make_obs_batch<float>(windows, ck_.norm, ck_.config.gate_threshold);

    ad::Tape<float> cond_tape;
    ParamBinding<float> cond_binding(cond_tape, ck_.params, false);
    const auto cond_full = model_.build_conditioning(cond_binding, obs);

    std::vector<Rng*> gens;
    for (const auto& r : requests) gens.push_back(&generator(r.episode));
    Matrix<float> x(channels, n * horizon);
    fill_noise(x, gens, horizon);
    std::vector<int> steps(static_cast<std::size_t>(n));
    for (int t = sched_.steps - 1; t >= 0; --t) {
      std::fill(steps.begin(), steps.end(), t);
      ad::Tape<float> tape;
      ParamBinding<float> p(tape, ck_.params, false);
      const auto cond = detail::detach(cond_full, tape);
      const auto out = model_.predict_noise(p, tape.constant(x), std::span<const int>(steps), cond, true);
      if (keep_trace_ && (tag == StrategyTag::kGatedCFG || is_moe(tag))) {
        for (Eigen::Index i = 0; i < n; ++i) {
          TraceRow row;
          row.episode = requests[i].episode;
          row.env_step = requests[i].env_step;
          row.diffusion_t = t;
          row.phi = obs.phi[i];
          if (out.w_torque) row.w_torque = out.w_torque->value()(0, i);
          if (out.route) {
            row.w_img = out.route->value()(0, i);
            row.w_tor = out.route->value()(1, i);
          }
          trace_.push_back(row);
        }
      }
      Matrix<float> z;
      if (t > 0) {
        z.resize(channels, n * horizon);
        fill_noise(z, gens, horizon);
      }
      x = clip_ > 0.0 ? reverse_step_clipped<float>(x, out.eps.value(), t, sched_, z, clip_)
                       : reverse_step<float>(x, out.eps.value(), t, sched_, z);
      if (!x.allFinite()) throw NumericalError("non-finite sample at diffusion step " + std::to_string(t));
    }
    std::vector<std::vector<sim::Action>> chunks(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& chunk = chunks[i];
      for (int k = 0; k < horizon; ++k) {
        sim::Action a{};
        for (int d = 0; d < sim::kActionDim; ++d) {
          a[d] = static_cast<double>(x(d, i * horizon + k)) * ck_.norm.action_scale[d];
        }
        chunk.push_back(a);
      }
    }
    return chunks;
  }

 private:
  Rng& generator(int episode) {
    while (static_cast<int>(gens_.size()) <= episode) {
      gens_.push_back(make_rng(seed_, StreamDomain::kSampling, gens_.size()));
    }
    return gens_[episode];
  }

  static void fill_noise(Matrix<float>& m, const std::vector<Rng*>& gens, int horizon) {
    for (std::size_t i = 0; i < gens.size(); ++i) {
      for (int k = 0; k < horizon; ++k) {
        for (Eigen::Index c = 0; c < m.rows(); ++c) {
          m(c, static_cast<Eigen::Index>(i) * horizon + k) = static_cast<float>(gaussian(*gens[i]));
        }
      }
    }
  }

  const Checkpoint& ck_;
  FusionModel model_;
  DiffusionSchedule sched_;
  std::uint64_t seed_;
  bool keep_trace_;
  double clip_;  // <= 0 disables clamping
  std::deque<Rng> gens_;
  std::vector<TraceRow> trace_;
};

struct EvalResult {
  std::string label;
  sim::TaskId task = sim::TaskId::kWeighSort;
  int successes = 0;
  int trials = 0;
  std::vector<sim::EpisodeRecord> episodes;
  std::vector<TraceRow> trace;
};

inline std::uint64_t eval_episode_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, StreamDomain::kEvalEpisode, static_cast<std::uint64_t>(episode));
}

/// Runs `episodes` episodes in lockstep; requests for new chunks are batched
/// across all episodes whose action queue ran dry. At most `execute` actions
/// of each chunk are used.
inline EvalResult run_episodes(ChunkPolicy& policy, sim::TaskId task, int episodes, std::uint64_t seed, int execute,
                               const sim::SensorConfig& sensor = {}) {
  if (episodes < 1) throw ValidationError("episode count must be >= 1");
  if (execute < 1) throw ValidationError("execute must be >= 1");
  struct Live {
    sim::WorldState state;
    sim::ObservationWindow window;
    std::deque<sim::Action> queue;
  };
  EvalResult result;
  result.task = task;
  result.trials = episodes;
  result.episodes.resize(episodes);
  std::vector<Live> live(episodes);
  std::vector<int> active;
  for (int i = 0; i < episodes; ++i) {
    const auto s = eval_episode_seed(seed, i);
    live[i].state = sim::env_reset(task, s, sensor);
    live[i].window = sim::observe(live[i].state);
    auto& rec = result.episodes[i];
    rec.task = task;
    rec.seed = s;
    rec.latent_class = live[i].state.latent_class;
    rec.latent = live[i].state.latent;
    active.push_back(i);
  }
  while (!active.empty()) {
    std::vector<PlanRequest> requests;
    for (int i : active) {
      if (live[i].queue.empty()) {
        requests.push_back({i, live[i].state.step_count, &live[i].state, &live[i].window});
      }
    }
    if (!requests.empty()) {
      auto chunks = policy.plan(requests);
      if (chunks.size() != requests.size()) throw ValidationError("policy returned the wrong number of chunks");
      for (std::size_t r = 0; r < requests.size(); ++r) {
        auto& q = live[requests[r].episode].queue;
        const auto& c = chunks[r];
        if (c.empty()) throw ValidationError("policy returned an empty chunk");
        for (std::size_t k = 0; k < c.size() && static_cast<int>(k) < execute; ++k) q.push_back(c[k]);
      }
    }
    std::vector<int> still;
    for (int i : active) {
      auto& l = live[i];
      auto& rec = result.episodes[i];
      const auto a = l.queue.front();
      l.queue.pop_front();
      rec.observations.push_back(l.window);
      rec.actions.push_back(a);
      rec.contact_flags.push_back(l.state.contact ? 1 : 0);
      rec.phases.push_back(l.state.phase);
      auto step = sim::env_step(l.state, a, sensor);
      l.state = std::move(step.state);
      l.window = step.window;
      if (l.state.done) {
        rec.success = l.state.success;
        rec.failure_reason = l.state.failure;
        rec.steps_used = static_cast<int>(rec.actions.size());
        if (rec.success) ++result.successes;
      } else {
        still.push_back(i);
      }
    }
    active.swap(still);
  }
  return result;
}

/// Evaluates a trained checkpoint on its own task.
inline EvalResult evaluate_checkpoint(const Checkpoint& ck, int episodes, std::uint64_t seed, bool keep_trace,
                                      const sim::SensorConfig& sensor = {}) {
  DiffusionPolicy policy(ck, seed, keep_trace);
  auto r = run_episodes(policy, ck.config.task, episodes, seed, ck.config.execute, sensor);
  r.label = std::string(to_string(ck.config.strategy));
  r.trace = policy.trace();
  return r;
}

inline std::string trace_csv(const std::vector<TraceRow>& rows, std::string_view strategy) {
  std::ostringstream s;
  s.precision(9);
  s << "episode,env_step,diffusion_t,phi,w_torque,w_img,w_tor,strategy\n";
  auto put = [&](double v) {
    if (std::isnan(v)) return;
    s << v;
  };
  for (const auto& r : rows) {
    s << r.episode << "," << r.env_step << "," << r.diffusion_t << "," << r.phi << ",";
    put(r.w_torque);
    s << ",";
    put(r.w_img);
    s << ",";
    put(r.w_tor);
    s << "," << strategy << "\n";
  }
  return s.str();
}

/// Parses a trace CSV written by trace_csv. Returns the rows and the
/// strategy tag of the last row.
inline std::pair<std::vector<TraceRow>, std::string> parse_trace_csv(const std::string& text,
                                                                     const std::string& source = "trace") {
  std::istringstream in(text);
  std::string line;
  std::vector<TraceRow> rows;
  std::string strategy;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "episode,env_step,diffusion_t,phi,w_torque,w_img,w_tor,strategy") {
        throw FormatError(FormatError::Kind::kCorrupt, source + ": unexpected trace header");
      }
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 8) {
      throw FormatError(FormatError::Kind::kCorrupt, source + ":" + std::to_string(line_no) + ": expected 8 fields");
    }
    try {
      TraceRow r;
      r.episode = std::stoi(f[0]);
      r.env_step = std::stoi(f[1]);
      r.diffusion_t = std::stoi(f[2]);
      r.phi = std::stoi(f[3]);
      auto num = [](const std::string& v) {
        return v.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(v);
      };
      r.w_torque = num(f[4]);
      r.w_img = num(f[5]);
      r.w_tor = num(f[6]);
      strategy = f[7];
      rows.push_back(r);
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::kCorrupt, source + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return {std::move(rows), strategy};
}

// ---------------------------------------------------------------------------
// Attempt metrics.

/// Attempts in one episode: 1 plus the number of times contact is
/// re-established after a regression in task phase.
inline int count_attempts(const sim::EpisodeRecord& e) {
  int attempts = 1;
  bool regressed = false;
  for (std::size_t t = 1; t < e.phases.size(); ++t) {
    if (static_cast<int>(e.phases[t]) < static_cast<int>(e.phases[t - 1])) regressed = true;
    if (regressed && e.contact_flags[t] != 0 && e.contact_flags[t - 1] == 0) {
      ++attempts;
      regressed = false;
    }
  }
  return attempts;
}

struct AttemptMetrics {
  int episodes = 0;
  int successes = 0;
  int first_attempt_successes = 0;
  long horizon_sum = 0;  // failures count as the full step budget

  double success_rate() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
  double first_attempt_rate() const { return episodes ? static_cast<double>(first_attempt_successes) / episodes : 0.0; }
  double avg_horizon() const { return episodes ? static_cast<double>(horizon_sum) / episodes : 0.0; }

  void add(bool success, int attempts, int steps) {
    ++episodes;
    if (success) {
      ++successes;
      if (attempts == 1) ++first_attempt_successes;
      horizon_sum += steps;
    } else {
      horizon_sum += sim::kHorizonCap;
    }
  }
  void add(const sim::EpisodeRecord& e) { add(e.success, count_attempts(e), e.steps_used); }
};

inline AttemptMetrics attempt_metrics(std::span<const sim::EpisodeRecord> episodes) {
  AttemptMetrics m;
  for (const auto& e : episodes) m.add(e);
  return m;
}

// ---------------------------------------------------------------------------
// Weight analysis.

struct WeightSummary {
  std::string strategy;
  long contact_rows = 0;
  long free_rows = 0;
  double contact_mean = 0.0;  // w_torque (gated_cfg) or w_tor (MoE)
  double free_mean = 0.0;

  double delta() const { return contact_mean - free_mean; }
  /// contact/free ratio; infinite when the free-space mean is exactly 0.
  double ratio() const {
    return free_mean == 0.0 ? std::numeric_limits<double>::infinity() : contact_mean / free_mean;
  }
};

/// Mean torque-side weight during contact and in free space. Rows without a
/// torque-side weight are ignored.
inline WeightSummary analyze_weights(std::span<const TraceRow> rows, std::string strategy) {
  WeightSummary s;
  s.strategy = std::move(strategy);
  double cs = 0.0, fs = 0.0;
  for (const auto& r : rows) {
    const double w = !std::isnan(r.w_torque) ? r.w_torque : r.w_tor;
    if (std::isnan(w)) continue;
    if (r.phi) {
      cs += w;
      ++s.contact_rows;
    } else {
      fs += w;
      ++s.free_rows;
    }
  }
  s.contact_mean = s.contact_rows ? cs / s.contact_rows : 0.0;
  s.free_mean = s.free_rows ? fs / s.free_rows : 0.0;
  return s;
}

/// Plot-ready per-step means: one line per (env_step, phi).
inline std::string weights_csv(std::span<const TraceRow> rows, std::string_view strategy) {
  struct Acc {
    double sum = 0.0;
    long n = 0;
  };
  std::map<std::pair<int, int>, Acc> acc;
  for (const auto& r : rows) {
    const double w = !std::isnan(r.w_torque) ? r.w_torque : r.w_tor;
    if (std::isnan(w)) continue;
    auto& a = acc[{r.env_step, r.phi}];
    a.sum += w;
    ++a.n;
  }
  std::ostringstream s;
  s.precision(17);
  s << "strategy,env_step,phi,mean_weight,rows\n";
  for (const auto& [k, a] : acc) s << strategy << "," << k.first << "," << k.second << "," << a.sum / a.n << "," << a.n << "\n";
  return s.str();
}

}  // namespace cfusion
