#pragma once

// Flat key = value configuration with [sections]. Unknown sections and keys
// are rejected with their line number; missing keys keep their defaults.
//
//   [train]  task, strategy, demos, epochs, batch_size, lr, weight_decay,
//            seed, gate_threshold, alpha, horizon, history, execute,
//            max_guidance
//   [model]  c1, c2, cond_hidden
//   [eval]   episodes, seed
//   [grid]   tasks, strategies, seeds, aux_alphas (comma lists)

#include "cfusion/binio.hpp"
#include "cfusion/errors.hpp"
#include "cfusion/fusion.hpp"
#include "cfusion/simenv.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace cfusion {

struct TrainConfig {
  sim::TaskId task = sim::TaskId::kWeighSort;
  StrategyTag strategy = StrategyTag::kGatedCFG;
  int demos = 200;
  int epochs = 50;
  int batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-6;
  std::uint64_t seed = 0;
  double gate_threshold = 1.0;
  double alpha = 0.1;
  int horizon = 8;   // predicted action chunk P
  int history = sim::kHistory;
  int execute = 2;   // actions executed per replan
  double max_guidance = 20.0;
  int c1 = 16;
  int c2 = 32;
  int cond_hidden = 64;

  StrategyConfig strategy_config() const {
    auto s = make_strategy(strategy);
    s.gate_threshold = gate_threshold;
    s.alpha = alpha;
    s.max_guidance = max_guidance;
    return s;
  }
  ModelShape model_shape() const {
    ModelShape m;
    m.horizon = horizon;
    m.history = history;
    m.c1 = c1;
    m.c2 = c2;
    m.cond_hidden = cond_hidden;
    return m;
  }
  bool operator==(const TrainConfig&) const = default;
};

struct EvalConfig {
  int episodes = 100;
  std::uint64_t seed = 1000;
  bool operator==(const EvalConfig&) const = default;
};

struct GridConfig {
  std::vector<sim::TaskId> tasks = {sim::kAllTasks.begin(), sim::kAllTasks.end()};
  std::vector<StrategyTag> strategies = {StrategyTag::kVisionOnly, StrategyTag::kConcat, StrategyTag::kGated,
                                         StrategyTag::kAuxGoals,   StrategyTag::kMoE,    StrategyTag::kMoERaw,
                                         StrategyTag::kGatedCFG};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<double> aux_alphas;  // extra aux_goals rows; empty = default alpha only
  bool operator==(const GridConfig&) const = default;
};

struct RunConfig {
  TrainConfig train;
  EvalConfig eval;
  GridConfig grid;
  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class LineError {
 public:
  LineError(std::string source, int line) : source_(std::move(source)), line_(line) {}
  [[noreturn]] void fail(const std::string& msg) const {
    throw ValidationError(source_ + ":" + std::to_string(line_) + ": " + msg);
  }

  template <typename I>
  I parse_int(const std::string& key, const std::string& v, I lo) const {
    I out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) fail("'" + key + "' expects an integer, got '" + v + "'");
    if (out < lo) fail("'" + key + "' must be >= " + std::to_string(lo));
    return out;
  }

  double parse_double(const std::string& key, const std::string& v) const {
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      fail("'" + key + "' expects a number, got '" + v + "'");
    }
  }

  double parse_positive(const std::string& key, const std::string& v) const {
    const double d = parse_double(key, v);
    if (!(d > 0.0)) fail("'" + key + "' must be positive");
    return d;
  }

  template <typename F>
  auto wrap(F&& f) const -> decltype(f()) {
    try {
      return f();
    } catch (const ValidationError& e) {
      fail(e.what());
    }
  }

 private:
  std::string source_;
  int line_;
};

}  // namespace detail

inline RunConfig parse_config(std::string_view text, const std::string& source = "config") {
  RunConfig c;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const detail::LineError at(source, line_no);
    auto hash = raw.find('#');
    auto line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') at.fail("malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "train" && section != "model" && section != "eval" && section != "grid") {
        at.fail("unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto val = detail::trim(line.substr(eq + 1));
    if (key.empty()) at.fail("missing key");
    if (section.empty()) at.fail("key '" + key + "' outside of a section");
    auto& t = c.train;
    bool known = true;
    if (section == "train") {
      if (key == "task") t.task = at.wrap([&] { return sim::parse_task(val); });
      else if (key == "strategy") t.strategy = at.wrap([&] { return parse_strategy(val); });
      else if (key == "demos") t.demos = at.parse_int<int>(key, val, 1);
      else if (key == "epochs") t.epochs = at.parse_int<int>(key, val, 1);
      else if (key == "batch_size") t.batch_size = at.parse_int<int>(key, val, 1);
      else if (key == "lr") t.lr = at.parse_positive(key, val);
      else if (key == "weight_decay") {
        t.weight_decay = at.parse_double(key, val);
        if (t.weight_decay < 0.0) at.fail("'weight_decay' must be >= 0");
      } else if (key == "seed") t.seed = at.parse_int<std::uint64_t>(key, val, 0);
      else if (key == "gate_threshold") t.gate_threshold = at.parse_positive(key, val);
      else if (key == "alpha") {
        t.alpha = at.parse_double(key, val);
        if (t.alpha < 0.0) at.fail("'alpha' must be >= 0");
      } else if (key == "horizon") t.horizon = at.parse_int<int>(key, val, 2);
      else if (key == "history") {
        t.history = at.parse_int<int>(key, val, 1);
        if (t.history != sim::kHistory) at.fail("'history' is fixed at " + std::to_string(sim::kHistory));
      } else if (key == "execute") t.execute = at.parse_int<int>(key, val, 1);
      else if (key == "max_guidance") t.max_guidance = at.parse_positive(key, val);
      else known = false;
    } else if (section == "model") {
      if (key == "c1") t.c1 = at.parse_int<int>(key, val, 1);
      else if (key == "c2") t.c2 = at.parse_int<int>(key, val, 1);
      else if (key == "cond_hidden") t.cond_hidden = at.parse_int<int>(key, val, 1);
      else known = false;
    } else if (section == "eval") {
      if (key == "episodes") c.eval.episodes = at.parse_int<int>(key, val, 1);
      else if (key == "seed") c.eval.seed = at.parse_int<std::uint64_t>(key, val, 0);
      else known = false;
    } else {
      auto& g = c.grid;
      if (key == "tasks") {
        g.tasks.clear();
        for (const auto& s : detail::split_list(val)) g.tasks.push_back(at.wrap([&] { return sim::parse_task(s); }));
        if (g.tasks.empty()) at.fail("'tasks' is empty");
      } else if (key == "strategies") {
        g.strategies.clear();
        for (const auto& s : detail::split_list(val)) g.strategies.push_back(at.wrap([&] { return parse_strategy(s); }));
        if (g.strategies.empty()) at.fail("'strategies' is empty");
      } else if (key == "seeds") {
        g.seeds.clear();
        for (const auto& s : detail::split_list(val)) g.seeds.push_back(at.parse_int<std::uint64_t>(key, s, 0));
        if (g.seeds.empty()) at.fail("'seeds' is empty");
      } else if (key == "aux_alphas") {
        g.aux_alphas.clear();
        for (const auto& s : detail::split_list(val)) {
          const double a = at.parse_double(key, s);
          if (a < 0.0) at.fail("'aux_alphas' entries must be >= 0");
          g.aux_alphas.push_back(a);
        }
      } else {
        known = false;
      }
    }
    if (!known) at.fail("unknown key '" + key + "' in [" + section + "]");
  }
  if (c.train.execute > c.train.horizon) {
    throw ValidationError(source + ": 'execute' (" + std::to_string(c.train.execute) + ") exceeds 'horizon' (" +
                          std::to_string(c.train.horizon) + ")");
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_text(path), path.string());
}

/// Canonical text of a training config (every field, fixed order). Its
/// FNV-1a hash identifies the config inside checkpoints.
inline std::string serialize(const TrainConfig& t) {
  using detail::format_double;
  std::ostringstream s;
  s << "[train]\n"
    << "task = " << sim::to_string(t.task) << "\n"
    << "strategy = " << to_string(t.strategy) << "\n"
    << "demos = " << t.demos << "\n"
    << "epochs = " << t.epochs << "\n"
    << "batch_size = " << t.batch_size << "\n"
    << "lr = " << format_double(t.lr) << "\n"
    << "weight_decay = " << format_double(t.weight_decay) << "\n"
    << "seed = " << t.seed << "\n"
    << "gate_threshold = " << format_double(t.gate_threshold) << "\n"
    << "alpha = " << format_double(t.alpha) << "\n"
    << "horizon = " << t.horizon << "\n"
    << "history = " << t.history << "\n"
    << "execute = " << t.execute << "\n"
    << "max_guidance = " << format_double(t.max_guidance) << "\n"
    << "[model]\n"
    << "c1 = " << t.c1 << "\n"
    << "c2 = " << t.c2 << "\n"
    << "cond_hidden = " << t.cond_hidden << "\n";
  return s.str();
}

inline std::string serialize(const RunConfig& c) {
  std::ostringstream s;
  s << serialize(c.train) << "[eval]\n"
    << "episodes = " << c.eval.episodes << "\n"
    << "seed = " << c.eval.seed << "\n"
    << "[grid]\n"
    << "tasks = ";
  for (std::size_t i = 0; i < c.grid.tasks.size(); ++i) s << (i ? ", " : "") << sim::to_string(c.grid.tasks[i]);
  s << "\nstrategies = ";
  for (std::size_t i = 0; i < c.grid.strategies.size(); ++i) s << (i ? ", " : "") << to_string(c.grid.strategies[i]);
  s << "\nseeds = ";
  for (std::size_t i = 0; i < c.grid.seeds.size(); ++i) s << (i ? ", " : "") << c.grid.seeds[i];
  s << "\naux_alphas = ";
  for (std::size_t i = 0; i < c.grid.aux_alphas.size(); ++i) {
    s << (i ? ", " : "") << detail::format_double(c.grid.aux_alphas[i]);
  }
  s << "\n";
  return s.str();
}

inline std::uint64_t config_hash(const TrainConfig& t) { return io::fnv1a(serialize(t)); }

}  // namespace cfusion
