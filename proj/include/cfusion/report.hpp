#pragma once

// Success tables, per-episode summaries, and the rendered comparison report.
// Counts are kept as integers; rates are formatted from exact rationals.

#include "cfusion/binio.hpp"
#include "cfusion/harness.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cfusion {

// ---------------------------------------------------------------------------
// Episode summaries (the stored form of an evaluation).

struct EpisodeSummary {
  int episode = 0;
  std::uint64_t seed = 0;
  int latent_class = 0;
  bool success = false;
  sim::FailureReason failure = sim::FailureReason::kNone;
  int steps = 0;
  int attempts = 1;

  bool operator==(const EpisodeSummary&) const = default;
};

inline std::vector<EpisodeSummary> summarize(const EvalResult& r) {
  std::vector<EpisodeSummary> out;
  for (std::size_t i = 0; i < r.episodes.size(); ++i) {
    const auto& e = r.episodes[i];
    out.push_back({static_cast<int>(i), e.seed, e.latent_class, e.success, e.failure_reason, e.steps_used,
                   count_attempts(e)});
  }
  return out;
}

inline AttemptMetrics attempt_metrics(std::span<const EpisodeSummary> episodes) {
  AttemptMetrics m;
  for (const auto& e : episodes) m.add(e.success, e.attempts, e.steps);
  return m;
}

inline constexpr const char* kEpisodesHeader = "episode,seed,latent_class,success,failure,steps,attempts";

inline std::string episodes_csv(std::span<const EpisodeSummary> rows) {
  std::ostringstream s;
  s << kEpisodesHeader << "\n";
  for (const auto& e : rows) {
    s << e.episode << "," << e.seed << "," << e.latent_class << "," << (e.success ? 1 : 0) << ","
      << sim::to_string(e.failure) << "," << e.steps << "," << e.attempts << "\n";
  }
  return s.str();
}

inline sim::FailureReason parse_failure(const std::string& s) {
  for (auto r : {sim::FailureReason::kNone, sim::FailureReason::kTimeout, sim::FailureReason::kAbort}) {
    if (sim::to_string(r) == s) return r;
  }
  throw ValidationError("unknown failure reason '" + s + "'");
}

inline std::vector<EpisodeSummary> parse_episodes_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kEpisodesHeader) {
    throw FormatError(FormatError::Kind::kCorrupt, source + ": unexpected episodes header");
  }
  std::vector<EpisodeSummary> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    try {
      if (f.size() != 7) throw ValidationError("expected 7 fields");
      EpisodeSummary e;
      e.episode = std::stoi(f[0]);
      e.seed = std::stoull(f[1]);
      e.latent_class = std::stoi(f[2]);
      e.success = f[3] == "1";
      e.failure = parse_failure(f[4]);
      e.steps = std::stoi(f[5]);
      e.attempts = std::stoi(f[6]);
      out.push_back(e);
    } catch (const std::exception& ex) {
      throw FormatError(FormatError::Kind::kCorrupt, source + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Success tables.

struct Count {
  long successes = 0;
  long trials = 0;

  Count& operator+=(const Count& o) {
    successes += o.successes;
    trials += o.trials;
    return *this;
  }
  bool operator==(const Count&) const = default;
  double rate() const { return trials ? static_cast<double>(successes) / static_cast<double>(trials) : 0.0; }
};

/// "82.0%": the rate in tenths of a percent, rounded half up from the exact
/// ratio.
inline std::string percent(long num, long den) {
  if (den <= 0) return "n/a";
  const long tenths = (2000 * num + den) / (2 * den);
  return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10) + "%";
}
inline std::string percent(const Count& c) { return percent(c.successes, c.trials); }

inline std::string task_title(sim::TaskId t) {
  switch (t) {
    case sim::TaskId::kWeighSort: return "WeighSort";
    case sim::TaskId::kTwistPull: return "TwistPull";
    case sim::TaskId::kLidOpen: return "LidOpen";
  }
  return "?";
}

struct SuccessCell {
  bool present = false;
  Count total;
  std::array<Count, 2> by_class{};  // latent class 0 / 1
};

/// Rows keyed by label (strategy, or strategy plus alpha), columns by task.
/// A missing cell is a gap, never a zero.
class SuccessTable {
 public:
  SuccessTable() = default;
  SuccessTable(std::vector<sim::TaskId> tasks, std::vector<std::string> rows)
      : tasks_(std::move(tasks)), rows_(std::move(rows)) {}

  const std::vector<sim::TaskId>& tasks() const noexcept { return tasks_; }
  const std::vector<std::string>& rows() const noexcept { return rows_; }

  void add(const std::string& row, sim::TaskId task, std::span<const EpisodeSummary> episodes) {
    auto& c = slot(row, task);
    c.present = true;
    for (const auto& e : episodes) {
      const Count one{e.success ? 1 : 0, 1};
      c.total += one;
      c.by_class[e.latent_class == 0 ? 0 : 1] += one;
    }
  }

  void add_counts(const std::string& row, sim::TaskId task, Count total) {
    auto& c = slot(row, task);
    c.present = true;
    c.total += total;
  }

  const SuccessCell& cell(const std::string& row, sim::TaskId task) const {
    static const SuccessCell empty;
    auto it = cells_.find({row, task});
    return it == cells_.end() ? empty : it->second;
  }

  bool complete(const std::string& row) const {
    for (auto t : tasks_) {
      if (!cell(row, t).present) return false;
    }
    return true;
  }

  /// Pooled counts over the row's present cells (the trial-weighted mean of
  /// per-task rates).
  Count average(const std::string& row) const {
    Count c;
    for (auto t : tasks_) c += cell(row, t).total;
    return c;
  }

  std::string markdown() const {
    std::ostringstream s;
    s << "| Strategy |";
    for (auto t : tasks_) s << " " << task_title(t) << " |";
    s << " Average |\n|---|";
    for (std::size_t i = 0; i <= tasks_.size(); ++i) s << "---|";
    s << "\n";
    for (const auto& r : rows_) {
      s << "| " << r << " |";
      for (auto t : tasks_) {
        const auto& c = cell(r, t);
        if (c.present) {
          s << " " << c.total.successes << "/" << c.total.trials << " (" << percent(c.total) << ") |";
        } else {
          s << " missing |";
        }
      }
      const auto avg = average(r);
      s << " " << percent(avg) << (complete(r) ? "" : " (partial)") << " |\n";
    }
    return s.str();
  }

  std::string breakdown_markdown(sim::TaskId task, const std::array<std::string, 2>& names) const {
    std::ostringstream s;
    s << "| Strategy | " << names[0] << " | " << names[1] << " |\n|---|---|---|\n";
    for (const auto& r : rows_) {
      const auto& c = cell(r, task);
      s << "| " << r << " |";
      for (int k = 0; k < 2; ++k) {
        if (c.present) {
          s << " " << c.by_class[k].successes << "/" << c.by_class[k].trials << " (" << percent(c.by_class[k]) << ") |";
        } else {
          s << " missing |";
        }
      }
      s << "\n";
    }
    return s.str();
  }

  std::string csv() const {
    std::ostringstream s;
    s << "strategy,task,successes,trials,rate,class0_successes,class0_trials,class1_successes,class1_trials\n";
    for (const auto& r : rows_) {
      for (auto t : tasks_) {
        const auto& c = cell(r, t);
        if (!c.present) {
          s << r << "," << sim::to_string(t) << ",,,missing,,,,\n";
          continue;
        }
        s << r << "," << sim::to_string(t) << "," << c.total.successes << "," << c.total.trials << ","
          << percent(c.total) << "," << c.by_class[0].successes << "," << c.by_class[0].trials << ","
          << c.by_class[1].successes << "," << c.by_class[1].trials << "\n";
      }
      const auto avg = average(r);
      s << r << ",average," << avg.successes << "," << avg.trials << "," << percent(avg) << ",,,,\n";
    }
    return s.str();
  }

 private:
  SuccessCell& slot(const std::string& row, sim::TaskId task) {
    if (std::find(rows_.begin(), rows_.end(), row) == rows_.end()) rows_.push_back(row);
    if (std::find(tasks_.begin(), tasks_.end(), task) == tasks_.end()) tasks_.push_back(task);
    return cells_[{row, task}];
  }

  std::vector<sim::TaskId> tasks_;
  std::vector<std::string> rows_;
  std::map<std::pair<std::string, sim::TaskId>, SuccessCell> cells_;
};

// ---------------------------------------------------------------------------
// Weight summaries from the aggregated per-step CSV.

/// Rebuilds contact and free-space means from weights_csv output.
inline WeightSummary summary_from_weights_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "strategy,env_step,phi,mean_weight,rows") {
    throw FormatError(FormatError::Kind::kCorrupt, source + ": unexpected weights header");
  }
  WeightSummary w;
  double cs = 0.0, fs = 0.0;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    try {
      if (f.size() != 5) throw ValidationError("expected 5 fields");
      w.strategy = f[0];
      const double mean = std::stod(f[3]);
      const long rows = std::stol(f[4]);
      if (f[2] == "1") {
        cs += mean * static_cast<double>(rows);
        w.contact_rows += rows;
      } else {
        fs += mean * static_cast<double>(rows);
        w.free_rows += rows;
      }
    } catch (const std::exception& ex) {
      throw FormatError(FormatError::Kind::kCorrupt, source + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  w.contact_mean = w.contact_rows ? cs / static_cast<double>(w.contact_rows) : 0.0;
  w.free_mean = w.free_rows ? fs / static_cast<double>(w.free_rows) : 0.0;
  return w;
}

inline WeightSummary merge(const WeightSummary& a, const WeightSummary& b) {
  WeightSummary m;
  m.strategy = a.strategy.empty() ? b.strategy : a.strategy;
  m.contact_rows = a.contact_rows + b.contact_rows;
  m.free_rows = a.free_rows + b.free_rows;
  const double cs = a.contact_mean * static_cast<double>(a.contact_rows) +
                    b.contact_mean * static_cast<double>(b.contact_rows);
  const double fs = a.free_mean * static_cast<double>(a.free_rows) + b.free_mean * static_cast<double>(b.free_rows);
  m.contact_mean = m.contact_rows ? cs / static_cast<double>(m.contact_rows) : 0.0;
  m.free_mean = m.free_rows ? fs / static_cast<double>(m.free_rows) : 0.0;
  return m;
}

inline std::string format_g(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Run manifest.

inline constexpr const char* kVersion = "0.1.0";

struct RunManifest {
  std::string command_line;
  std::string config_hash;
  std::vector<std::string> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double seconds = 0.0;

  std::string text() const {
    std::ostringstream s;
    auto list = [&](const char* key, const std::vector<std::string>& v) {
      s << key << " =";
      for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : " ") << v[i];
      s << "\n";
    };
    s << "command = " << command_line << "\n"
      << "version = " << kVersion << "\n"
      << "config_hash = " << config_hash << "\n";
    list("seeds", seeds);
    list("inputs", inputs);
    list("outputs", outputs);
    s << "duration_seconds = " << format_g(seconds, 4) << "\n";
    return s.str();
  }
};

inline constexpr const char* kManifestName = "manifest.txt";

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  io::write_text_atomic(dir / kManifestName, m.text());
}

}  // namespace cfusion
