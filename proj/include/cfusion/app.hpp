#pragma once

// Command implementations behind the CLI. Each writes its artifacts
// atomically and one manifest per output directory.

#include "cfusion/check/invariants.hpp"
#include "cfusion/checkpoint.hpp"
#include "cfusion/compare.hpp"
#include "cfusion/config.hpp"
#include "cfusion/dataset.hpp"
#include "cfusion/harness.hpp"
#include "cfusion/report.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace cfusion::app {

namespace fs = std::filesystem;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// demo-gen

struct DemoGenArgs {
  sim::TaskId task = sim::TaskId::kWeighSort;
  int episodes = 200;
  std::uint64_t seed = 0;
  fs::path out;
};

inline Dataset demo_gen(const DemoGenArgs& a, std::ostream& log) {
  if (a.out.empty()) throw ValidationError("demo-gen needs an output path");
  if (a.out.has_parent_path()) ensure_dir(a.out.parent_path());
  auto ds = generate_demos(a.task, a.episodes, a.seed, a.out);
  log << "wrote " << ds.episodes.size() << " " << sim::to_string(a.task) << " demos (" << ds.total_steps()
      << " steps) to " << a.out.string() << "\n";
  return ds;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::optional<fs::path> config;
  std::optional<sim::TaskId> task;
  std::optional<StrategyTag> strategy;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<fs::path> data;
  fs::path out;
  std::string command_line;
};

inline TrainConfig resolve_train_config(const TrainArgs& a) {
  auto cfg = a.config ? load_config(*a.config).train : TrainConfig{};
  if (a.task) cfg.task = *a.task;
  if (a.strategy) cfg.strategy = *a.strategy;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) {
    if (*a.epochs < 1) throw ValidationError("--epochs must be >= 1");
    cfg.epochs = *a.epochs;
  }
  return cfg;
}

inline TrainResult train(const TrainArgs& a, std::ostream& log) {
  if (a.out.empty()) throw ValidationError("train needs an output directory");
  Stopwatch clock;
  const auto cfg = resolve_train_config(a);
  Dataset ds;
  std::string input;
  if (a.data) {
    ds = load_dataset(*a.data);
    input = a.data->string();
  } else {
    ds.task = cfg.task;
    ds.episodes = sim::generate_demo_episodes(cfg.task, cfg.demos, cfg.seed);
    input = "generated:" + std::string(sim::to_string(cfg.task)) + ":" + std::to_string(cfg.demos) + ":seed" +
            std::to_string(cfg.seed);
  }
  auto result = train_policy(cfg, ds, [&](const EpochLoss& e) {
    if (e.epoch == 1 || e.epoch == cfg.epochs || e.epoch % 10 == 0) {
      log << "epoch " << e.epoch << " loss " << format_g(e.loss) << "\n";
    }
  });
  ensure_dir(a.out);
  save_checkpoint(a.out / "model.ckpt", result.checkpoint);
  io::write_text_atomic(a.out / "loss.csv", loss_curve_csv(result.curve));
  RunManifest m;
  m.command_line = a.command_line;
  m.config_hash = hex64(config_hash(cfg));
  m.seeds = {std::to_string(cfg.seed)};
  m.inputs = {input};
  m.outputs = {(a.out / "model.ckpt").string(), (a.out / "loss.csv").string()};
  m.seconds = clock.seconds();
  write_manifest(a.out, m);
  log << "wrote " << (a.out / "model.ckpt").string() << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  fs::path checkpoint;
  std::optional<sim::TaskId> task;
  std::optional<StrategyTag> strategy;
  int episodes = 100;
  std::uint64_t seed = 1000;
  std::optional<fs::path> out;
  std::string command_line;
};

struct EvalOutput {
  EvalResult result;
  std::vector<EpisodeSummary> summary;
  AttemptMetrics attempts;
  std::optional<WeightSummary> weights;
};

inline std::string eval_summary_text(const Checkpoint& ck, const EvalOutput& o) {
  std::ostringstream s;
  const auto& r = o.result;
  s << "strategy = " << to_string(ck.config.strategy) << "\n"
    << "task = " << sim::to_string(r.task) << "\n"
    << "successes = " << r.successes << "\n"
    << "trials = " << r.trials << "\n"
    << "success_rate = " << percent(r.successes, r.trials) << "\n"
    << "first_attempt_rate = " << percent(o.attempts.first_attempt_successes, o.attempts.episodes) << "\n"
    << "avg_horizon = " << format_g(o.attempts.avg_horizon(), 6) << "\n";
  if (r.task == sim::TaskId::kWeighSort) {
    SuccessTable t({r.task}, {"x"});
    t.add("x", r.task, o.summary);
    const auto& c = t.cell("x", r.task);
    s << "light = " << c.by_class[0].successes << "/" << c.by_class[0].trials << "\n"
      << "heavy = " << c.by_class[1].successes << "/" << c.by_class[1].trials << "\n";
  }
  if (o.weights) {
    s << "weight_contact_mean = " << format_g(o.weights->contact_mean, 9) << "\n"
      << "weight_free_mean = " << format_g(o.weights->free_mean, 9) << "\n";
  }
  return s.str();
}

inline EvalOutput eval(const EvalArgs& a, std::ostream& log) {
  if (a.episodes < 1) throw ValidationError("--episodes must be >= 1");
  Stopwatch clock;
  const auto ck = load_checkpoint(a.checkpoint, a.strategy);
  if (a.task && *a.task != ck.config.task) {
    throw ValidationError("checkpoint was trained on '" + std::string(sim::to_string(ck.config.task)) +
                          "' but --task is '" + std::string(sim::to_string(*a.task)) + "'");
  }
  const bool trace = records_weights(ck.config.strategy);
  EvalOutput o;
  o.result = evaluate_checkpoint(ck, a.episodes, a.seed, trace);
  o.summary = summarize(o.result);
  o.attempts = attempt_metrics(std::span<const EpisodeSummary>(o.summary));
  if (trace) o.weights = analyze_weights(o.result.trace, std::string(to_string(ck.config.strategy)));
  const auto text = eval_summary_text(ck, o);
  log << text;
  if (a.out) {
    ensure_dir(*a.out);
    std::vector<std::string> outputs;
    auto put = [&](const std::string& name, const std::string& body) {
      io::write_text_atomic(*a.out / name, body);
      outputs.push_back((*a.out / name).string());
    };
    put("summary.txt", text);
    put("episodes.csv", episodes_csv(o.summary));
    if (trace) put("trace.csv", trace_csv(o.result.trace, to_string(ck.config.strategy)));
    RunManifest m;
    m.command_line = a.command_line;
    m.config_hash = hex64(config_hash(ck.config));
    m.seeds = {std::to_string(a.seed)};
    m.inputs = {a.checkpoint.string()};
    m.outputs = outputs;
    m.seconds = clock.seconds();
    write_manifest(*a.out, m);
  }
  return o;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
  std::optional<fs::path> grid;
  fs::path out;  // directory, or a .md path whose directory holds the runs
  bool train_missing = true;
  std::string command_line;
};

inline GridReport compare(const CompareArgs& a, std::ostream& log) {
  Stopwatch clock;
  const auto cfg = a.grid ? load_config(*a.grid) : RunConfig{};
  fs::path dir = a.out;
  std::string report_name = "report.md";
  if (a.out.extension() == ".md") {
    dir = a.out.has_parent_path() ? a.out.parent_path() : fs::path(".");
    report_name = a.out.filename().string();
  }
  ensure_dir(dir);
  CompareOptions opt;
  opt.train_missing = a.train_missing;
  opt.log = [&](const std::string& m) { log << m << "\n" << std::flush; };
  run_grid(cfg, dir, opt);
  auto report = collect_report(cfg, dir);
  auto files = render_report(report, cfg);
  std::vector<std::string> outputs;
  for (const auto& [name, text] : files) {
    const auto target = dir / (name == "report.md" ? report_name : name);
    io::write_text_atomic(target, text);
    outputs.push_back(target.string());
  }
  io::write_text_atomic(dir / "grid.cfg", serialize(cfg));
  RunManifest m;
  m.command_line = a.command_line;
  m.config_hash = hex64(io::fnv1a(serialize(cfg)));
  for (auto s : cfg.grid.seeds) m.seeds.push_back(std::to_string(s));
  if (a.grid) m.inputs = {a.grid->string()};
  m.outputs = outputs;
  m.seconds = clock.seconds();
  write_manifest(dir, m);
  log << "wrote " << (dir / report_name).string() << "\n";
  for (const auto& g : report.gaps) log << "missing cell: " << g << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// analyze-weights

struct AnalyzeArgs {
  std::vector<fs::path> traces;  // trace files or directories searched recursively
  std::optional<fs::path> out;
  std::string command_line;
};

inline std::vector<fs::path> find_traces(const std::vector<fs::path>& roots) {
  std::vector<fs::path> files;
  for (const auto& root : roots) {
    if (!fs::exists(root)) throw IoError("no such file or directory: " + root.string());
    if (fs::is_regular_file(root)) {
      files.push_back(root);
      continue;
    }
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().filename() == "trace.csv") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<WeightSummary> analyze(const AnalyzeArgs& a, std::ostream& log) {
  Stopwatch clock;
  const auto files = find_traces(a.traces);
  std::map<std::string, std::vector<TraceRow>> by_strategy;
  for (const auto& f : files) {
    auto [rows, strategy] = parse_trace_csv(io::read_text(f), f.string());
    if (rows.empty()) continue;
    auto& dst = by_strategy[strategy];
    dst.insert(dst.end(), rows.begin(), rows.end());
  }
  std::vector<WeightSummary> out;
  std::ostringstream summary;
  summary << "strategy,contact_rows,free_rows,contact_mean,free_mean,delta,ratio\n";
  if (by_strategy.empty()) log << "no weight traces found\n";
  for (const auto& [strategy, rows] : by_strategy) {
    auto s = analyze_weights(rows, strategy);
    log << strategy << ": contact mean " << format_g(s.contact_mean) << " (" << s.contact_rows << " rows), free mean "
        << format_g(s.free_mean) << " (" << s.free_rows << " rows), difference " << format_g(s.delta()) << "\n";
    summary << strategy << "," << s.contact_rows << "," << s.free_rows << "," << format_g(s.contact_mean, 17) << ","
            << format_g(s.free_mean, 17) << "," << format_g(s.delta(), 17) << "," << format_g(s.ratio(), 17) << "\n";
    out.push_back(std::move(s));
  }
  if (a.out) {
    ensure_dir(*a.out);
    std::vector<std::string> outputs;
    io::write_text_atomic(*a.out / "weights_summary.csv", summary.str());
    outputs.push_back((*a.out / "weights_summary.csv").string());
    for (const auto& [strategy, rows] : by_strategy) {
      const auto name = "weights_" + strategy + ".csv";
      io::write_text_atomic(*a.out / name, weights_csv(rows, strategy));
      outputs.push_back((*a.out / name).string());
    }
    RunManifest m;
    m.command_line = a.command_line;
    m.config_hash = "none";
    for (const auto& f : files) m.inputs.push_back(f.string());
    m.outputs = outputs;
    m.seconds = clock.seconds();
    write_manifest(*a.out, m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// selftest

inline bool print_suite(const check::SuiteResult& s, std::ostream& log) {
  log << (s.pass() ? "PASS " : "FAIL ") << s.name << " (" << s.checks.size() << " checks, " << format_g(s.seconds, 3)
      << " s)";
  if (!s.pass()) log << ": " << s.failures();
  log << "\n";
  return s.pass();
}

inline bool selftest(std::ostream& log, int gradient_instances = 20) {
  bool ok = print_suite(check::identity_suite(), log);
  ok = print_suite(check::gradient_suite(gradient_instances), log) && ok;
  ok = print_suite(check::diffusion_suite().suite, log) && ok;
  return ok;
}

}  // namespace cfusion::app
