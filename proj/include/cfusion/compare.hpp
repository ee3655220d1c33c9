#pragma once

// Strategy comparison grid: demo cache, per-cell training and evaluation,
// and report assembly from the stored per-cell artifacts.
//
//   <out>/data/<task>.cfbd                     demonstrations (shared by cells)
//   <out>/runs/<task>/<label>/seed<k>/
//       model.ckpt  loss.csv  episodes.csv  [weights.csv]

#include "cfusion/checkpoint.hpp"
#include "cfusion/config.hpp"
#include "cfusion/harness.hpp"
#include "cfusion/report.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cfusion {

struct GridRow {
  std::string label;
  StrategyTag strategy = StrategyTag::kGatedCFG;
  double alpha = 0.1;
};

inline std::vector<GridRow> grid_rows(const RunConfig& cfg) {
  std::vector<GridRow> rows;
  for (auto tag : cfg.grid.strategies) {
    rows.push_back({std::string(to_string(tag)), tag, cfg.train.alpha});
    if (tag != StrategyTag::kAuxGoals) continue;
    for (double a : cfg.grid.aux_alphas) {
      if (a == cfg.train.alpha) continue;
      rows.push_back({"aux_goals_a" + format_g(a), tag, a});
    }
  }
  return rows;
}

inline TrainConfig cell_config(const RunConfig& cfg, sim::TaskId task, const GridRow& row, std::uint64_t seed) {
  auto t = cfg.train;
  t.task = task;
  t.strategy = row.strategy;
  t.alpha = row.alpha;
  t.seed = seed;
  return t;
}

/// Evaluation episodes for a training seed. Shared by every strategy, so
/// rows are compared on identical episode layouts.
inline std::uint64_t cell_eval_seed(const RunConfig& cfg, std::uint64_t train_seed) {
  return derive_seed(cfg.eval.seed, StreamDomain::kEvalEpisode, train_seed);
}

inline std::filesystem::path cell_dir(const std::filesystem::path& out, sim::TaskId task, const std::string& label,
                                      std::uint64_t seed) {
  return out / "runs" / std::string(sim::to_string(task)) / label / ("seed" + std::to_string(seed));
}

inline std::filesystem::path demo_path(const std::filesystem::path& out, sim::TaskId task) {
  return out / "data" / (std::string(sim::to_string(task)) + ".cfbd");
}

inline bool records_weights(StrategyTag t) { return t == StrategyTag::kGatedCFG || is_moe(t); }

struct CompareOptions {
  bool train_missing = true;
  std::function<void(const std::string&)> log;
};

/// Loads the cached demo set for a task, generating it when absent or when
/// its size disagrees with the config.
inline Dataset cached_demos(const RunConfig& cfg, sim::TaskId task, const std::filesystem::path& out,
                            const CompareOptions& opt) {
  const auto path = demo_path(out, task);
  if (std::filesystem::exists(path)) {
    try {
      auto ds = load_dataset(path);
      if (ds.task == task && static_cast<int>(ds.episodes.size()) == cfg.train.demos) return ds;
    } catch (const IoError&) {
      // regenerate below
    }
  }
  if (opt.log) opt.log("generating " + std::to_string(cfg.train.demos) + " demos for " + std::string(sim::to_string(task)));
  std::filesystem::create_directories(path.parent_path());
  return generate_demos(task, cfg.train.demos, cfg.train.seed, path);
}

/// Trains and evaluates every missing cell of the grid. Returns the cells
/// that remain missing (only possible with train_missing off).
inline std::vector<std::string> run_grid(const RunConfig& cfg, const std::filesystem::path& out,
                                         const CompareOptions& opt = {}) {
  namespace fs = std::filesystem;
  std::vector<std::string> gaps;
  const auto rows = grid_rows(cfg);
  for (auto task : cfg.grid.tasks) {
    std::optional<Dataset> ds;
    for (const auto& row : rows) {
      for (auto seed : cfg.grid.seeds) {
        const auto dir = cell_dir(out, task, row.label, seed);
        const auto tcfg = cell_config(cfg, task, row, seed);
        const auto name = std::string(sim::to_string(task)) + "/" + row.label + "/seed" + std::to_string(seed);
        std::optional<Checkpoint> ck;
        if (fs::exists(dir / "model.ckpt")) {
          try {
            auto loaded = load_checkpoint(dir / "model.ckpt", row.strategy);
            if (loaded.config == tcfg) ck = std::move(loaded);
          } catch (const IoError&) {
            // stale or damaged: treated as missing
          }
        }
        if (ck && fs::exists(dir / "episodes.csv")) continue;
        if (!ck) {
          if (!opt.train_missing) {
            gaps.push_back(name);
            continue;
          }
          if (!ds) ds = cached_demos(cfg, task, out, opt);
          const auto t0 = std::chrono::steady_clock::now();
          auto trained = train_policy(tcfg, *ds);
          fs::create_directories(dir);
          save_checkpoint(dir / "model.ckpt", trained.checkpoint);
          io::write_text_atomic(dir / "loss.csv", loss_curve_csv(trained.curve));
          ck = std::move(trained.checkpoint);
          if (opt.log) {
            opt.log("trained " + name + " in " +
                    format_g(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 3) + " s");
          }
        }
        const auto ev = evaluate_checkpoint(*ck, cfg.eval.episodes, cell_eval_seed(cfg, seed), records_weights(row.strategy));
        const auto summary = summarize(ev);
        if (records_weights(row.strategy)) {
          io::write_text_atomic(dir / "weights.csv", weights_csv(ev.trace, row.label));
        }
        io::write_text_atomic(dir / "episodes.csv", episodes_csv(summary));
        if (opt.log) opt.log("evaluated " + name + ": " + std::to_string(ev.successes) + "/" + std::to_string(ev.trials));
      }
    }
  }
  return gaps;
}

// ---------------------------------------------------------------------------
// Report assembly.

struct GridReport {
  SuccessTable table;
  std::map<std::pair<std::string, sim::TaskId>, AttemptMetrics> attempts;
  std::map<std::pair<std::string, sim::TaskId>, WeightSummary> weights;
  std::vector<std::string> gaps;

  WeightSummary pooled_weights(const std::string& label) const {
    WeightSummary w;
    w.strategy = label;
    for (const auto& [key, s] : weights) {
      if (key.first == label) w = merge(w, s);
    }
    return w;
  }
  bool has_weights(const std::string& label) const {
    for (const auto& [key, s] : weights) {
      if (key.first == label) return true;
    }
    return false;
  }
};

/// Builds the report from stored cell artifacts only, so regenerating it
/// needs no training or evaluation. A cell counts only when every seed is
/// present; partial cells are listed as gaps.
inline GridReport collect_report(const RunConfig& cfg, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  GridReport r;
  const auto rows = grid_rows(cfg);
  std::vector<std::string> labels;
  for (const auto& row : rows) labels.push_back(row.label);
  r.table = SuccessTable(cfg.grid.tasks, labels);
  for (auto task : cfg.grid.tasks) {
    for (const auto& row : rows) {
      std::vector<EpisodeSummary> pooled;
      std::optional<WeightSummary> weights;
      bool complete = true;
      for (auto seed : cfg.grid.seeds) {
        const auto dir = cell_dir(out, task, row.label, seed);
        const auto name = std::string(sim::to_string(task)) + "/" + row.label + "/seed" + std::to_string(seed);
        if (!fs::exists(dir / "episodes.csv")) {
          r.gaps.push_back(name);
          complete = false;
          continue;
        }
        const auto part = parse_episodes_csv(io::read_text(dir / "episodes.csv"), (dir / "episodes.csv").string());
        pooled.insert(pooled.end(), part.begin(), part.end());
        if (fs::exists(dir / "weights.csv")) {
          auto w = summary_from_weights_csv(io::read_text(dir / "weights.csv"), (dir / "weights.csv").string());
          weights = weights ? merge(*weights, w) : w;
        }
      }
      if (!complete) continue;
      r.table.add(row.label, task, pooled);
      r.attempts[{row.label, task}] = attempt_metrics(pooled);
      if (weights) {
        weights->strategy = row.label;
        r.weights[{row.label, task}] = *weights;
      }
    }
  }
  return r;
}

/// Report files keyed by name. Contents depend only on the report and the
/// grid, never on timing.
inline std::map<std::string, std::string> render_report(const GridReport& r, const RunConfig& cfg) {
  std::map<std::string, std::string> files;
  std::ostringstream md;
  md << "# Fusion strategy comparison\n\n"
     << "Pooled over training seeds";
  for (std::size_t i = 0; i < cfg.grid.seeds.size(); ++i) md << (i ? ", " : " ") << cfg.grid.seeds[i];
  md << " with " << cfg.eval.episodes << " evaluation episodes per checkpoint. "
     << "Averages pool counts across tasks (trial-weighted).\n\n"
     << "## Success rate\n\n"
     << r.table.markdown() << "\n";

  const auto& tasks = r.table.tasks();
  if (std::find(tasks.begin(), tasks.end(), sim::TaskId::kWeighSort) != tasks.end()) {
    md << "## WeighSort by bottle mass\n\n"
       << r.table.breakdown_markdown(sim::TaskId::kWeighSort, {"light", "heavy"}) << "\n";
  }

  std::ostringstream attempts_csv;
  attempts_csv << "strategy,task,episodes,successes,first_attempt_successes,first_attempt_rate,avg_horizon\n";
  md << "## Single-attempt success and task horizon\n\n"
     << "Failures count as the full " << sim::kHorizonCap << "-step budget.\n\n"
     << "| Strategy |";
  for (auto t : tasks) md << " " << task_title(t) << " first attempt | " << task_title(t) << " horizon |";
  md << "\n|---|";
  for (std::size_t i = 0; i < 2 * tasks.size(); ++i) md << "---|";
  md << "\n";
  for (const auto& label : r.table.rows()) {
    md << "| " << label << " |";
    for (auto t : tasks) {
      auto it = r.attempts.find({label, t});
      if (it == r.attempts.end()) {
        md << " missing | missing |";
        continue;
      }
      const auto& m = it->second;
      md << " " << percent(m.first_attempt_successes, m.episodes) << " | " << format_g(m.avg_horizon(), 4) << " |";
      attempts_csv << label << "," << sim::to_string(t) << "," << m.episodes << "," << m.successes << ","
                   << m.first_attempt_successes << "," << format_g(m.first_attempt_rate(), 9) << ","
                   << format_g(m.avg_horizon(), 9) << "\n";
    }
    md << "\n";
  }
  md << "\n## Torque-side weights\n\n";
  std::ostringstream weights_csv_out;
  weights_csv_out << "strategy,task,contact_rows,free_rows,contact_mean,free_mean,delta\n";
  bool any = false;
  for (const auto& label : r.table.rows()) any = any || r.has_weights(label);
  if (!any) {
    md << "No weight traces were recorded for this grid.\n";
  } else {
    md << "Mean torque-side weight (w_torque for gated_cfg, router w_tor for the MoE family) over denoising steps "
          "with the contact gate on and off.\n\n"
       << "| Strategy | contact mean | free-space mean | difference |\n|---|---|---|---|\n";
    for (const auto& label : r.table.rows()) {
      if (!r.has_weights(label)) continue;
      const auto w = r.pooled_weights(label);
      md << "| " << label << " | " << format_g(w.contact_mean) << " | " << format_g(w.free_mean) << " | "
         << format_g(w.delta()) << " |\n";
      for (auto t : tasks) {
        auto it = r.weights.find({label, t});
        if (it == r.weights.end()) continue;
        const auto& s = it->second;
        weights_csv_out << label << "," << sim::to_string(t) << "," << s.contact_rows << "," << s.free_rows << ","
                        << format_g(s.contact_mean, 17) << "," << format_g(s.free_mean, 17) << ","
                        << format_g(s.delta(), 17) << "\n";
      }
    }
  }
  if (!r.gaps.empty()) {
    md << "\n## Missing cells\n\n";
    for (const auto& g : r.gaps) md << "- " << g << "\n";
  }
  files["report.md"] = md.str();
  files["success.csv"] = r.table.csv();
  files["attempts.csv"] = attempts_csv.str();
  files["weights_summary.csv"] = weights_csv_out.str();
  return files;
}

inline void emit_report(const GridReport& r, const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : render_report(r, cfg)) io::write_text_atomic(dir / name, text);
}

}  // namespace cfusion
