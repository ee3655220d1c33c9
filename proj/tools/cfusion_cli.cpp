// cfusion: demo generation, training, evaluation, comparison grids and
// weight analysis for vision/torque fusion diffusion policies.

#include "cfusion/app.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace cfusion;

namespace {

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

// Options are collected as strings and converted by the library parsers so
// that error messages list the valid values.
sim::TaskId to_task(const std::string& s) { return sim::parse_task(s); }
StrategyTag to_strategy(const std::string& s) { return parse_strategy(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Vision/torque fusion strategies for diffusion policies"};
  cli.require_subcommand(1);
  const auto command_line = join_args(argc, argv);

  auto* demo = cli.add_subcommand("demo-gen", "Generate scripted expert demonstrations");
  std::string demo_task = "weigh_sort";
  app::DemoGenArgs demo_args;
  std::string demo_out;
  demo->add_option("--task", demo_task, "weigh_sort, twist_pull or lid_open")->capture_default_str();
  demo->add_option("-n,--episodes", demo_args.episodes, "Number of demonstrations")->capture_default_str();
  demo->add_option("--seed", demo_args.seed, "Root seed")->capture_default_str();
  demo->add_option("--out", demo_out, "Output dataset file (.cfbd)")->required();

  auto* train = cli.add_subcommand("train", "Train one strategy on one task");
  app::TrainArgs train_args;
  std::string train_task, train_strategy, train_config, train_data, train_out;
  std::uint64_t train_seed = 0;
  int train_epochs = 0;
  train->add_option("--task", train_task, "Task (overrides the config)");
  train->add_option("--strategy", train_strategy, "Strategy tag (overrides the config)");
  train->add_option("--config", train_config, "Config file")->check(CLI::ExistingFile);
  train->add_option("--data", train_data, "Demonstration dataset; generated from the config when omitted");
  auto* seed_opt = train->add_option("--seed", train_seed, "Training seed (overrides the config)");
  auto* epochs_opt = train->add_option("--epochs", train_epochs, "Epochs (overrides the config)");
  train->add_option("--out", train_out, "Output directory")->required();

  auto* eval = cli.add_subcommand("eval", "Evaluate a checkpoint");
  app::EvalArgs eval_args;
  std::string eval_ckpt, eval_task, eval_strategy, eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--task", eval_task, "Expected task");
  eval->add_option("--strategy", eval_strategy, "Expected strategy");
  eval->add_option("--episodes", eval_args.episodes, "Evaluation episodes")->capture_default_str();
  eval->add_option("--seed", eval_args.seed, "Evaluation seed")->capture_default_str();
  eval->add_option("--out", eval_out, "Directory for summary, episodes and traces");

  auto* cmp = cli.add_subcommand("compare", "Train and evaluate a strategy grid and write the report");
  app::CompareArgs cmp_args;
  std::string cmp_grid, cmp_out;
  bool cmp_no_train = false;
  cmp->add_option("--grid", cmp_grid, "Grid config file")->check(CLI::ExistingFile);
  cmp->add_option("--out", cmp_out, "Output directory or report .md path")->required();
  cmp->add_flag("--no-train", cmp_no_train, "Do not train missing cells; report them as gaps");

  auto* aw = cli.add_subcommand("analyze-weights", "Summarize guidance and router weights from traces");
  app::AnalyzeArgs aw_args;
  std::vector<std::string> aw_traces;
  std::string aw_out;
  aw->add_option("--traces", aw_traces, "Trace files or directories")->required();
  aw->add_option("--out", aw_out, "Directory for summary and plot CSVs");

  auto* st = cli.add_subcommand("selftest", "Run the identity, gradient and diffusion invariant suites");
  int st_instances = 20;
  st->add_option("--instances", st_instances, "Random instances per gradient check")->capture_default_str();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*demo) {
      demo_args.task = to_task(demo_task);
      demo_args.out = demo_out;
      app::demo_gen(demo_args, std::cout);
    } else if (*train) {
      if (!train_task.empty()) train_args.task = to_task(train_task);
      if (!train_strategy.empty()) train_args.strategy = to_strategy(train_strategy);
      if (!train_config.empty()) train_args.config = train_config;
      if (!train_data.empty()) train_args.data = train_data;
      if (seed_opt->count()) train_args.seed = train_seed;
      if (epochs_opt->count()) train_args.epochs = train_epochs;
      train_args.out = train_out;
      train_args.command_line = command_line;
      app::train(train_args, std::cout);
    } else if (*eval) {
      eval_args.checkpoint = eval_ckpt;
      if (!eval_task.empty()) eval_args.task = to_task(eval_task);
      if (!eval_strategy.empty()) eval_args.strategy = to_strategy(eval_strategy);
      if (!eval_out.empty()) eval_args.out = eval_out;
      eval_args.command_line = command_line;
      app::eval(eval_args, std::cout);
    } else if (*cmp) {
      if (!cmp_grid.empty()) cmp_args.grid = cmp_grid;
      cmp_args.out = cmp_out;
      cmp_args.train_missing = !cmp_no_train;
      cmp_args.command_line = command_line;
      app::compare(cmp_args, std::cout);
    } else if (*aw) {
      for (const auto& t : aw_traces) aw_args.traces.emplace_back(t);
      if (!aw_out.empty()) aw_args.out = aw_out;
      aw_args.command_line = command_line;
      app::analyze(aw_args, std::cout);
    } else if (*st) {
      if (st_instances < 1) throw ValidationError("--instances must be >= 1");
      if (!app::selftest(std::cout, st_instances)) return kExitValidation;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}
