#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "coberl/config.hpp"
#include "coberl/error.hpp"
#include "coberl/harness/runner.hpp"
#include "coberl/metrics/metrics.hpp"
#include "coberl/numerics/checkpoint.hpp"

namespace fs = std::filesystem;
using namespace coberl;

namespace {

int train(const std::string& config_path, std::uint64_t seed, const fs::path& out_dir, bool quiet) {
  Config config = config_path.empty() ? Config{} : load_config(config_path);
  config.run.seed = seed;
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.txt");
    cfg << to_text(config);
  }
  std::ofstream csv(out_dir / "metrics.csv");
  if (!csv) throw InputError("cannot write " + (out_dir / "metrics.csv").string());
  csv << metrics::kCsvHeader << "\n";
  auto on_row = [&](const metrics::MetricsRow& row) {
    csv << metrics::format_row(row) << "\n" << std::flush;
    if (!quiet)
      std::cout << "step " << row.step << "  eval " << row.eval_return << "  return " << row.episode_return
                << "  loss_rl " << row.loss_rl << "  loss_aux " << row.loss_contrastive << std::endl;
  };
  const auto result = harness::run_training(config, on_row);
  numerics::save_checkpoint(out_dir / "checkpoint.bin",
                            numerics::Checkpoint::from_parameters(result.final_params, to_text(config)));
  std::cout << "env steps " << result.env_steps << ", learner steps " << result.learner_steps << ", sequences "
            << result.sequences_inserted << "\n";
  std::cout << "final 5% eval return " << result.summary << "\n";
  return 0;
}

int eval(const fs::path& checkpoint, std::size_t episodes, std::uint64_t seed, double epsilon) {
  const auto ckpt = numerics::load_checkpoint(checkpoint);
  if (ckpt.metadata.empty()) throw InputError(checkpoint.string() + ": checkpoint has no embedded config");
  const Config config = parse_config(ckpt.metadata);
  const auto net = harness::make_network(config);
  const auto params = ckpt.to_parameters();
  auto env = envs::make_environment(config.env, seed);
  numerics::Rng rng(seed);
  const double eps = std::isnan(epsilon) ? config.evaluator.epsilon : epsilon;
  const auto returns = harness::run_episodes(*net, params, *env, episodes, eps, rng);
  double mean = 0.0;
  for (std::size_t i = 0; i < returns.size(); ++i) {
    std::cout << "episode " << i << ": " << returns[i] << "\n";
    mean += returns[i] / static_cast<double>(returns.size());
  }
  std::cout << "mean return " << mean << " over " << returns.size() << " episodes\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CoBERL agent: training, evaluation and run summaries"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train an agent and write metrics.csv and checkpoint.bin");
  train_cmd->add_option("--config", config_path, "key = value config file (defaults when omitted)");
  train_cmd->add_option("--seed", seed, "run seed");
  train_cmd->add_option("--out", out_dir, "output directory");
  train_cmd->add_flag("--quiet", quiet, "only print the final summary");

  std::string checkpoint;
  std::size_t episodes = 5;
  std::uint64_t eval_seed = 0;
  double epsilon = std::nan("");
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  eval_cmd->add_option("--episodes", episodes, "number of episodes");
  eval_cmd->add_option("--seed", eval_seed, "environment seed");
  eval_cmd->add_option("--epsilon", epsilon, "exploration rate (default: evaluator.epsilon)");

  std::vector<std::string> csvs;
  double budget = 0.0;
  auto* sum_cmd = app.add_subcommand("summarize", "Final-5% mean, stderr and AUC over metrics CSVs");
  sum_cmd->add_option("csv", csvs, "metrics.csv files, one per seed")->required();
  sum_cmd->add_option("--budget", budget, "env-step budget (default: last step in each file)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return train(config_path, seed, out_dir, quiet);
    if (*eval_cmd) return eval(checkpoint, episodes, eval_seed, epsilon);
    if (*sum_cmd) {
      std::vector<fs::path> paths(csvs.begin(), csvs.end());
      std::cout << metrics::summarize_run(paths, budget).to_text();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
