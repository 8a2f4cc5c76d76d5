// SPDX-License-Identifier: Apache-2.0
//
// divdr — gated multi-scale routing experiments.
//
//   divdr train         --config cfg.json [--out DIR] [--seed N] [--threads N] [--resume]
//   divdr eval          --out RUNDIR [--split val_x] [--threads N]
//   divdr sweep         --config cfg.json --param {K,alpha,lambda2,lambda1} --values 2,3,4
//                       [--out DIR] [--seed N] [--threads N]
//   divdr export-aspace --out RUNDIR [--split val_x]
//   divdr gen-data      --config cfg.json [--out DIR]
//
// The default output root is $DIVDR_OUT (falling back to ./runs); a run's
// directory is <root>/<experiment>. Exit codes: 0 success, 2 config error,
// 3 runtime error.

#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "divdr/harness.hpp"

namespace {

namespace fs = std::filesystem;

fs::path output_root() {
  if (const char* env = std::getenv("DIVDR_OUT")) return fs::path(env);
  return fs::path("runs");
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    size_t pos = 0;
    const double v = std::stod(item, &pos);
    if (pos != item.size()) throw divdr::ConfigError("bad value \"" + item + "\" in --values");
    out.push_back(v);
  }
  if (out.empty()) throw divdr::ConfigError("--values is empty");
  return out;
}

void print_eval(const divdr::EvalRecord& rec) {
  std::cout << "split=" << rec.split << " step=" << rec.step << " miou=" << rec.miou
            << " expected_cost=" << rec.expected_cost << " pruned_cost=" << rec.pruned_cost;
  if (rec.gate_variance) std::cout << " gate_variance=" << *rec.gate_variance;
  if (rec.inter) std::cout << " inter=" << *rec.inter;
  if (rec.intra) std::cout << " intra=" << *rec.intra;
  if (rec.alignment) std::cout << " alignment=" << *rec.alignment;
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated multi-scale routing with diversified route clustering"};
  app.require_subcommand(1);

  std::string config_path, out_dir, split, param, values_csv;
  int64_t seed = -1;
  int threads = 0;
  bool resume = false;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    if (needs_config) cmd->add_option("--config", config_path, "config JSON path")->required();
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "override train.seed");
    cmd->add_option("--threads", threads, "worker threads (default 1)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train one model into a run directory");
  add_common(train_cmd, true);
  train_cmd->add_flag("--resume", resume, "continue from the run's checkpoint");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a stored run on a split");
  eval_cmd->add_option("--out", out_dir, "run directory")->required();
  eval_cmd->add_option("--split", split, "train, train_s, train_l, val_s, val_l or val_x");
  eval_cmd->add_option("--threads", threads, "worker threads (default 1)");

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "one run per parameter value + summary.csv");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--param", param, "K, alpha, lambda2 or lambda1")->required();
  sweep_cmd->add_option("--values", values_csv, "comma-separated values")->required();

  CLI::App* export_cmd = app.add_subcommand("export-aspace", "A-space and PCA CSV exports");
  export_cmd->add_option("--out", out_dir, "run directory")->required();
  export_cmd->add_option("--split", split, "split to export");
  export_cmd->add_option("--threads", threads, "worker threads (default 1)");

  CLI::App* gen_cmd = app.add_subcommand("gen-data", "write split caches + manifest");
  add_common(gen_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto load_config = [&]() {
      divdr::ExperimentConfig c = divdr::ExperimentConfig::from_file(config_path);
      if (seed >= 0) c.train.seed = static_cast<uint64_t>(seed);
      if (threads > 0) c.train.threads = threads;
      return c;
    };

    if (train_cmd->parsed()) {
      divdr::ExperimentConfig c = load_config();
      const fs::path dir = out_dir.empty() ? output_root() / c.experiment : fs::path(out_dir);
      divdr::RunSummary s = divdr::run_train(c, dir, resume);
      std::cout << "run dir: " << s.run_dir.string() << "\n";
      print_eval(s.final_eval);
    } else if (eval_cmd->parsed()) {
      print_eval(divdr::run_eval(out_dir, split));
    } else if (sweep_cmd->parsed()) {
      divdr::ExperimentConfig c = load_config();
      const fs::path dir =
          out_dir.empty() ? output_root() / (c.experiment + "_sweep_" + param) : fs::path(out_dir);
      for (const divdr::SweepRow& row : divdr::run_sweep(c, param, parse_values(values_csv), dir)) {
        std::cout << param << "=" << row.value << " ";
        print_eval(row.eval);
      }
      std::cout << "summary: " << (dir / "summary.csv").string() << "\n";
    } else if (export_cmd->parsed()) {
      divdr::run_export_aspace(out_dir, split);
      std::cout << "exported A-space CSVs to " << out_dir << "\n";
    } else if (gen_cmd->parsed()) {
      divdr::ExperimentConfig c = load_config();
      const fs::path dir = out_dir.empty() ? output_root() / (c.experiment + "_data") : fs::path(out_dir);
      divdr::run_gen_data(c, dir);
      std::cout << "wrote dataset cache to " << dir.string() << "\n";
    }
  } catch (const divdr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
