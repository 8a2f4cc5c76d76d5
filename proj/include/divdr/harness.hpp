// SPDX-License-Identifier: Apache-2.0
//
// Experiment recipes over the trainer: run directories with config echo,
// metrics.jsonl, checkpoint and center exports; evaluation of stored runs;
// parameter sweeps; A-space exports.
#pragma once

#include <filesystem>
#include <vector>

#include "divdr/config.hpp"
#include "divdr/io.hpp"

namespace divdr {

struct RunSummary {
  std::filesystem::path run_dir;
  EvalRecord final_eval;
  RunMetrics metrics;
};

// Trains per the config into `run_dir` (created if needed). Writes
// config.json (echo), metrics.jsonl, checkpoint.bin and centers.csv. With
// `resume`, continues from the stored checkpoint.
RunSummary run_train(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                     bool resume = false);

// Loads the run's checkpoint and evaluates a named split. Writes
// eval_<split>.json into the run dir and returns the record.
EvalRecord run_eval(const std::filesystem::path& run_dir, const std::string& split);

// Gate sweep + assignment + PCA export for a split of a stored run.
void run_export_aspace(const std::filesystem::path& run_dir, const std::string& split);

struct SweepRow {
  double value = 0.0;
  EvalRecord eval;
};

// One training run per value of `param` (one of K, alpha, lambda2, lambda1),
// each in its own subdirectory; writes summary.csv sorted by value.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::string& param,
                                const std::vector<double>& values,
                                const std::filesystem::path& out_dir);

// Writes the six split caches plus manifest.json into `out_dir`.
void run_gen_data(const ExperimentConfig& config, const std::filesystem::path& out_dir);

}  // namespace divdr
