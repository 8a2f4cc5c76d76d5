// SPDX-License-Identifier: Apache-2.0

#include "divdr/harness.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace divdr {

namespace fs = std::filesystem;
using nlohmann::json;

RunSummary run_train(const ExperimentConfig& config, const fs::path& run_dir, bool resume) {
  config.validate();  // no partial run dir on a bad config
  fs::create_directories(run_dir);
  const fs::path checkpoint = run_dir / "checkpoint.bin";
  const fs::path metrics_path = run_dir / "metrics.jsonl";

  TrainState state;
  if (resume && fs::exists(checkpoint)) {
    state = load_checkpoint(checkpoint, config.lattice);
  } else {
    state = init_train_state(config.lattice, config.train.seed);
    std::ofstream(metrics_path, std::ios::trunc);  // fresh run, fresh metrics
  }
  config.save(run_dir / "config.json");

  const Subset subset = subset_from_name(config.data_subset);
  const Dataset train_set = generate(config.data, subset, false);
  const Dataset val_set = generate(config.data, subset, true);

  FlushHook flush = [&](const TrainState& st, std::span<const StepRecord> new_steps,
                        const EvalRecord& ev) {
    std::vector<std::string> lines;
    lines.reserve(new_steps.size() + 1);
    for (const StepRecord& r : new_steps) lines.push_back(step_record_json(r));
    lines.push_back(eval_record_json(ev));
    append_jsonl(metrics_path, lines);
    save_checkpoint(checkpoint, st, config.lattice);
  };

  RunSummary summary;
  summary.run_dir = run_dir;
  TrainResult result = train(state, train_set, val_set, config.lattice, config.train, config.loss,
                             config.data.flip_augment, flush);
  summary.metrics = std::move(result.metrics);
  if (!summary.metrics.evals.empty()) summary.final_eval = summary.metrics.evals.back();

  if (state.registry.initialized) write_centers_csv(run_dir / "centers.csv", state.registry);
  return summary;
}

namespace {

struct LoadedRun {
  ExperimentConfig config;
  TrainState state;
};

LoadedRun load_run(const fs::path& run_dir) {
  const fs::path config_path = run_dir / "config.json";
  const fs::path checkpoint = run_dir / "checkpoint.bin";
  if (!fs::exists(config_path)) throw ConfigError("no config.json in " + run_dir.string());
  if (!fs::exists(checkpoint))
    throw std::runtime_error("no checkpoint.bin in " + run_dir.string());
  LoadedRun run{ExperimentConfig::from_file(config_path), {}};
  run.state = load_checkpoint(checkpoint, run.config.lattice);
  return run;
}

std::string sanitize_split(const ExperimentConfig& config, const std::string& split) {
  return split.empty() ? config.default_val_split() : split;
}

}  // namespace

EvalRecord run_eval(const fs::path& run_dir, const std::string& split_arg) {
  LoadedRun run = load_run(run_dir);
  const std::string split = sanitize_split(run.config, split_arg);
  const Dataset ds = make_split(run.config.data, split);
  EvalRecord rec =
      evaluate(run.state.params, run.state.registry, ds, run.config.lattice, run.config.train.threads);
  rec.step = run.state.step;

  json j = json::parse(eval_record_json(rec));
  std::ofstream os(run_dir / ("eval_" + split + ".json"), std::ios::trunc);
  os << j.dump(2) << "\n";
  return rec;
}

void run_export_aspace(const fs::path& run_dir, const std::string& split_arg) {
  LoadedRun run = load_run(run_dir);
  const std::string split = sanitize_split(run.config, split_arg);
  const Dataset ds = make_split(run.config.data, split);
  const auto gates = gate_sweep(run.state.params, ds, run.config.lattice, run.config.train.threads);

  std::vector<int> truth(ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) truth[i] = ds.samples[i].true_subset;
  std::vector<int> assign;
  if (run.state.registry.initialized) assign = assign_clusters(gates, run.state.registry);

  write_aspace_csv(run_dir / ("aspace_" + split + ".csv"), gates, truth, assign);
  write_edges_json(run_dir / "aspace_edges.json", run.config.lattice);
  const PcaProjection proj = pca_2d(gates);
  write_aspace_pca_csv(run_dir / ("aspace_" + split + "_pca.csv"), proj, assign);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::string& param,
                                const std::vector<double>& values, const fs::path& out_dir) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  if (param != "K" && param != "alpha" && param != "lambda2" && param != "lambda1")
    throw ConfigError("sweep: unknown parameter \"" + param +
                      "\" (expected K, alpha, lambda2 or lambda1)");

  std::vector<double> sorted(values);
  std::sort(sorted.begin(), sorted.end());

  std::vector<SweepRow> rows;
  for (double v : sorted) {
    ExperimentConfig c = base;
    std::string tag;
    if (param == "K") {
      c.train.k_clusters = static_cast<int>(v);
      if (static_cast<double>(c.train.k_clusters) != v)
        throw ConfigError("sweep: K values must be integers");
      tag = "K_" + std::to_string(c.train.k_clusters);
    } else if (param == "alpha") {
      c.loss.alpha = v;
      tag = "alpha_" + format_double(v);
    } else if (param == "lambda2") {
      c.loss.lambda2 = v;
      tag = "lambda2_" + format_double(v);
    } else {
      c.loss.lambda1 = v;
      tag = "lambda1_" + format_double(v);
    }
    c.experiment = base.experiment + "_" + tag;
    RunSummary s = run_train(c, out_dir / tag);
    rows.push_back({v, s.final_eval});
  }

  std::ofstream os(out_dir / "summary.csv", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write sweep summary");
  os << "param,value,miou,expected_cost,inter,intra,alignment\n";
  for (const SweepRow& r : rows) {
    os << param << "," << format_double(r.value) << "," << format_double(r.eval.miou) << ","
       << format_double(r.eval.expected_cost) << ","
       << (r.eval.inter ? format_double(*r.eval.inter) : "") << ","
       << (r.eval.intra ? format_double(*r.eval.intra) : "") << ","
       << (r.eval.alignment ? format_double(*r.eval.alignment) : "") << "\n";
  }
  return rows;
}

void run_gen_data(const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  json manifest;
  manifest["config"] = json::parse(config.to_json_text());
  for (const char* split : {"train_s", "train_l", "train_x", "val_s", "val_l", "val_x"}) {
    const Dataset ds = make_split(config.data, split);
    const fs::path file = out_dir / (std::string(split) + ".bin");
    save_dataset_cache(file, ds);
    manifest["splits"][split]["file"] = file.filename().string();
    manifest["splits"][split]["count"] = ds.samples.size();
    manifest["splits"][split]["content_hash"] = dataset_content_hash(ds);
  }
  std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << "\n";
}

}  // namespace divdr
