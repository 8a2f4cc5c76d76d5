// SPDX-License-Identifier: Apache-2.0
//
// The alternating optimization loop: SGD on the combined loss with the
// routing centers frozen, interleaved with periodic K-means refits of the
// centers from a fresh full-train-set gate sweep.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "divdr/clustering.hpp"
#include "divdr/lattice.hpp"
#include "divdr/loss.hpp"
#include "divdr/synth.hpp"

namespace divdr {

struct TrainConfig {
  int total_steps = 3000;
  int batch_size = 8;
  double lr0 = 0.05;
  double lr_power = 0.9;
  std::string lr_schedule = "poly";  // "poly" or "exp"
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int kmeans_interval = 50;  // steps between center refits
  int warmup_steps = 50;     // steps before the first refit; lambda2 inactive
  int eval_interval = 200;
  uint64_t seed = 1;
  int k_clusters = 3;
  int threads = 1;

  void validate() const;
};

// poly: lr0 * (1 - step/total)^power, the schedule's stated endpoint lr = 0.
// exp:  lr0 * exp(-power * step/total), a strictly decreasing alternative.
double lr_schedule(int step, const TrainConfig& config);

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// Rejects NaN gradients, naming the offending parameter.
void sgd_step(std::vector<std::pair<std::string, Tensor>>& params, std::vector<Tensor>& velocity,
              double lr, double momentum, double weight_decay);

struct StepRecord {
  int step = 0;
  double task = 0.0;
  double cost = 0.0;
  double clustering = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct EvalRecord {
  int step = 0;
  std::string split;
  double miou = 0.0;
  double expected_cost = 0.0;
  double pruned_cost = 0.0;
  std::optional<double> gate_variance;
  std::optional<double> inter;
  std::optional<double> intra;
  std::optional<double> alignment;
};

struct RunMetrics {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
};

struct TrainState {
  LatticeParams params;
  std::vector<Tensor> velocity;  // aligned with LatticeParams::named order
  CenterRegistry registry;
  int step = 0;  // next step to run
};

TrainState init_train_state(const LatticeConfig& lattice, uint64_t seed);

// Called at eval boundaries with everything needed for an atomic
// checkpoint + metrics flush. `new_steps`/`new_eval` cover records produced
// since the previous flush.
using FlushHook = std::function<void(const TrainState&, std::span<const StepRecord> new_steps,
                                     const EvalRecord& new_eval)>;

struct TrainResult {
  RunMetrics metrics;
};

TrainResult train(TrainState& state, const Dataset& train_set, const Dataset& val_set,
                  const LatticeConfig& lattice, const TrainConfig& config,
                  const LossWeights& weights, bool flip_augment,
                  const FlushHook& flush = nullptr);

// Full-split evaluation: pooled-confusion mIoU, mean expected/pruned cost,
// and the route-diversity diagnostics when the registry has centers.
EvalRecord evaluate(const LatticeParams& params, const CenterRegistry& registry,
                    const Dataset& dataset, const LatticeConfig& lattice, int threads = 1);

// Gate activations of every sample, inference mode, dataset order.
std::vector<std::vector<double>> gate_sweep(const LatticeParams& params, const Dataset& dataset,
                                            const LatticeConfig& lattice, int threads = 1);

// Pooled-count mean IoU; classes absent from both prediction and truth are
// excluded from the mean.
double miou_from_labels(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes);

// Runs fn(i) for i in [0, n); deterministic regardless of thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace divdr
