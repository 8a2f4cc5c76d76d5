// SPDX-License-Identifier: Apache-2.0

#include "divdr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace divdr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<int> flipped_mask(const std::vector<int>& mask, int sz) {
  std::vector<int> out(mask.size());
  for (int y = 0; y < sz; ++y)
    for (int x = 0; x < sz; ++x)
      out[static_cast<size_t>(y) * sz + x] = mask[static_cast<size_t>(y) * sz + (sz - 1 - x)];
  return out;
}

std::vector<double> flipped_image(const std::vector<double>& img, int sz) {
  std::vector<double> out(img.size());
  for (int y = 0; y < sz; ++y)
    for (int x = 0; x < sz; ++x)
      out[static_cast<size_t>(y) * sz + x] = img[static_cast<size_t>(y) * sz + (sz - 1 - x)];
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  require(total_steps >= 1 && batch_size >= 1, "TrainConfig: steps and batch size must be positive");
  require(lr0 >= 0.0 && momentum >= 0.0 && momentum < 1.0 && weight_decay >= 0.0,
          "TrainConfig: bad optimizer settings");
  require(lr_schedule == "poly" || lr_schedule == "exp",
          "TrainConfig: lr_schedule must be \"poly\" or \"exp\", got \"" + lr_schedule + "\"");
  require(kmeans_interval >= 1, "TrainConfig: kmeans_interval must be >= 1");
  require(warmup_steps >= 1, "TrainConfig: warmup_steps must be >= 1");
  require(eval_interval >= 1, "TrainConfig: eval_interval must be >= 1");
  require(k_clusters >= 2 && k_clusters <= 16, "TrainConfig: K must be in [2,16]");
  require(threads >= 1, "TrainConfig: threads must be >= 1");
}

double lr_schedule(int step, const TrainConfig& config) {
  require(step >= 0 && step <= config.total_steps, "lr_schedule: step outside [0, total_steps]");
  const double t = static_cast<double>(step) / static_cast<double>(config.total_steps);
  if (config.lr_schedule == "exp") return config.lr0 * std::exp(-config.lr_power * t);
  return config.lr0 * std::pow(1.0 - t, config.lr_power);
}

void sgd_step(std::vector<std::pair<std::string, Tensor>>& params, std::vector<Tensor>& velocity,
              double lr, double momentum, double weight_decay) {
  require(params.size() == velocity.size(), "sgd_step: velocity not aligned with parameters");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    Tensor& v = velocity[i];
    require(p.numel() == v.numel(), "sgd_step: velocity shape mismatch at " + params[i].first);
    const double* g = p.grad();
    require(g != nullptr, "sgd_step: parameter " + params[i].first + " has no gradient");
    double* pv = p.data();
    double* vv = v.data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      if (std::isnan(g[j]))
        throw std::runtime_error("sgd_step: NaN gradient in parameter " + params[i].first);
      vv[j] = momentum * vv[j] + g[j] + weight_decay * pv[j];
      pv[j] -= lr * vv[j];
    }
  }
}

TrainState init_train_state(const LatticeConfig& lattice, uint64_t seed) {
  TrainState st;
  st.params = LatticeParams::init(lattice, seed);
  for (auto& [name, t] : st.params.named(lattice)) st.velocity.emplace_back(t.shape());
  return st;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::vector<std::vector<double>> gate_sweep(const LatticeParams& params, const Dataset& dataset,
                                            const LatticeConfig& lattice, int threads) {
  std::vector<std::vector<double>> gates(dataset.samples.size());
  parallel_for(static_cast<int>(dataset.samples.size()), threads, [&](int i) {
    const SynthSample& s = dataset.samples[static_cast<size_t>(i)];
    Tensor img = Tensor::from({1, lattice.input_h, lattice.input_w},
                              std::vector<double>(s.image));
    gates[static_cast<size_t>(i)] = lattice_forward(nullptr, img, params, lattice).gates;
  });
  return gates;
}

double miou_from_labels(const std::vector<int>& pred, const std::vector<int>& gt,
                        int num_classes) {
  require(pred.size() == gt.size() && !pred.empty(), "miou_from_labels: size mismatch or empty");
  std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0),
      np(static_cast<size_t>(num_classes), 0), ng(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    ++np[static_cast<size_t>(pred[i])];
    ++ng[static_cast<size_t>(gt[i])];
    if (pred[i] == gt[i]) ++inter[static_cast<size_t>(pred[i])];
  }
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    const int64_t uni = np[static_cast<size_t>(c)] + ng[static_cast<size_t>(c)] -
                        inter[static_cast<size_t>(c)];
    if (uni == 0) continue;
    sum += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
    ++classes;
  }
  return classes > 0 ? sum / classes : 0.0;
}

EvalRecord evaluate(const LatticeParams& params, const CenterRegistry& registry,
                    const Dataset& dataset, const LatticeConfig& lattice, int threads) {
  require(!dataset.samples.empty(), "evaluate: empty dataset");
  const int n = static_cast<int>(dataset.samples.size());
  const EdgeCostTable costs = make_edge_costs(lattice);

  struct PerSample {
    std::vector<int64_t> inter, pred, gt;  // per class
    double ecost = 0.0, pcost = 0.0;
    std::vector<double> gates;
  };
  std::vector<PerSample> rows(static_cast<size_t>(n));

  parallel_for(n, threads, [&](int i) {
    const SynthSample& s = dataset.samples[static_cast<size_t>(i)];
    Tensor img =
        Tensor::from({1, lattice.input_h, lattice.input_w}, std::vector<double>(s.image));
    LatticeOutput out = lattice_forward(nullptr, img, params, lattice);
    PerSample& row = rows[static_cast<size_t>(i)];
    const int k = lattice.num_classes;
    row.inter.assign(static_cast<size_t>(k), 0);
    row.pred.assign(static_cast<size_t>(k), 0);
    row.gt.assign(static_cast<size_t>(k), 0);
    const int64_t pixels = out.logits.numel() / k;
    for (int64_t p = 0; p < pixels; ++p) {
      int arg = 0;
      for (int c = 1; c < k; ++c)
        if (out.logits.data()[c * pixels + p] > out.logits.data()[arg * pixels + p]) arg = c;
      const int gt = s.mask[static_cast<size_t>(p)];
      ++row.pred[static_cast<size_t>(arg)];
      ++row.gt[static_cast<size_t>(gt)];
      if (arg == gt) ++row.inter[static_cast<size_t>(arg)];
    }
    row.ecost = expected_cost(out.gates, costs);
    row.pcost = pruned_cost(out.gates, costs);
    row.gates = std::move(out.gates);
  });

  const int k = lattice.num_classes;
  std::vector<int64_t> inter(static_cast<size_t>(k), 0), pred(static_cast<size_t>(k), 0),
      gt(static_cast<size_t>(k), 0);
  double ecost = 0.0, pcost = 0.0;
  std::vector<std::vector<double>> gates;
  gates.reserve(static_cast<size_t>(n));
  for (const PerSample& row : rows) {
    for (int c = 0; c < k; ++c) {
      inter[static_cast<size_t>(c)] += row.inter[static_cast<size_t>(c)];
      pred[static_cast<size_t>(c)] += row.pred[static_cast<size_t>(c)];
      gt[static_cast<size_t>(c)] += row.gt[static_cast<size_t>(c)];
    }
    ecost += row.ecost;
    pcost += row.pcost;
    gates.push_back(row.gates);
  }

  EvalRecord rec;
  rec.split = dataset.name;
  double iou_sum = 0.0;
  int iou_classes = 0;
  for (int c = 0; c < k; ++c) {
    const int64_t uni = pred[static_cast<size_t>(c)] + gt[static_cast<size_t>(c)] -
                        inter[static_cast<size_t>(c)];
    if (uni == 0) continue;  // class absent from both prediction and truth
    iou_sum += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
    ++iou_classes;
  }
  rec.miou = iou_classes > 0 ? iou_sum / iou_classes : 0.0;
  rec.expected_cost = ecost / n;
  rec.pruned_cost = pcost / n;
  if (n >= 2) rec.gate_variance = gate_variance(gates);
  if (registry.initialized && registry.k() >= 2) {
    rec.inter = inter_cluster_distance(registry);
    const std::vector<int> assign = assign_clusters(gates, registry);
    rec.intra = intra_cluster_distance(gates, assign, registry.k());
    if (registry.k() <= 6) {
      std::vector<int> labels(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] =
          dataset.samples[static_cast<size_t>(i)].true_subset;
      rec.alignment = alignment(assign, labels, registry.k());
    }
  }
  return rec;
}

TrainResult train(TrainState& state, const Dataset& train_set, const Dataset& val_set,
                  const LatticeConfig& lattice, const TrainConfig& config,
                  const LossWeights& weights, bool flip_augment, const FlushHook& flush) {
  lattice.validate();
  config.validate();
  weights.validate();
  require(!train_set.samples.empty(), "train: empty training set");
  require(static_cast<int>(train_set.samples.size()) >= config.k_clusters,
          "train: fewer training samples than K");

  const EdgeCostTable costs = make_edge_costs(lattice);
  auto params = state.params.named(lattice);
  const int n_train = static_cast<int>(train_set.samples.size());
  const int sz = lattice.input_h;

  TrainResult result;
  size_t flushed_steps = 0;
  uint64_t registry_hash = state.registry.initialized ? state.registry.content_hash() : 0;

  for (int step = state.step; step < config.total_steps; ++step) {
    // Center refit on schedule: recompute every A(x) with the current
    // parameters in inference mode, then K-means.
    if (step >= config.warmup_steps && (step - config.warmup_steps) % config.kmeans_interval == 0) {
      auto points = gate_sweep(state.params, train_set, lattice, config.threads);
      state.registry =
          kmeans_fit(points, config.k_clusters, RngStream(config.seed, "kmeans", step).next_u64());
      state.registry.last_update_step = step;
      registry_hash = state.registry.content_hash();
    } else if (state.registry.initialized && state.registry.content_hash() != registry_hash) {
      throw std::logic_error("train: centers changed between refits");
    }

    // Assemble the batch.
    RngStream batch_rng(config.seed, "batch", static_cast<uint64_t>(step));
    struct Item {
      Tensor image;
      std::vector<int> labels;
    };
    std::vector<Item> batch(static_cast<size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) {
      const auto idx = static_cast<size_t>(batch_rng.next_below(static_cast<uint64_t>(n_train)));
      const bool flip = flip_augment && (batch_rng.next_u64() & 1u) != 0;
      const SynthSample& s = train_set.samples[idx];
      std::vector<double> img = flip ? flipped_image(s.image, sz) : s.image;
      std::vector<int> mask = flip ? flipped_mask(s.mask, sz) : s.mask;
      batch[static_cast<size_t>(b)] = {
          Tensor::from({1, lattice.input_h, lattice.input_w}, std::move(img)), std::move(mask)};
    }

    // Phase 1: forward every sample on its own tape.
    std::vector<Tape> tapes(static_cast<size_t>(config.batch_size));
    std::vector<LatticeOutput> outs(static_cast<size_t>(config.batch_size));
    parallel_for(config.batch_size, config.threads, [&](int b) {
      outs[static_cast<size_t>(b)] = lattice_forward(&tapes[static_cast<size_t>(b)],
                                                     batch[static_cast<size_t>(b)].image,
                                                     state.params, lattice);
    });

    // The clustering term stays off until the first refit has produced
    // centers; sigma^2 comes from this batch and is a constant in the grads.
    const bool cluster_active = weights.lambda2 > 0.0 && state.registry.initialized;
    BatchSigma sigma;
    if (cluster_active) {
      std::vector<std::vector<double>> batch_gates;
      batch_gates.reserve(static_cast<size_t>(config.batch_size));
      for (const auto& o : outs) batch_gates.push_back(o.gates);
      sigma = compute_sigma_sq(batch_gates, state.registry);
    }
    LossWeights step_weights = weights;
    if (!cluster_active) step_weights.lambda2 = 0.0;

    // Phase 2: losses and per-sample backward.
    std::vector<GradMap> grad_maps(static_cast<size_t>(config.batch_size));
    std::vector<LossBreakdown> breakdowns(static_cast<size_t>(config.batch_size));
    parallel_for(config.batch_size, config.threads, [&](int b) {
      const auto bi = static_cast<size_t>(b);
      TotalLoss loss = total_loss(&tapes[bi], outs[bi].logits, batch[bi].labels,
                                  outs[bi].gate_vec, state.registry, sigma, step_weights, costs);
      breakdowns[bi] = loss.breakdown;
      tapes[bi].backward(loss.value, &grad_maps[bi]);
    });

    // Deterministic index-ordered gradient reduction, mean over the batch.
    const double inv_b = 1.0 / static_cast<double>(config.batch_size);
    for (auto& [name, p] : params) p.zero_grad();
    for (int b = 0; b < config.batch_size; ++b) {
      const GradMap& gm = grad_maps[static_cast<size_t>(b)];
      for (auto& [name, p] : params) {
        const auto it = gm.find(p.storage_key());
        if (it == gm.end()) continue;
        double* g = p.grad();
        for (size_t j = 0; j < it->second.size(); ++j) g[j] += inv_b * it->second[j];
      }
    }

    const double lr = lr_schedule(step, config);
    sgd_step(params, state.velocity, lr, config.momentum, config.weight_decay);

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    for (const LossBreakdown& bd : breakdowns) {
      rec.task += inv_b * bd.task;
      rec.cost += inv_b * bd.cost;
      rec.clustering += inv_b * bd.clustering;
      rec.total += inv_b * bd.total;
    }
    result.metrics.steps.push_back(rec);
    state.step = step + 1;

    if ((step + 1) % config.eval_interval == 0 || step + 1 == config.total_steps) {
      EvalRecord ev = evaluate(state.params, state.registry, val_set, lattice, config.threads);
      ev.step = step + 1;
      result.metrics.evals.push_back(ev);
      if (flush) {
        flush(state,
              std::span<const StepRecord>(result.metrics.steps.data() + flushed_steps,
                                          result.metrics.steps.size() - flushed_steps),
              ev);
        flushed_steps = result.metrics.steps.size();
      }
    }
  }
  return result;
}

}  // namespace divdr
