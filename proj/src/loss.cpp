// SPDX-License-Identifier: Apache-2.0

#include "divdr/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace divdr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void LossWeights::validate() const {
  require(lambda1 >= 0.0 && lambda2 >= 0.0 && alpha >= 0.0,
          "LossWeights: lambda1, lambda2 and alpha must be non-negative");
}

BatchSigma compute_sigma_sq(const std::vector<std::vector<double>>& gate_batch,
                            const CenterRegistry& registry) {
  require(!gate_batch.empty(), "compute_sigma_sq: empty batch");
  double ss = 0.0;
  for (const auto& g : gate_batch) {
    const double d = nearest_center(g, registry).distance;
    ss += d * d;
  }
  const int n = static_cast<int>(gate_batch.size());
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  BatchSigma s;
  s.sigma_sq = std::max(ss / denom, kSigmaFloor);
  s.sample_count = n;
  return s;
}

Tensor task_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels) {
  std::vector<double> ld(labels.begin(), labels.end());
  Shape label_shape(logits.shape().begin() + 1, logits.shape().end());
  if (label_shape.empty()) label_shape = {1};
  return softmax_cross_entropy(tape, logits, Tensor::from(label_shape, std::move(ld)));
}

namespace {

// Shared layout of the clustering-loss computation: distances to every
// center, the nearest index, and the hinge argument.
struct MagnetTerms {
  std::vector<double> dist;  // Euclidean, per center
  int nearest = 0;
};

MagnetTerms magnet_terms(std::span<const double> gates, const CenterRegistry& registry) {
  require(registry.initialized, "clustering_loss: registry is not initialized");
  require(registry.k() >= 2,
          "clustering_loss: needs K >= 2 centers, got " + std::to_string(registry.k()));
  require(registry.dim() == static_cast<int>(gates.size()),
          "clustering_loss: gate dim " + std::to_string(gates.size()) + " != center dim " +
              std::to_string(registry.dim()));
  for (double v : gates)
    require(std::isfinite(v), "clustering_loss: non-finite gate activation");
  MagnetTerms t;
  t.dist.resize(static_cast<size_t>(registry.k()));
  for (int i = 0; i < registry.k(); ++i)
    t.dist[static_cast<size_t>(i)] = euclidean(gates, registry.centers[static_cast<size_t>(i)]);
  t.nearest = 0;
  for (int i = 1; i < registry.k(); ++i)
    if (t.dist[static_cast<size_t>(i)] < t.dist[static_cast<size_t>(t.nearest)]) t.nearest = i;
  return t;
}

}  // namespace

Tensor clustering_loss(Tape* tape, const Tensor& gate_vec, const CenterRegistry& registry,
                       const BatchSigma& sigma, double alpha, bool squared_distances) {
  require(sigma.sigma_sq > 0.0, "clustering_loss: sigma^2 must be positive");
  require(alpha >= 0.0, "clustering_loss: alpha must be non-negative");
  const MagnetTerms terms =
      magnet_terms({gate_vec.data(), static_cast<size_t>(gate_vec.numel())}, registry);
  const double inv = 1.0 / (2.0 * sigma.sigma_sq);

  // Per-center distance tensors, built from the listed ops so the whole
  // expression differentiates through the gate vector.
  std::vector<Tensor> dist(static_cast<size_t>(registry.k()));
  for (int i = 0; i < registry.k(); ++i) {
    std::vector<double> neg(registry.centers[static_cast<size_t>(i)]);
    for (double& v : neg) v = -v;
    Tensor diff = add(tape, gate_vec, Tensor::from({registry.dim()}, std::move(neg)));
    Tensor d = l2_norm(tape, diff);
    if (squared_distances) d = mul_scalar(tape, d, d);
    dist[static_cast<size_t>(i)] = d;
  }

  Tensor pull = mul_scalar(tape, dist[static_cast<size_t>(terms.nearest)], inv);
  std::vector<Tensor> push;
  push.reserve(static_cast<size_t>(registry.k() - 1));
  for (int i = 0; i < registry.k(); ++i)
    if (i != terms.nearest) push.push_back(mul_scalar(tape, dist[static_cast<size_t>(i)], -inv));
  Tensor lse = log_sum_exp(tape, push);

  Tensor arg = add(tape, add(tape, pull, lse), Tensor::scalar(alpha));
  return relu(tape, arg);
}

double clustering_loss_value(std::span<const double> gates, const CenterRegistry& registry,
                             const BatchSigma& sigma, double alpha, bool squared_distances) {
  require(sigma.sigma_sq > 0.0, "clustering_loss: sigma^2 must be positive");
  require(alpha >= 0.0, "clustering_loss: alpha must be non-negative");
  const MagnetTerms terms = magnet_terms(gates, registry);
  const double inv = 1.0 / (2.0 * sigma.sigma_sq);
  auto dd = [&](double d) { return squared_distances ? d * d : d; };

  double m = -HUGE_VAL;
  for (int i = 0; i < registry.k(); ++i)
    if (i != terms.nearest) m = std::max(m, -inv * dd(terms.dist[static_cast<size_t>(i)]));
  double s = 0.0;
  for (int i = 0; i < registry.k(); ++i)
    if (i != terms.nearest) s += std::exp(-inv * dd(terms.dist[static_cast<size_t>(i)]) - m);
  const double lse = m + std::log(s);

  const double arg = alpha + inv * dd(terms.dist[static_cast<size_t>(terms.nearest)]) + lse;
  return arg > 0.0 ? arg : 0.0;
}

Tensor expected_cost_loss(Tape* tape, const Tensor& gate_vec, const EdgeCostTable& costs) {
  const int n = static_cast<int>(costs.cost.size());
  require(gate_vec.numel() == n, "expected_cost_loss: gate vector length " +
                                     std::to_string(gate_vec.numel()) + " != cost table length " +
                                     std::to_string(n));
  Tensor weights = Tensor::from({n, 1}, std::vector<double>(costs.cost.begin(), costs.cost.end()));
  Tensor dot = matmul(tape, gate_vec.reshaped({1, n}), weights);
  return mul_scalar(tape, dot.reshaped({1}), 1.0 / costs.total);
}

TotalLoss total_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels,
                     const Tensor& gate_vec, const CenterRegistry& registry,
                     const BatchSigma& sigma, const LossWeights& weights,
                     const EdgeCostTable& costs) {
  weights.validate();
  TotalLoss out;
  Tensor task = task_loss(tape, logits, labels);
  Tensor cost = expected_cost_loss(tape, gate_vec, costs);
  out.breakdown.task = task.item();
  out.breakdown.cost = cost.item();
  out.breakdown.cost_weighted = weights.lambda1 * out.breakdown.cost;

  Tensor sum = add(tape, task, mul_scalar(tape, cost, weights.lambda1));
  if (weights.lambda2 > 0.0 && registry.initialized) {
    Tensor cluster =
        clustering_loss(tape, gate_vec, registry, sigma, weights.alpha, weights.squared_distances);
    out.breakdown.clustering = cluster.item();
    out.breakdown.clustering_weighted = weights.lambda2 * out.breakdown.clustering;
    sum = add(tape, sum, mul_scalar(tape, cluster, weights.lambda2));
  }
  out.breakdown.total = sum.item();
  out.value = sum;
  return out;
}

}  // namespace divdr
