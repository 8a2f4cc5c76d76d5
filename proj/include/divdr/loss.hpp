// SPDX-License-Identifier: Apache-2.0
//
// Loss terms: per-pixel cross-entropy, normalized routing cost, the
// magnet-style clustering loss over gate activations, and their weighted sum.
#pragma once

#include <span>
#include <vector>

#include "divdr/clustering.hpp"
#include "divdr/lattice.hpp"
#include "divdr/tensor.hpp"

namespace divdr {

struct LossWeights {
  double lambda1 = 0.8;  // cost weight
  double lambda2 = 0.5;  // clustering weight
  double alpha = 0.5;    // hinge margin
  // Eq. form uses plain Euclidean distances in both the pull and the push
  // term; this toggle switches to squared distances for comparison.
  bool squared_distances = false;

  void validate() const;
};

// Data-driven scale of the clustering loss, computed once per batch from the
// squared distances to the nearest centers and then treated as a constant
// (no gradient flows through it).
struct BatchSigma {
  double sigma_sq = 1.0;
  int sample_count = 0;
};

inline constexpr double kSigmaFloor = 1e-8;

BatchSigma compute_sigma_sq(const std::vector<std::vector<double>>& gate_batch,
                            const CenterRegistry& registry);

// Mean per-pixel softmax cross-entropy; labels in [0, num_classes).
Tensor task_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels);

// Hinge of (alpha + pull to the nearest center - log-sum-exp push from the
// others), distances scaled by 1/(2 sigma^2). Requires K >= 2.
Tensor clustering_loss(Tape* tape, const Tensor& gate_vec, const CenterRegistry& registry,
                       const BatchSigma& sigma, double alpha, bool squared_distances = false);

// Value-only evaluation used by diagnostics; matches the tape version.
double clustering_loss_value(std::span<const double> gates, const CenterRegistry& registry,
                             const BatchSigma& sigma, double alpha,
                             bool squared_distances = false);

// Gate-weighted normalized compute as a differentiable scalar.
Tensor expected_cost_loss(Tape* tape, const Tensor& gate_vec, const EdgeCostTable& costs);

struct LossBreakdown {
  double task = 0.0;
  double cost = 0.0;        // raw expected cost
  double clustering = 0.0;  // raw clustering term
  double cost_weighted = 0.0;
  double clustering_weighted = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  Tensor value;  // scalar on the tape
  LossBreakdown breakdown;
};

// task + lambda1 * cost + lambda2 * clustering for one sample. Pass an
// uninitialized registry (or lambda2 == 0) to drop the clustering term.
TotalLoss total_loss(Tape* tape, const Tensor& logits, const std::vector<int>& labels,
                     const Tensor& gate_vec, const CenterRegistry& registry,
                     const BatchSigma& sigma, const LossWeights& weights,
                     const EdgeCostTable& costs);

}  // namespace divdr
