// SPDX-License-Identifier: Apache-2.0
//
// K-means over gate-activation space, the center registry the clustering
// loss reads, and the route-diversity diagnostics.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace divdr {

// The K prototypical routing signatures. Centers are fixed between refits;
// gradient steps never touch them.
struct CenterRegistry {
  std::vector<std::vector<double>> centers;
  int64_t last_update_step = -1;
  bool initialized = false;

  int k() const { return static_cast<int>(centers.size()); }
  int dim() const { return centers.empty() ? 0 : static_cast<int>(centers.front().size()); }
  uint64_t content_hash() const;
};

struct NearestCenter {
  int index;
  double distance;  // Euclidean
};

// Euclidean argmin over centers; ties break to the lowest index.
NearestCenter nearest_center(std::span<const double> point, const CenterRegistry& registry);

double euclidean(std::span<const double> a, std::span<const double> b);

struct KMeansTrace {
  std::vector<double> objective;  // sum of squared distances after each assignment pass
  int iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Runs to an assignment fixpoint or
// 100 iterations; empty clusters are reseeded to the point currently farthest
// from its assigned center. The squared-distance objective is non-increasing
// across iterations (asserted; trace exposes it for tests).
CenterRegistry kmeans_fit(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                          KMeansTrace* trace = nullptr);

std::vector<int> assign_clusters(const std::vector<std::vector<double>>& points,
                                 const CenterRegistry& registry);

// Mean pairwise distance between centers: (2 / K(K-1)) sum_{i<j} ||mu_i - mu_j||.
double inter_cluster_distance(const CenterRegistry& registry);

// Mean pairwise member distance per cluster, averaged over clusters with at
// least two members; 0 when no cluster has two.
double intra_cluster_distance(const std::vector<std::vector<double>>& points,
                              const std::vector<int>& assignment, int k);

// Mean over dimensions of the per-dimension sample standard deviation across
// points; the mode-collapse diagnostic (near 0 means routes ignore the input).
double gate_variance(const std::vector<std::vector<double>>& points);

// Best agreement between cluster ids and planted labels over all relabelings;
// brute force over K! permutations, so K <= 6.
double alignment(const std::vector<int>& assignment, const std::vector<int>& labels, int k);

struct PcaProjection {
  std::vector<double> pc1, pc2;        // per point
  double eigval1 = 0.0, eigval2 = 0.0;
};

// Exact 2-component PCA via eigendecomposition of the covariance matrix.
PcaProjection pca_2d(const std::vector<std::vector<double>>& points);

}  // namespace divdr
