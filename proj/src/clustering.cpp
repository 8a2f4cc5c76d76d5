// SPDX-License-Identifier: Apache-2.0

#include "divdr/clustering.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "divdr/rng.hpp"

namespace divdr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

uint64_t CenterRegistry::content_hash() const {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& c : centers) h = fnv1a64_bytes(c.data(), c.size() * sizeof(double), h);
  return h;
}

double euclidean(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "euclidean: dimension mismatch");
  return std::sqrt(sq_dist(a, b));
}

NearestCenter nearest_center(std::span<const double> point, const CenterRegistry& registry) {
  require(registry.initialized && !registry.centers.empty(),
          "nearest_center: registry is not initialized");
  int best = 0;
  double best_sq = sq_dist(point, registry.centers[0]);
  for (int i = 1; i < registry.k(); ++i) {
    const double d = sq_dist(point, registry.centers[static_cast<size_t>(i)]);
    if (d < best_sq) {
      best_sq = d;
      best = i;
    }
  }
  return {best, std::sqrt(best_sq)};
}

std::vector<int> assign_clusters(const std::vector<std::vector<double>>& points,
                                 const CenterRegistry& registry) {
  std::vector<int> out(points.size());
  for (size_t i = 0; i < points.size(); ++i) out[i] = nearest_center(points[i], registry).index;
  return out;
}

CenterRegistry kmeans_fit(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                          KMeansTrace* trace) {
  require(k >= 1, "kmeans_fit: k must be positive");
  require(static_cast<int>(points.size()) >= k,
          "kmeans_fit: " + std::to_string(points.size()) + " points < k = " + std::to_string(k));
  const size_t n = points.size();
  const size_t dim = points.front().size();
  for (const auto& p : points) require(p.size() == dim, "kmeans_fit: ragged point set");

  RngStream rng(seed, "kmeans++");

  // k-means++ seeding: first center uniform, the rest proportional to the
  // squared distance to the nearest chosen center.
  std::vector<std::vector<double>> centers;
  centers.reserve(static_cast<size_t>(k));
  std::vector<double> d2(n, HUGE_VAL);
  centers.push_back(points[rng.next_below(n)]);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
      total += d2[i];
    }
    size_t pick = 0;
    if (total > 0.0) {
      const double r = rng.next_unit() * total;
      double acc = 0.0;
      pick = n - 1;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      // All remaining mass is zero (duplicate-heavy input): take the next
      // index deterministically.
      pick = centers.size() % n;
    }
    centers.push_back(points[pick]);
  }

  std::vector<int> assign(n, -1);
  std::vector<int> prev_assign;
  double prev_objective = HUGE_VAL;
  int iterations = 0;

  for (int iter = 0; iter < 100; ++iter) {
    // Assignment pass.
    double objective = 0.0;
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_sq = sq_dist(points[i], centers[0]);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(points[i], centers[static_cast<size_t>(c)]);
        if (d < best_sq) {
          best_sq = d;
          best = c;
        }
      }
      assign[i] = best;
      objective += best_sq;
    }
    ++iterations;
    if (trace) trace->objective.push_back(objective);
    if (objective > prev_objective + 1e-9 * (1.0 + prev_objective))
      throw std::logic_error("kmeans_fit: objective increased");
    prev_objective = objective;
    if (assign == prev_assign) break;
    prev_assign = assign;

    // Mean update.
    std::vector<std::vector<double>> sums(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      ++counts[static_cast<size_t>(assign[i])];
      for (size_t j = 0; j < dim; ++j) sums[static_cast<size_t>(assign[i])][j] += points[i][j];
    }
    std::vector<bool> donor(n, false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        for (size_t j = 0; j < dim; ++j)
          centers[static_cast<size_t>(c)][j] =
              sums[static_cast<size_t>(c)][j] / counts[static_cast<size_t>(c)];
      } else {
        // Reseed an empty cluster to the point farthest from its center.
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          if (donor[i]) continue;
          const double d = sq_dist(points[i], centers[static_cast<size_t>(assign[i])]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        donor[far] = true;
        centers[static_cast<size_t>(c)] = points[far];
      }
    }
  }

  if (trace) trace->iterations = iterations;

  CenterRegistry reg;
  reg.centers = std::move(centers);
  reg.initialized = true;
  return reg;
}

double inter_cluster_distance(const CenterRegistry& registry) {
  const int k = registry.k();
  require(k >= 2, "inter_cluster_distance: needs at least 2 centers, got " + std::to_string(k));
  double s = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j)
      s += euclidean(registry.centers[static_cast<size_t>(i)],
                     registry.centers[static_cast<size_t>(j)]);
  return s * 2.0 / (static_cast<double>(k) * (k - 1));
}

double intra_cluster_distance(const std::vector<std::vector<double>>& points,
                              const std::vector<int>& assignment, int k) {
  require(points.size() == assignment.size(), "intra_cluster_distance: assignment size mismatch");
  double sum_of_means = 0.0;
  int populated = 0;
  for (int c = 0; c < k; ++c) {
    std::vector<size_t> members;
    for (size_t i = 0; i < points.size(); ++i)
      if (assignment[i] == c) members.push_back(i);
    if (members.size() < 2) continue;
    double s = 0.0;
    size_t pairs = 0;
    for (size_t a = 0; a < members.size(); ++a)
      for (size_t b = a + 1; b < members.size(); ++b) {
        s += euclidean(points[members[a]], points[members[b]]);
        ++pairs;
      }
    sum_of_means += s / static_cast<double>(pairs);
    ++populated;
  }
  return populated == 0 ? 0.0 : sum_of_means / populated;
}

double gate_variance(const std::vector<std::vector<double>>& points) {
  require(points.size() >= 2, "gate_variance: needs at least 2 samples");
  const size_t dim = points.front().size();
  const double n = static_cast<double>(points.size());
  double acc = 0.0;
  for (size_t j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (const auto& p : points) mean += p[j];
    mean /= n;
    double ss = 0.0;
    for (const auto& p : points) {
      const double d = p[j] - mean;
      ss += d * d;
    }
    acc += std::sqrt(ss / (n - 1.0));
  }
  return acc / static_cast<double>(dim);
}

double alignment(const std::vector<int>& assignment, const std::vector<int>& labels, int k) {
  require(k >= 1 && k <= 6, "alignment: k = " + std::to_string(k) + " outside [1,6]");
  require(assignment.size() == labels.size() && !assignment.empty(),
          "alignment: assignment/label size mismatch or empty");
  std::vector<int> perm(static_cast<size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    int hits = 0;
    for (size_t i = 0; i < assignment.size(); ++i)
      if (perm[static_cast<size_t>(assignment[i])] == labels[i]) ++hits;
    best = std::max(best, static_cast<double>(hits) / static_cast<double>(assignment.size()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

PcaProjection pca_2d(const std::vector<std::vector<double>>& points) {
  require(points.size() >= 2, "pca_2d: needs at least 2 points");
  const int n = static_cast<int>(points.size());
  const int dim = static_cast<int>(points.front().size());

  Eigen::MatrixXd x(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = points[static_cast<size_t>(i)][static_cast<size_t>(j)];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  require(solver.info() == Eigen::Success, "pca_2d: eigendecomposition failed");

  PcaProjection out;
  out.pc1.resize(static_cast<size_t>(n));
  out.pc2.resize(static_cast<size_t>(n));
  // Eigenvalues ascend; take the top two and fix each eigenvector's sign by
  // making its largest-magnitude coordinate positive.
  for (int comp = 0; comp < 2; ++comp) {
    const int col = dim - 1 - comp;
    if (col < 0) break;
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    int arg = 0;
    for (int j = 1; j < dim; ++j)
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = x * v;
    auto& dst = comp == 0 ? out.pc1 : out.pc2;
    for (int i = 0; i < n; ++i) dst[static_cast<size_t>(i)] = proj(i);
    (comp == 0 ? out.eigval1 : out.eigval2) = solver.eigenvalues()(col);
  }
  return out;
}

}  // namespace divdr
