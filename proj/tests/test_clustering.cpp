// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "divdr/clustering.hpp"
#include "divdr/rng.hpp"

using namespace divdr;

namespace {

CenterRegistry registry_of(std::vector<std::vector<double>> centers) {
  CenterRegistry r;
  r.centers = std::move(centers);
  r.initialized = true;
  return r;
}

std::vector<std::vector<double>> random_points(RngStream& rng, int n, int dim, double spread) {
  std::vector<std::vector<double>> pts(static_cast<size_t>(n));
  for (auto& p : pts) {
    p.resize(static_cast<size_t>(dim));
    for (double& v : p) v = spread * rng.next_gaussian();
  }
  return pts;
}

}  // namespace

TEST_CASE("nearest_center: direct, tie-break, hand evaluation") {
  {
    auto reg = registry_of({{1.0, 0.0}, {0.0, 2.0}});
    auto r = nearest_center(std::vector<double>{0.0, 0.0}, reg);
    CHECK(r.index == 0);
    CHECK(r.distance == doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    // Equidistant: the lower index wins.
    auto reg = registry_of({{1.0, 0.0}, {-1.0, 0.0}});
    CHECK(nearest_center(std::vector<double>{0.0, 0.0}, reg).index == 0);
  }
  {
    auto reg = registry_of({{0.0, 0.0}, {4.0, 4.0}, {10.0, 0.0}});
    auto r = nearest_center(std::vector<double>{5.0, 5.0}, reg);
    CHECK(r.index == 1);
    CHECK(r.distance == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  }
  CenterRegistry uninit;
  CHECK_THROWS_AS(nearest_center(std::vector<double>{0.0}, uninit), std::invalid_argument);
}

TEST_CASE("nearest_center returns i for center i when centers are distinct") {
  RngStream rng(17, "centers");
  auto reg = registry_of(random_points(rng, 5, 3, 2.0));
  for (int i = 0; i < reg.k(); ++i)
    CHECK(nearest_center(reg.centers[static_cast<size_t>(i)], reg).index == i);
}

TEST_CASE("kmeans: the {0,1,10,11} set recovers centers {0.5, 10.5} exactly") {
  std::vector<std::vector<double>> pts = {{0.0}, {1.0}, {10.0}, {11.0}};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    CenterRegistry reg = kmeans_fit(pts, 2, seed);
    std::vector<double> got = {reg.centers[0][0], reg.centers[1][0]};
    std::sort(got.begin(), got.end());
    CHECK(got[0] == 0.5);
    CHECK(got[1] == 10.5);
  }
}

TEST_CASE("kmeans degenerate cases") {
  {
    // K = 1: the single center is the mean.
    std::vector<std::vector<double>> pts = {{1.0, 0.0}, {3.0, 4.0}, {5.0, 2.0}};
    CenterRegistry reg = kmeans_fit(pts, 1, 0);
    CHECK(reg.centers[0][0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(reg.centers[0][1] == doctest::Approx(2.0).epsilon(1e-12));
  }
  {
    // K = number of points: every point its own center, objective 0.
    std::vector<std::vector<double>> pts = {{0.0}, {5.0}, {9.0}};
    KMeansTrace trace;
    CenterRegistry reg = kmeans_fit(pts, 3, 1, &trace);
    CHECK(trace.objective.back() == 0.0);
    std::vector<double> got = {reg.centers[0][0], reg.centers[1][0], reg.centers[2][0]};
    std::sort(got.begin(), got.end());
    CHECK(got == std::vector<double>{0.0, 5.0, 9.0});
  }
  {
    std::vector<std::vector<double>> pts = {{0.0}};
    CHECK_THROWS_AS(kmeans_fit(pts, 2, 0), std::invalid_argument);
  }
}

TEST_CASE("kmeans objective is non-increasing on every iteration (fuzzed)") {
  RngStream rng(23, "fuzz");
  for (int trial = 0; trial < 100; ++trial) {
    CAPTURE(trial);
    const int n = 5 + static_cast<int>(rng.next_below(60));
    const int dim = 1 + static_cast<int>(rng.next_below(6));
    const int k = 2 + static_cast<int>(rng.next_below(5));
    if (n < k) continue;
    auto pts = random_points(rng, n, dim, 1.0 + rng.next_unit() * 3.0);
    KMeansTrace trace;
    kmeans_fit(pts, k, rng.next_u64(), &trace);
    REQUIRE(!trace.objective.empty());
    for (size_t i = 1; i < trace.objective.size(); ++i)
      CHECK(trace.objective[i] <= trace.objective[i - 1] + 1e-9 * (1.0 + trace.objective[i - 1]));
  }
}

TEST_CASE("kmeans handles duplicate-heavy inputs without empty clusters") {
  std::vector<std::vector<double>> pts(20, std::vector<double>{1.0, 1.0});
  pts.push_back({5.0, 5.0});
  CenterRegistry reg = kmeans_fit(pts, 3, 4);
  CHECK(reg.k() == 3);
  for (const auto& c : reg.centers)
    for (double v : c) CHECK(std::isfinite(v));
}

TEST_CASE("inter-cluster distance: single pair, equilateral, 3-4-5 triangle") {
  CHECK(inter_cluster_distance(registry_of({{0.0, 0.0}, {3.0, 0.0}})) ==
        doctest::Approx(3.0).epsilon(1e-12));
  const double h = std::sqrt(3.0) / 2.0;
  CHECK(inter_cluster_distance(registry_of({{0.0, 0.0}, {1.0, 0.0}, {0.5, h}})) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(inter_cluster_distance(registry_of({{0.0, 0.0}, {3.0, 0.0}, {0.0, 4.0}})) ==
        doctest::Approx(4.0).epsilon(1e-12));
  CHECK_THROWS_AS(inter_cluster_distance(registry_of({{1.0}})), std::invalid_argument);
}

TEST_CASE("inter-cluster distance is translation invariant") {
  RngStream rng(19, "shift");
  for (int trial = 0; trial < 20; ++trial) {
    auto centers = random_points(rng, 4, 3, 2.0);
    const double base = inter_cluster_distance(registry_of(centers));
    std::vector<double> shift = {rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian()};
    for (auto& c : centers)
      for (int j = 0; j < 3; ++j) c[static_cast<size_t>(j)] += shift[static_cast<size_t>(j)];
    CHECK(inter_cluster_distance(registry_of(centers)) == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("intra-cluster distance: single pair, singletons, mean of per-cluster means") {
  {
    std::vector<std::vector<double>> pts = {{0.0, 0.0}, {2.0, 0.0}};
    CHECK(intra_cluster_distance(pts, {0, 0}, 1) == doctest::Approx(2.0).epsilon(1e-12));
  }
  {
    std::vector<std::vector<double>> pts = {{0.0}, {5.0}, {9.0}};
    CHECK(intra_cluster_distance(pts, {0, 1, 2}, 3) == 0.0);
  }
  {
    // Cluster A {0,2} -> 2; cluster B {0,1,2} -> (1+2+1)/3 = 4/3; mean = 5/3.
    std::vector<std::vector<double>> pts = {{0.0}, {2.0}, {0.0}, {1.0}, {2.0}};
    CHECK(intra_cluster_distance(pts, {0, 0, 1, 1, 1}, 2) ==
          doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("gate variance: zero, sample-std, mean over dimensions") {
  {
    std::vector<std::vector<double>> pts(5, std::vector<double>{0.3, 0.6});
    CHECK(gate_variance(pts) == 0.0);
  }
  {
    std::vector<std::vector<double>> pts = {{0.0}, {1.0}};
    CHECK(gate_variance(pts) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  }
  {
    // Per-dimension stds 0.2 and 0.4 -> mean 0.3. Two samples with
    // |x0 - x1| = d have sample std d / sqrt(2).
    const double d0 = 0.2 * std::sqrt(2.0), d1 = 0.4 * std::sqrt(2.0);
    std::vector<std::vector<double>> pts = {{0.0, 0.0}, {d0, d1}};
    CHECK(gate_variance(pts) == doctest::Approx(0.3).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gate_variance({{1.0}}), std::invalid_argument);
}

TEST_CASE("alignment: identity, label swap, partial agreement, scope guard") {
  CHECK(alignment({0, 0, 1, 1}, {0, 0, 1, 1}, 2) == 1.0);
  CHECK(alignment({1, 1, 0, 0}, {0, 0, 1, 1}, 2) == 1.0);
  CHECK(alignment({0, 1, 1, 1}, {0, 0, 1, 1}, 2) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_THROWS_AS(alignment({0, 1}, {0, 1}, 7), std::invalid_argument);
}

TEST_CASE("alignment is invariant under relabeling the assignment") {
  RngStream rng(37, "relabel");
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng.next_below(3));
    const int n = 30;
    std::vector<int> assign(n), labels(n);
    for (int i = 0; i < n; ++i) {
      assign[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));
      labels[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(2));
    }
    const double base = alignment(assign, labels, k);
    std::vector<int> perm(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) perm[static_cast<size_t>(i)] = (i + 1) % k;
    auto relabeled = assign;
    for (int& a : relabeled) a = perm[static_cast<size_t>(a)];
    CHECK(alignment(relabeled, labels, k) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("pca_2d: points already 2-D and centered project onto themselves") {
  // An axis-aligned ellipse of points: PCA must recover the two axes (up to
  // sign), so pairwise distances survive the projection.
  std::vector<std::vector<double>> pts;
  RngStream rng(41, "pca");
  for (int i = 0; i < 40; ++i)
    pts.push_back({3.0 * rng.next_gaussian(), 1.0 * rng.next_gaussian()});
  // Center exactly.
  double m0 = 0, m1 = 0;
  for (auto& p : pts) {
    m0 += p[0];
    m1 += p[1];
  }
  for (auto& p : pts) {
    p[0] -= m0 / pts.size();
    p[1] -= m1 / pts.size();
  }
  PcaProjection proj = pca_2d(pts);
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 1; j < pts.size(); ++j) {
      const double orig = euclidean(pts[i], pts[j]);
      const double dp1 = proj.pc1[i] - proj.pc1[j];
      const double dp2 = proj.pc2[i] - proj.pc2[j];
      CHECK(std::sqrt(dp1 * dp1 + dp2 * dp2) == doctest::Approx(orig).epsilon(1e-9));
    }
  CHECK(proj.eigval1 >= proj.eigval2);
}

TEST_CASE("pca_2d projection of higher-dimensional points preserves the top component") {
  // Points on a 1-D line embedded in 5-D: pc1 carries all the variance.
  std::vector<std::vector<double>> pts;
  std::vector<double> dir = {1.0, -2.0, 0.5, 0.0, 3.0};
  RngStream rng(43, "line");
  for (int i = 0; i < 30; ++i) {
    const double t = rng.next_gaussian();
    std::vector<double> p(5);
    for (int j = 0; j < 5; ++j) p[static_cast<size_t>(j)] = t * dir[static_cast<size_t>(j)];
    pts.push_back(p);
  }
  PcaProjection proj = pca_2d(pts);
  CHECK(proj.eigval1 > 1e-6);
  CHECK(std::abs(proj.eigval2) < 1e-9);
}
