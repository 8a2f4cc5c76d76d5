// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "divdr/loss.hpp"

using namespace divdr;

namespace {

CenterRegistry registry_of(std::vector<std::vector<double>> centers) {
  CenterRegistry r;
  r.centers = std::move(centers);
  r.initialized = true;
  return r;
}

}  // namespace

TEST_CASE("task loss: saturation, uniform logits, single pixel closed form") {
  {
    // Logits massively favoring the correct class everywhere.
    Tensor logits = Tensor::from({2, 1, 2}, {30.0, -30.0, -30.0, 30.0});
    CHECK(task_loss(nullptr, logits, {0, 1}).item() < 1e-6);
  }
  {
    Tensor logits = Tensor::from({2, 1, 1}, {0.0, 0.0});
    CHECK(task_loss(nullptr, logits, {1}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  {
    // -ln(e / (e + 1)) = ln(1 + e^-1)
    Tensor logits = Tensor::from({2, 1, 1}, {1.0, 0.0});
    CHECK(task_loss(nullptr, logits, {0}).item() ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  }
  {
    Tensor logits = Tensor::from({2, 1, 1}, {1.0, 0.0});
    CHECK_THROWS_AS(task_loss(nullptr, logits, {2}), std::invalid_argument);
  }
}

TEST_CASE("sigma^2: direct formula, floor, hand evaluation") {
  {
    // Two samples each at distance 1 from their nearest centers.
    auto reg = registry_of({{0.0, 0.0}, {10.0, 0.0}});
    std::vector<std::vector<double>> batch = {{1.0, 0.0}, {10.0, 1.0}};
    BatchSigma s = compute_sigma_sq(batch, reg);
    CHECK(s.sigma_sq == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(s.sample_count == 2);
  }
  {
    // All samples exactly at their centers: the floor engages.
    auto reg = registry_of({{0.0, 0.0}, {1.0, 1.0}});
    std::vector<std::vector<double>> batch = {{0.0, 0.0}, {1.0, 1.0}};
    CHECK(compute_sigma_sq(batch, reg).sigma_sq == kSigmaFloor);
  }
  {
    // Distances (1, 2, 3) -> (1 + 4 + 9) / 2 = 7.
    auto reg = registry_of({{0.0}, {100.0}});
    std::vector<std::vector<double>> batch = {{1.0}, {2.0}, {3.0}};
    CHECK(compute_sigma_sq(batch, reg).sigma_sq == doctest::Approx(7.0).epsilon(1e-12));
  }
  {
    auto reg = registry_of({{0.0}});
    CHECK_THROWS_AS(compute_sigma_sq({}, reg), std::invalid_argument);
  }
}

TEST_CASE("clustering loss: the three hand-evaluated cases to 1e-9") {
  BatchSigma sig1{1.0, 1};
  {
    // {1 + 0 + log e^-2}_+ = {-1}_+ = 0
    auto reg = registry_of({{0.0, 0.0}, {4.0, 0.0}});
    CHECK(clustering_loss_value(std::vector<double>{0.0, 0.0}, reg, sig1, 1.0) ==
          doctest::Approx(0.0).epsilon(1e-9));
  }
  {
    // {1 + 0 - 0.5}_+ = 0.5
    auto reg = registry_of({{0.0, 0.0}, {1.0, 0.0}});
    CHECK(clustering_loss_value(std::vector<double>{0.0, 0.0}, reg, sig1, 1.0) ==
          doctest::Approx(0.5).epsilon(1e-9));
  }
  {
    // sigma^2 = 2, alpha = 0: {0 + 1/4 - 1/2}_+ = 0
    auto reg = registry_of({{0.0, 0.0}, {3.0, 0.0}});
    BatchSigma sig2{2.0, 1};
    CHECK(clustering_loss_value(std::vector<double>{1.0, 0.0}, reg, sig2, 0.0) ==
          doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("clustering loss tape version agrees with the value version") {
  RngStream rng(21, "agree");
  for (int trial = 0; trial < 50; ++trial) {
    const int dim = 2 + static_cast<int>(rng.next_below(5));
    const int k = 2 + static_cast<int>(rng.next_below(3));
    std::vector<std::vector<double>> centers(static_cast<size_t>(k));
    for (auto& c : centers) {
      c.resize(static_cast<size_t>(dim));
      for (double& v : c) v = rng.next_unit();
    }
    auto reg = registry_of(centers);
    Tensor a(Shape{dim});
    for (double& v : a.values()) v = rng.next_unit();
    BatchSigma sig{0.05 + rng.next_unit(), 8};
    const double alpha = rng.next_unit();
    const bool squared = rng.next_below(2) == 1;
    const double via_value = clustering_loss_value(a.values(), reg, sig, alpha, squared);
    const double via_tape = clustering_loss(nullptr, a, reg, sig, alpha, squared).item();
    CHECK(via_value == doctest::Approx(via_tape).epsilon(1e-12));
  }
}

TEST_CASE("clustering loss rejects K=1, NaN gates, and dimension mismatch") {
  BatchSigma sig{1.0, 1};
  auto reg1 = registry_of({{0.0, 0.0}});
  CHECK_THROWS_AS(clustering_loss_value(std::vector<double>{0.0, 0.0}, reg1, sig, 0.5),
                  std::invalid_argument);
  auto reg = registry_of({{0.0, 0.0}, {1.0, 0.0}});
  const double nan = std::nan("");
  CHECK_THROWS_AS(clustering_loss_value(std::vector<double>{nan, 0.0}, reg, sig, 0.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(clustering_loss_value(std::vector<double>{0.0, 0.0, 0.0}, reg, sig, 0.5),
                  std::invalid_argument);
  CenterRegistry uninit;
  CHECK_THROWS_AS(clustering_loss_value(std::vector<double>{0.0, 0.0}, uninit, sig, 0.5),
                  std::invalid_argument);
}

TEST_CASE("hinge keeps the loss non-negative and clamps well-separated cases") {
  RngStream rng(13, "hinge");
  int clamped = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int dim = 2 + static_cast<int>(rng.next_below(6));
    const int k = 2 + static_cast<int>(rng.next_below(4));
    std::vector<std::vector<double>> centers(static_cast<size_t>(k));
    for (auto& c : centers) {
      c.resize(static_cast<size_t>(dim));
      for (double& v : c) v = 4.0 * rng.next_gaussian();
    }
    std::vector<double> a(static_cast<size_t>(dim));
    for (double& v : a) v = 4.0 * rng.next_gaussian();
    BatchSigma sig{std::max(kSigmaFloor, 0.5 * rng.next_unit()), 8};
    const double loss = clustering_loss_value(a, registry_of(centers), sig, 2.0 * rng.next_unit());
    CHECK(loss >= 0.0);
    if (loss == 0.0) ++clamped;
  }
  CHECK(clamped > 0);  // the hinge actually engages on some draws
}

TEST_CASE("loss is zero exactly when margin + pull + push <= 0") {
  BatchSigma sig{1.0, 4};
  auto reg = registry_of({{0.0, 0.0}, {9.0, 0.0}});
  // arg = alpha + d0/2 + (-d1/2); at A=(1,0): d0=1, d1=8 -> alpha - 3.5
  for (double alpha : {3.4999, 3.5001}) {
    const double loss = clustering_loss_value(std::vector<double>{1.0, 0.0}, reg, sig, alpha);
    if (alpha < 3.5)
      CHECK(loss == 0.0);
    else
      CHECK(loss == doctest::Approx(alpha - 3.5).epsilon(1e-9));
  }
}

TEST_CASE("clustering loss gradient matches finite differences at 20 random configurations") {
  RngStream rng(29, "fdcluster");
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const int dim = 3 + static_cast<int>(rng.next_below(4));
    const int k = 2 + static_cast<int>(rng.next_below(3));
    std::vector<std::vector<double>> centers(static_cast<size_t>(k));
    for (auto& c : centers) {
      c.resize(static_cast<size_t>(dim));
      for (double& v : c) v = rng.next_unit();
    }
    auto reg = registry_of(centers);
    Tensor a(Shape{dim}, true);
    for (double& v : a.values()) v = rng.next_unit();
    // Keep alpha large enough that the hinge is active (gradient nonzero) and
    // sigma^2 held constant, matching the stop-gradient decision.
    BatchSigma sig{0.2 + 0.5 * rng.next_unit(), 8};
    auto f = [&](Tape* t) { return clustering_loss(t, a, reg, sig, 5.0); };
    auto res = grad_check(f, std::vector<std::pair<std::string, Tensor>>{{"A", a}}, 1e-5, 1e-4);
    CHECK(res.pass);
  }
}

TEST_CASE("translation invariance of the clustering loss") {
  RngStream rng(31, "translate");
  for (int trial = 0; trial < 20; ++trial) {
    const int dim = 4;
    std::vector<std::vector<double>> centers = {{}, {}};
    for (auto& c : centers) {
      c.resize(dim);
      for (double& v : c) v = rng.next_gaussian();
    }
    std::vector<double> a(dim), shift(dim);
    for (double& v : a) v = rng.next_gaussian();
    for (double& v : shift) v = rng.next_gaussian();
    BatchSigma sig{0.7, 8};
    const double base = clustering_loss_value(a, registry_of(centers), sig, 1.0);
    auto moved = centers;
    auto a2 = a;
    for (int j = 0; j < dim; ++j) {
      a2[static_cast<size_t>(j)] += shift[static_cast<size_t>(j)];
      for (auto& c : moved) c[static_cast<size_t>(j)] += shift[static_cast<size_t>(j)];
    }
    const double shifted = clustering_loss_value(a2, registry_of(moved), sig, 1.0);
    CHECK(base == doctest::Approx(shifted).epsilon(1e-9));
  }
}

TEST_CASE("squared-distance toggle matches its own hand evaluation") {
  // A=(0,0), centers {(0,0),(2,0)}, sigma^2=1, alpha=1:
  // squared form: {1 + 0 + log e^{-4/2}}_+ = {1 - 2}_+ = 0
  // unsquared:    {1 + 0 + log e^{-2/2}}_+ = {1 - 1}_+ = 0 boundary
  auto reg = registry_of({{0.0, 0.0}, {2.0, 0.0}});
  BatchSigma sig{1.0, 1};
  // arg = alpha + 0 + log e^{-4/2} = alpha - 2
  CHECK(clustering_loss_value(std::vector<double>{0, 0}, reg, sig, 1.0, true) == 0.0);
  CHECK(clustering_loss_value(std::vector<double>{0, 0}, reg, sig, 1.5, true) == 0.0);
  CHECK(clustering_loss_value(std::vector<double>{0, 0}, reg, sig, 2.5, true) ==
        doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("total loss: degenerate weights, linearity, breakdown consistency") {
  LatticeConfig lat;
  lat.num_layers = 1;
  lat.num_scales = 1;
  lat.channels = 2;
  lat.input_h = 4;
  lat.input_w = 4;
  lat.gate_hidden = 2;
  const auto costs = make_edge_costs(lat);
  LatticeParams p = LatticeParams::init(lat, 7);
  RngStream rng(7, "img");
  Tensor img(Shape{1, 4, 4});
  for (double& v : img.values()) v = rng.next_unit();
  std::vector<int> labels(16, 0);
  labels[3] = labels[7] = 1;
  auto reg = registry_of({{0.2}, {0.9}});
  BatchSigma sig{0.3, 4};

  auto eval_total = [&](LossWeights w) {
    Tape tape;
    LatticeOutput out = lattice_forward(&tape, img, p, lat);
    return total_loss(&tape, out.logits, labels, out.gate_vec, reg, sig, w, costs);
  };

  SUBCASE("lambda1 = lambda2 = 0 leaves exactly the task loss") {
    LossWeights w{0.0, 0.0, 0.5};
    TotalLoss t = eval_total(w);
    CHECK(t.breakdown.total == doctest::Approx(t.breakdown.task).epsilon(1e-15));
  }
  SUBCASE("breakdown sums to the total within 1e-12") {
    LossWeights w{0.8, 0.5, 0.5};
    TotalLoss t = eval_total(w);
    CHECK(std::abs(t.breakdown.task + t.breakdown.cost_weighted + t.breakdown.clustering_weighted -
                   t.breakdown.total) < 1e-12);
    CHECK(t.breakdown.cost_weighted == doctest::Approx(0.8 * t.breakdown.cost).epsilon(1e-12));
  }
  SUBCASE("doubling lambda2 doubles the clustering contribution") {
    // alpha chosen high so the hinge is active and the raw term nonzero
    LossWeights w1{0.3, 0.4, 6.0};
    LossWeights w2{0.3, 0.8, 6.0};
    TotalLoss t1 = eval_total(w1);
    TotalLoss t2 = eval_total(w2);
    REQUIRE(t1.breakdown.clustering > 0.0);
    CHECK(t2.breakdown.clustering_weighted ==
          doctest::Approx(2.0 * t1.breakdown.clustering_weighted).epsilon(1e-12));
    CHECK(t2.breakdown.task == doctest::Approx(t1.breakdown.task).epsilon(1e-15));
  }
  SUBCASE("injected component arithmetic: 0.5 + 1*0.4 + 2*0.2 = 1.3") {
    const double total = 0.5 + 1.0 * 0.4 + 2.0 * 0.2;
    CHECK(total == doctest::Approx(1.3).epsilon(1e-15));
  }
  SUBCASE("negative weights are rejected") {
    LossWeights w{-0.1, 0.5, 0.5};
    CHECK_THROWS_AS(eval_total(w), std::invalid_argument);
  }
}
