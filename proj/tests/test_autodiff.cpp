// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "divdr/tensor.hpp"

using namespace divdr;

namespace {

Tensor randt(Shape shape, RngStream& rng, bool rg = true) {
  Tensor t(shape, rg);
  for (double& v : t.values()) v = rng.next_gaussian();
  return t;
}

double fd_vs_analytic(const std::function<Tensor(Tape*)>& f,
                      std::vector<std::pair<std::string, Tensor>> params) {
  return grad_check(f, params, 1e-5, 1e-4).max_rel_err;
}

}  // namespace

TEST_CASE("forward examples") {
  Tensor x = Tensor::from({2}, {2.0, -3.0});
  Tensor y = relu(nullptr, x);
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[1] == 0.0);

  CHECK(sigmoid(nullptr, Tensor::scalar(0.0)).item() == 0.5);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = matmul(nullptr, a, eye);
  for (int i = 0; i < 4; ++i) CHECK(m.data()[i] == a.data()[i]);
}

TEST_CASE("backward trivial derivatives") {
  {
    Tensor x = Tensor::scalar(2.0, true);
    Tape tape;
    tape.backward(relu(&tape, x));
    CHECK(x.grad()[0] == 1.0);
  }
  {
    Tensor x = Tensor::scalar(-1.0, true);
    Tape tape;
    tape.backward(relu(&tape, x));
    CHECK(x.grad()[0] == 0.0);
  }
  {
    Tensor x = Tensor::scalar(0.0, true);
    Tape tape;
    tape.backward(sigmoid(&tape, x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("sum rule: y = a + a doubles the gradient") {
  Tensor a = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Tape tape;
  Tensor y = add(&tape, a, a);
  tape.backward(mean(&tape, y));
  for (int i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("gradient accumulates across fan-out and backward calls") {
  Tensor a = Tensor::from({1}, {3.0}, true);
  {
    Tape tape;
    tape.backward(mul_scalar(&tape, a, 2.0));
  }
  CHECK(a.grad()[0] == 2.0);
  {
    Tape tape;
    tape.backward(mul_scalar(&tape, a, 2.0));
  }
  CHECK(a.grad()[0] == 4.0);  // additive across calls until zero_grad
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);
}

TEST_CASE("two-layer perceptron matches finite differences") {
  RngStream rng(7, "mlp");
  Tensor x = randt({1, 6}, rng, false);
  Tensor w1 = randt({6, 5}, rng);
  Tensor b1 = randt({1, 5}, rng);
  Tensor w2 = randt({5, 1}, rng);
  Tensor b2 = randt({1, 1}, rng);
  auto f = [&](Tape* t) {
    Tensor h = relu(t, add(t, matmul(t, x, w1), b1));
    return mean(t, add(t, matmul(t, h, w2), b2));
  };
  auto res = grad_check(f, std::vector<std::pair<std::string, Tensor>>{
                               {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}},
                        1e-5, 1e-4);
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("grad_check: closed-form and degenerate cases") {
  SUBCASE("f(x) = x^2 at x = 3") {
    Tensor x = Tensor::scalar(3.0, true);
    auto f = [&](Tape* t) { return mul_scalar(t, x, x); };
    auto res = grad_check(f, std::vector<std::pair<std::string, Tensor>>{{"x", x}}, 1e-5, 1e-8);
    CHECK(res.pass);
    CHECK(res.max_rel_err < 1e-8);
  }
  SUBCASE("dead relu region: analytic and FD both exactly zero") {
    Tensor x = Tensor::from({4}, {-1.0, -2.0, -3.0, -4.0}, true);
    auto f = [&](Tape* t) { return mean(t, relu(t, x)); };
    auto res = grad_check(f, std::vector<std::pair<std::string, Tensor>>{{"x", x}}, 1e-5, 1e-4);
    CHECK(res.max_rel_err == 0.0);
  }
  SUBCASE("non-deterministic program is rejected") {
    int calls = 0;
    Tensor x = Tensor::scalar(1.0, true);
    auto f = [&](Tape* t) { return mul_scalar(t, x, static_cast<double>(++calls)); };
    CHECK_THROWS_AS(
        grad_check(f, std::vector<std::pair<std::string, Tensor>>{{"x", x}}, 1e-5, 1e-4),
        std::runtime_error);
  }
  SUBCASE("h outside (0, 1e-2] is rejected") {
    Tensor x = Tensor::scalar(1.0, true);
    auto f = [&](Tape* t) { return mul_scalar(t, x, 2.0); };
    CHECK_THROWS_AS(grad_check(f, std::vector<std::pair<std::string, Tensor>>{{"x", x}}, 0.1, 1e-4),
                    std::invalid_argument);
  }
}

TEST_CASE("every op matches finite differences on random small shapes, seeds 0..9") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    RngStream rng(seed, "opsweep");

    {
      Tensor a = randt({3, 4}, rng), b = randt({4, 2}, rng);
      auto f = [&](Tape* t) { return mean(t, matmul(t, a, b)); };
      CHECK(fd_vs_analytic(f, {{"a", a}, {"b", b}}) < 1e-4);
    }
    {
      Tensor x = randt({2, 3, 4}, rng), w = randt({2, 2, 3, 3}, rng), b = randt({2}, rng);
      auto f = [&](Tape* t) { return mean(t, conv3x3(t, x, w, b)); };
      CHECK(fd_vs_analytic(f, {{"x", x}, {"w", w}, {"b", b}}) < 1e-4);
    }
    {
      Tensor x = randt({3, 2, 3}, rng), w = randt({2, 3}, rng), b = randt({2}, rng);
      auto f = [&](Tape* t) { return mean(t, conv1x1(t, x, w, b)); };
      CHECK(fd_vs_analytic(f, {{"x", x}, {"w", w}, {"b", b}}) < 1e-4);
    }
    {
      Tensor a = randt({6}, rng), b = randt({6}, rng);
      auto f = [&](Tape* t) { return l2_norm(t, add(t, a, b)); };
      CHECK(fd_vs_analytic(f, {{"a", a}, {"b", b}}) < 1e-4);
    }
    {
      Tensor x = randt({5}, rng), s = randt({1}, rng);
      auto f = [&](Tape* t) { return mean(t, mul_scalar(t, x, s)); };
      CHECK(fd_vs_analytic(f, {{"x", x}, {"s", s}}) < 1e-4);
      auto g = [&](Tape* t) { return mean(t, mul_scalar(t, x, 1.7)); };
      CHECK(fd_vs_analytic(g, {{"x", x}}) < 1e-4);
    }
    {
      Tensor x = randt({12}, rng);
      auto f = [&](Tape* t) { return mean(t, relu(t, x)); };
      CHECK(fd_vs_analytic(f, {{"x", x}}) < 1e-4);
      auto g = [&](Tape* t) { return mean(t, sigmoid(t, x)); };
      CHECK(fd_vs_analytic(g, {{"x", x}}) < 1e-4);
      auto h = [&](Tape* t) { return l2_norm(t, x); };
      CHECK(fd_vs_analytic(h, {{"x", x}}) < 1e-4);
      auto l = [&](Tape* t) { return log_sum_exp(t, std::vector<Tensor>{x}); };
      CHECK(fd_vs_analytic(l, {{"x", x}}) < 1e-4);
    }
    {
      Tensor x = randt({2, 4, 4}, rng);
      auto f = [&](Tape* t) { return mean(t, global_avg_pool(t, x)); };
      CHECK(fd_vs_analytic(f, {{"x", x}}) < 1e-4);
      auto g = [&](Tape* t) { return l2_norm(t, upsample2x_nearest(t, x)); };
      CHECK(fd_vs_analytic(g, {{"x", x}}) < 1e-4);
      auto h = [&](Tape* t) { return l2_norm(t, downsample2x_avg(t, x)); };
      CHECK(fd_vs_analytic(h, {{"x", x}}) < 1e-4);
    }
    {
      Tensor a = randt({1, 2, 2}, rng), b = randt({3, 2, 2}, rng);
      auto f = [&](Tape* t) { return l2_norm(t, concat_channels(t, std::vector<Tensor>{a, b})); };
      CHECK(fd_vs_analytic(f, {{"a", a}, {"b", b}}) < 1e-4);
    }
    {
      Tensor s1 = randt({1}, rng), s2 = randt({1}, rng), s3 = randt({1}, rng);
      auto f = [&](Tape* t) { return log_sum_exp(t, std::vector<Tensor>{s1, s2, s3}); };
      CHECK(fd_vs_analytic(f, {{"s1", s1}, {"s2", s2}, {"s3", s3}}) < 1e-4);
    }
    {
      Tensor logits = randt({3, 2, 2}, rng);
      std::vector<double> lab(4);
      for (double& v : lab) v = static_cast<double>(rng.next_below(3));
      Tensor labels = Tensor::from({2, 2}, lab);
      auto f = [&](Tape* t) { return softmax_cross_entropy(t, logits, labels); };
      CHECK(fd_vs_analytic(f, {{"logits", logits}}) < 1e-4);
    }
    {
      Tensor x = randt({8}, rng);
      auto f = [&](Tape* t) { return mean(t, slice(t, x, 2, 4)); };
      CHECK(fd_vs_analytic(f, {{"x", x}}) < 1e-4);
    }
  }
}

TEST_CASE("forward_op dispatcher matches the typed entry points") {
  RngStream rng(3, "dispatch");
  Tensor a = randt({2, 3}, rng, false), b = randt({3, 2}, rng, false);
  Tensor via_dispatch = forward_op(nullptr, Op::kMatmul, std::vector<Tensor>{a, b});
  Tensor direct = matmul(nullptr, a, b);
  CHECK(std::memcmp(via_dispatch.data(), direct.data(), sizeof(double) * 4) == 0);

  Tensor x = randt({5}, rng, false);
  Tensor s = forward_op(nullptr, Op::kSlice, std::vector<Tensor>{x}, 2.0, 1);
  CHECK(s.numel() == 2);
  CHECK(s.data()[0] == x.data()[1]);
}

TEST_CASE("determinism: identical inputs give bit-identical losses") {
  auto run = [] {
    RngStream rng(11, "det");
    Tensor x = randt({2, 4, 4}, rng);
    Tensor w = randt({2, 2, 3, 3}, rng);
    Tensor b = randt({2}, rng);
    Tape tape;
    Tensor loss = mean(&tape, relu(&tape, conv3x3(&tape, x, w, b)));
    const double v = loss.item();
    tape.backward(loss);
    return std::pair<double, double>(v, x.grad()[0]);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
  CHECK(std::memcmp(&g1, &g2, sizeof(double)) == 0);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tensor a({2}), b({3});
  CHECK_THROWS_WITH_AS(add(nullptr, a, b), "add: incompatible shapes (2) and (3)",
                       std::invalid_argument);
  Tensor m1({2, 3}), m2({2, 3});
  CHECK_THROWS_WITH_AS(matmul(nullptr, m1, m2), "matmul: incompatible shapes (2,3) and (2,3)",
                       std::invalid_argument);
  Tensor x({2, 4, 4}), w({2, 3, 3, 3}), bias({2});
  CHECK_THROWS_AS(conv3x3(nullptr, x, w, bias), std::invalid_argument);
  Tensor odd({1, 3, 4});
  CHECK_THROWS_AS(downsample2x_avg(nullptr, odd), std::invalid_argument);
  CHECK_THROWS_AS(slice(nullptr, Tensor({4}), 2, 5), std::invalid_argument);
}

TEST_CASE("backward rejects a non-scalar loss and an off-tape loss") {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y = relu(&tape, a);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  Tensor scalar_off_tape = Tensor::scalar(1.0, true);
  Tape other;
  Tensor recorded = relu(&other, scalar_off_tape);  // keep `other` nonempty
  CHECK_THROWS_AS(other.backward(scalar_off_tape), std::invalid_argument);
}

TEST_CASE("label validation in softmax_cross_entropy") {
  Tensor logits = Tensor::from({2, 1, 1}, {1.0, 0.0});
  CHECK_THROWS_AS(softmax_cross_entropy(nullptr, logits, Tensor::from({1, 1}, {2.0})),
                  std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(nullptr, logits, Tensor::from({1, 1}, {0.5})),
                  std::invalid_argument);
}
