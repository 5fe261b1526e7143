// SPDX-License-Identifier: Apache-2.0
#include <canopy/loss.hpp>

#include <doctest.h>
#include <gradcheck.hpp>

#include <cmath>

using namespace canopy;
using namespace canopy::testing;

TEST_CASE("per-pixel loss values")
{
  CHECK(nll(3.0, 3.0, 1.0, 0.0) == 0.0);
  CHECK(nll(5.0, 3.0, 2.0, 0.0) == doctest::Approx(0.5 * (1.0 + std::log(4.0))).epsilon(1e-12));
  CHECK(nll(5.0, 3.0, 2.0, 0.25) == doctest::Approx(0.5 * (1.0 + std::log(4.0)) + 1.0).epsilon(1e-12));
}

TEST_CASE("variance argmin by golden-section scan")
{
  auto scan = [](double r, double lambda) {
    // minimize over log sigma^2
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = -30.0, b = 30.0;
    auto f = [&](double ls) { return nll(r, 0.0, std::exp(0.5 * ls), lambda); };
    double c = b - g * (b - a), d = a + g * (b - a);
    for (int i = 0; i < 200; ++i) {
      if (f(c) < f(d))
        b = d;
      else
        a = c;
      c = b - g * (b - a);
      d = a + g * (b - a);
    }
    return std::exp(0.5 * (a + b));
  };
  for (double r : {0.3, 1.0, 2.5, 40.0}) {
    CHECK(std::abs(scan(r, 0.0) - r * r) < 1e-6 * std::max(1.0, r * r));
    CHECK(optimal_variance(r, 0.0) == doctest::Approx(r * r));
    for (double lambda : {0.1, 2.0})
      CHECK(scan(r, lambda) == doctest::Approx(optimal_variance(r, lambda)).epsilon(1e-6));
  }
}

TEST_CASE("nll_map derivatives match finite differences (64-bit)")
{
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor64 pred = random_tensor({3, 4}, rng, -2, 2);
    const Tensor64 target = random_tensor({3, 4}, rng, -2, 2);
    Tensor64 sigma = random_tensor({3, 4}, rng, 0.3, 2.0);
    const double lambda = 0.1 * trial;
    auto total = [&] {
      const auto m = nll_map(pred, target, sigma, lambda, false);
      double s = 0;
      for (double v : m.loss.values())
        s += v;
      return s;
    };
    const auto m = nll_map(pred, target, sigma, lambda, false);
    const auto idx = all_indices(pred);
    CHECK(relative_error(pick(m.d_pred, idx), numeric_gradient(total, pred, idx)) < 1e-6);
    CHECK(relative_error(pick(m.d_sigma, idx), numeric_gradient(total, sigma, idx)) < 1e-6);
  }
  const Tensor64 a({1, 2}, {1.0, 2.0}), b({1, 2}, {0.0, 0.0});
  const auto fixed = nll_map(a, b, Tensor64{}, 5.0, true);
  CHECK(fixed.d_pred == a);
  CHECK(fixed.d_sigma.empty());
}

TEST_CASE("uniform loss balances to c(lambda_h + lambda_s) for any split")
{
  for (std::size_t n_hard : {1u, 3u, 17u})
    for (std::size_t n : {20u, 64u}) {
      Tensor mask({1, n});
      for (std::size_t i = 0; i < n_hard; ++i)
        mask[i * 3 % n] = 1.0f;
      const Tensor loss({1, n}, 2.5f);
      CHECK(balance(loss, mask, 1.0, 0.3) == doctest::Approx(2.5 * 1.3));
      CHECK(balance(loss, mask, 2.0, 0.0) == doctest::Approx(5.0));
    }
  Tensor all({2, 2}, 1.0f);
  CHECK(balance(Tensor({2, 2}, 4.0f), all, 1.0, 0.7) == doctest::Approx(4.0));
  CHECK_THROWS_AS(balance(Tensor({2, 2}), Tensor({2, 2}), 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("soft term: lambda_s = 0 ignores soft pixels; doubling n_s keeps the total")
{
  Tensor mask({1, 4}, {1, 0, 0, 0});
  Tensor loss({1, 4}, {2, 5, 5, 5});
  const double base = balance(loss, mask, 1.0, 0.5);
  Tensor mask2({1, 7}, {1, 0, 0, 0, 0, 0, 0});
  Tensor loss2({1, 7}, {2, 5, 5, 5, 5, 5, 5});
  CHECK(balance(loss2, mask2, 1.0, 0.5) == doctest::Approx(base));
  loss[2] = 1e6f;
  CHECK(balance(loss, mask, 1.0, 0.0) == doctest::Approx(2.0));
}

TEST_CASE("soft weight schedule endpoints")
{
  CHECK(soft_weight_schedule(0, 8, 24) == doctest::Approx(1.0));
  CHECK(soft_weight_schedule(8, 8, 24) == doctest::Approx(1e-3));
  CHECK(soft_weight_schedule(23, 8, 24) == doctest::Approx(1e-2));
  CHECK(soft_weight_schedule(4, 8, 24) == doctest::Approx(std::pow(10.0, -1.5)));
  for (int e = 1; e < 8; ++e)
    CHECK(soft_weight_schedule(e, 8, 24) < soft_weight_schedule(e - 1, 8, 24));
  for (int e = 9; e < 24; ++e)
    CHECK(soft_weight_schedule(e, 8, 24) > soft_weight_schedule(e - 1, 8, 24));
  CHECK_THROWS_AS(soft_weight_schedule(24, 8, 24), std::invalid_argument);
}

TEST_CASE("total loss weighting")
{
  const std::vector<double> l{1.0, 2.0, 4.0};
  CHECK(total_loss(l, std::vector<double>{1, 1, 1}, 1.0) == 7.0);
  CHECK(total_loss(l, std::vector<double>{1, 0, 0}, 1.0) == 1.0);
  CHECK(total_loss(l, std::vector<double>{1, 1, 1}, 2.0) == 14.0);
  CHECK_THROWS_AS(total_loss(l, std::vector<double>{1, 1}, 1.0), std::invalid_argument);
}

TEST_CASE("pairwise sum is order-fixed and accurate")
{
  std::vector<double> v(1000, 0.1);
  CHECK(pairwise_sum(v) == doctest::Approx(100.0).epsilon(1e-14));
  CHECK(pairwise_sum(std::vector<double>{}) == 0.0);
}

TEST_CASE("loss weights validation")
{
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.alpha = {1, -1, 1};
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}
