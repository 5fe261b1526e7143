// SPDX-License-Identifier: Apache-2.0
#include <canopy/ops.hpp>
#include <canopy/optim.hpp>

#include <doctest.h>
#include <gradcheck.hpp>

#include <cmath>

using namespace canopy;
using namespace canopy::testing;

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input exactly")
{
  std::mt19937_64 rng(1);
  const Tensor64 x = random_tensor({3, 5, 7}, rng);
  Tensor64 k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c)
    k[c * 3 + c] = 1.0;
  const Tensor64 y = conv2d(x, k, Tensor64({3}), ConvGeometry{});
  CHECK(y == x);

  const Tensor xf = x.cast<float>();
  const Tensor yf = conv2d(xf, k.cast<float>(), Tensor({3}), ConvGeometry{});
  CHECK(yf == xf);
}

TEST_CASE("conv2d: constant input with all-ones 3x3 kernel gives 9c in the interior")
{
  const double c = 2.5;
  const Tensor64 x({1, 6, 6}, c);
  const Tensor64 k({1, 1, 3, 3}, 1.0);
  const Tensor64 y = conv2d(x, k, Tensor64({1}), ConvGeometry::same(3));
  REQUIRE(y.shape() == Shape{1, 6, 6});
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t q = 1; q < 5; ++q)
      CHECK(y.at(0, r, q) == doctest::Approx(9 * c));
  CHECK(y.at(0, 0, 0) == doctest::Approx(4 * c));
  CHECK(y.at(0, 0, 3) == doctest::Approx(6 * c));
}

TEST_CASE("conv2d: geometry of strided and even kernels")
{
  const Tensor x({2, 8, 8}, 1.0f);
  CHECK(conv2d(x, Tensor({4, 2, 3, 3}), Tensor({4}), ConvGeometry::symmetric(1, 2)).shape() ==
        Shape{4, 4, 4});
  CHECK(conv2d(x, Tensor({4, 2, 2, 2}), Tensor({4}), ConvGeometry::same(2)).shape() ==
        Shape{4, 8, 8});
  CHECK(conv2d(x, Tensor({4, 2, 3, 3}), Tensor({4}), ConvGeometry{}).shape() == Shape{4, 6, 6});
}

TEST_CASE("conv2d: shape mismatch names both shapes")
{
  const Tensor x({2, 4, 4});
  const Tensor k({1, 3, 3, 3});
  try {
    (void)conv2d(x, k, Tensor({1}), ConvGeometry::same(3));
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,4,4]") != std::string::npos);
    CHECK(msg.find("[1,3,3,3]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)conv2d(x, Tensor({1, 2, 4, 4}), Tensor({1}), ConvGeometry{}),
                  std::invalid_argument);
}

namespace {

struct ConvCase
{
  std::size_t k;
  ConvGeometry g;
};

double conv_gradient_error(std::mt19937_64& rng, const ConvCase& cc, std::size_t cin,
                           std::size_t cout, std::size_t h, std::size_t w)
{
  Tensor64 x = random_tensor({cin, h, w}, rng);
  Tensor64 k = random_tensor({cout, cin, cc.k, cc.k}, rng);
  Tensor64 b = random_tensor({cout}, rng);
  const Tensor64 y0 = conv2d(x, k, b, cc.g);
  const Tensor64 wgt = random_tensor(y0.shape(), rng);
  auto f = [&] { return weighted_sum(conv2d(x, k, b, cc.g), wgt); };
  const LayerGrad<double> g = conv2d_backward(x, k, wgt, cc.g);

  std::vector<double> analytic, numeric;
  auto append = [&](Tensor64& p, const Tensor64& gp) {
    const auto idx = all_indices(p);
    const auto n = numeric_gradient(f, p, idx);
    const auto a = pick(gp, idx);
    numeric.insert(numeric.end(), n.begin(), n.end());
    analytic.insert(analytic.end(), a.begin(), a.end());
  };
  append(x, g.grad_input);
  append(k, g.grad_kernel);
  append(b, g.grad_bias);
  return relative_error(analytic, numeric);
}

} // namespace

TEST_CASE("conv2d backward matches central differences (64-bit)")
{
  std::mt19937_64 rng(42);
  const std::vector<ConvCase> cases{{1, ConvGeometry{}},
                                    {3, ConvGeometry::same(3)},
                                    {3, ConvGeometry::symmetric(1, 2)},
                                    {2, ConvGeometry::same(2)},
                                    {3, ConvGeometry{}}};
  SUBCASE("1x4x4 single channel")
  {
    CHECK(conv_gradient_error(rng, {3, ConvGeometry::same(3)}, 1, 1, 4, 4) < 1e-4);
  }
  SUBCASE("randomized geometries")
  {
    for (int rep = 0; rep < 4; ++rep)
      for (const auto& cc : cases)
        CHECK(conv_gradient_error(rng, cc, 2, 3, 6, 6) < 1e-4);
  }
}

TEST_CASE("bilinear_upsample2x: constant field stays constant")
{
  const Tensor64 x({2, 3, 5}, 1.75);
  const Tensor64 y = bilinear_upsample2x(x);
  REQUIRE(y.shape() == Shape{2, 6, 10});
  for (double v : y.values())
    CHECK(v == doctest::Approx(1.75));
}

TEST_CASE("bilinear_upsample2x: half-pixel convention on a [0,1] row")
{
  // Output sample o sits at source coordinate (o + 0.5)/2 - 0.5, clamped to
  // [0, n-1]: -0.25 -> 0, 0.25, 0.75, 1.25 -> 1.
  const Tensor64 x({1, 1, 2}, std::vector<double>{0.0, 1.0});
  const Tensor64 y = bilinear_upsample2x(x);
  REQUIRE(y.shape() == Shape{1, 2, 4});
  const double expected[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t q = 0; q < 4; ++q)
      CHECK(y.at(0, r, q) == doctest::Approx(expected[q]).epsilon(1e-15));
}

TEST_CASE("bilinear_upsample2x backward matches central differences")
{
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor64 x = random_tensor({2, 3, 4}, rng);
    const Tensor64 wgt = random_tensor({2, 6, 8}, rng);
    auto f = [&] { return weighted_sum(bilinear_upsample2x(x), wgt); };
    const auto idx = all_indices(x);
    const auto n = numeric_gradient(f, x, idx);
    const auto a = pick(bilinear_upsample2x_backward(wgt), idx);
    CHECK(relative_error(a, n) < 1e-4);
  }
}

TEST_CASE("relu and softplus values")
{
  const Tensor64 x({3}, std::vector<double>{-1.0, 2.0, 0.0});
  const Tensor64 r = relu(x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
  CHECK(r[2] == 0.0);

  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(40.0) - 40.0 < 1e-6);
  CHECK(softplus(40.0) >= 40.0);
  for (double v : {-800.0, -40.0, -1.0, 0.0, 1.0, 700.0, 1e6}) {
    CHECK(softplus(v) > 0.0);
    CHECK(std::isfinite(softplus(v)));
  }
  const Tensor sp = softplus(Tensor({2}, std::vector<float>{-100.0f, 100.0f}));
  CHECK(sp[0] > 0.0f);
  CHECK(sp[1] == doctest::Approx(100.0f));
}

TEST_CASE("relu and softplus backward match central differences")
{
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor64 x = random_tensor_off_zero({2, 4, 4}, rng);
    const Tensor64 wgt = random_tensor(x.shape(), rng);
    const auto idx = all_indices(x);
    auto fr = [&] { return weighted_sum(relu(x), wgt); };
    CHECK(relative_error(pick(relu_backward(x, wgt), idx), numeric_gradient(fr, x, idx)) < 1e-4);
    auto fs = [&] { return weighted_sum(softplus(x), wgt); };
    CHECK(relative_error(pick(softplus_backward(x, wgt), idx), numeric_gradient(fs, x, idx)) <
          1e-4);
  }
}

TEST_CASE("concat/split are inverse on the channel axis")
{
  std::mt19937_64 rng(8);
  const Tensor64 a = random_tensor({2, 3, 3}, rng);
  const Tensor64 b = random_tensor({1, 3, 3}, rng);
  const auto [a2, b2] = split_channels(concat_channels(a, b), 2);
  CHECK(a2 == a);
  CHECK(b2 == b);
  CHECK_THROWS_AS((void)concat_channels(a, random_tensor({1, 2, 3}, rng)), std::invalid_argument);
}

TEST_CASE("glorot_uniform: limit, support and determinism")
{
  CHECK(glorot_limit(3, 3) == doctest::Approx(1.0).epsilon(1e-15));
  std::mt19937_64 r1(11), r2(11);
  const Tensor a = glorot_uniform({64, 3}, 3, 3, r1);
  const Tensor b = glorot_uniform({64, 3}, 3, 3, r2);
  CHECK(a == b);
  const auto limit = static_cast<float>(glorot_limit(3, 3));
  for (float v : a.values()) {
    CHECK(v >= -limit);
    CHECK(v <= limit);
  }
  std::mt19937_64 r3(11);
  CHECK_THROWS_AS((void)glorot_uniform({1}, 0, 3, r3), std::invalid_argument);
  CHECK_THROWS_AS((void)glorot_uniform({1}, 3, 0, r3), std::invalid_argument);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged and decays moments")
{
  ParamMap<float> p{{"w", Tensor({3}, std::vector<float>{1.0f, -2.0f, 3.0f})}};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(p, {{"w", Tensor({3}, std::vector<float>{1.0f, 1.0f, 1.0f})}}, st, cfg);
  const Tensor after_first = p.at("w");
  const float m0 = st.moments.at("w").m[0];
  const float v0 = st.moments.at("w").v[0];
  adam_step(p, {{"w", Tensor({3})}}, st, cfg);
  // Non-zero moments still move parameters; check the moments decayed exactly.
  CHECK(st.moments.at("w").m[0] == doctest::Approx(0.9 * m0));
  CHECK(st.moments.at("w").v[0] == doctest::Approx(0.999 * v0));

  ParamMap<float> q{{"w", Tensor({2}, std::vector<float>{0.5f, -0.5f})}};
  AdamState fresh;
  adam_step(q, {{"w", Tensor({2})}}, fresh, cfg);
  CHECK(q.at("w")[0] == 0.5f);
  CHECK(q.at("w")[1] == -0.5f);
  CHECK(after_first != p.at("w"));
}

namespace {

// Textbook scalar Adam, used as the oracle.
struct ScalarAdam
{
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, double b1, double b2, double eps)
  {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return p - lr * mh / (std::sqrt(vh) + eps);
  }
};

} // namespace

TEST_CASE("adam: trajectory matches a scalar re-implementation")
{
  AdamConfig cfg;
  cfg.lr = 1e-2;
  ParamMap<float> p{{"w", Tensor({1}, 0.3f)}};
  AdamState st;
  ScalarAdam oracle;
  double ref = 0.3;
  const double grads[] = {0.7, -0.2, 1e-3, 4.0, 0.0, -3.0};
  for (double g : grads) {
    adam_step(p, {{"w", Tensor({1}, static_cast<float>(g))}}, st, cfg);
    ref = oracle.step(ref, static_cast<float>(g), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    CHECK(p.at("w")[0] == doctest::Approx(ref).epsilon(1e-6));
  }

  // First step: lr * g / (|g| + eps).
  ParamMap<float> q{{"w", Tensor({1}, 0.0f)}};
  AdamState fresh;
  adam_step(q, {{"w", Tensor({1}, 0.25f)}}, fresh, cfg);
  CHECK(q.at("w")[0] == doctest::Approx(-cfg.lr * 0.25 / (0.25 + cfg.epsilon)).epsilon(1e-6));
}

TEST_CASE("adam: non-finite gradient aborts the step and names the parameter")
{
  ParamMap<float> p{{"a", Tensor({1}, 1.0f)}, {"b", Tensor({1}, 1.0f)}};
  AdamState st;
  const ParamMap<float> g{{"a", Tensor({1}, 1.0f)},
                          {"b", Tensor({1}, std::numeric_limits<float>::quiet_NaN())}};
  try {
    adam_step(p, g, st, AdamConfig{});
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(p.at("a")[0] == 1.0f);
  CHECK(st.step == 0);
  CHECK(st.moments.empty());
}

TEST_CASE("adam: identical inputs give identical trajectories; frozen names are skipped")
{
  auto run = [] {
    ParamMap<float> p{{"w", Tensor({4}, 0.1f)}, {"f", Tensor({2}, 0.5f)}};
    AdamState st;
    std::mt19937_64 rng(99);
    std::normal_distribution<float> nd;
    for (int i = 0; i < 20; ++i) {
      ParamMap<float> g{{"w", Tensor({4})}, {"f", Tensor({2}, 1.0f)}};
      for (auto& v : g.at("w").values())
        v = nd(rng);
      adam_step(p, g, st, AdamConfig{}, {"f"});
    }
    return p;
  };
  const auto a = run();
  const auto b = run();
  CHECK(checksum(a) == checksum(b));
  CHECK(a.at("f")[0] == 0.5f);
}
