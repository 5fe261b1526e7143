// SPDX-License-Identifier: Apache-2.0
#include <canopy/softlabel.hpp>

#include <doctest.h>

#include <cmath>
#include <random>

using namespace canopy;

namespace {

const std::vector<std::string> kVars{"agbd", "ch", "cc"};

PointLabel point(int row, int col, float agbd, float ch, float cc)
{
  PointLabel p;
  p.row = row;
  p.col = col;
  p.agbd = agbd;
  p.rh.fill(ch);
  p.cc = cc;
  return p;
}

// Brute-force reference: for each soft pixel scan every hard point, full
// cosine in double, first maximum wins.
std::vector<std::size_t> brute_force_source(const Tensor& bands, const std::vector<PointLabel>& pts)
{
  const std::size_t h = bands.height(), w = bands.width();
  auto spectrum = [&](std::size_t px) {
    std::vector<double> s(kSpectralBands);
    for (int b = 0; b < kSpectralBands; ++b)
      s[static_cast<std::size_t>(b)] = bands[static_cast<std::size_t>(b) * h * w + px];
    return s;
  };
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return aa == 0 || bb == 0 ? 0.0 : ab / std::sqrt(aa * bb);
  };
  std::vector<std::size_t> src(h * w);
  for (std::size_t px = 0; px < h * w; ++px) {
    double best = -2.0;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      const double s = cosine(spectrum(px), spectrum(static_cast<std::size_t>(pts[j].row) * w +
                                                     static_cast<std::size_t>(pts[j].col)));
      if (s > best + kSimilarityTieTolerance) {
        best = s;
        src[px] = j;
      }
    }
  }
  return src;
}

} // namespace

TEST_CASE("cosine similarity")
{
  const std::vector<float> x{0.3f, -1.2f, 4.0f};
  CHECK(cosine_similarity(x, x) == doctest::Approx(1.0));
  CHECK(cosine_similarity(std::vector<float>{1, 0}, std::vector<float>{0, 1}) == 0.0);
  CHECK(cosine_similarity(std::vector<float>{1, 0}, std::vector<float>{1, 1}) ==
        doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(cosine_similarity(std::vector<float>{0, 0}, std::vector<float>{1, 1}) == 0.0);
}

TEST_CASE("hard labels place point values at their pixels only")
{
  const std::vector<PointLabel> pts{point(1, 2, 50, 900, 40), point(1, 2, 70, 1000, 60), point(3, 0, 10, 100, 5)};
  const LabelMap m = hard_labels(pts, 4, 4, kVars);
  CHECK(m.n_hard == 2);
  CHECK(m.n_soft == 14);
  CHECK(m.target_of("agbd").at(1, 2) == 50.0f);
  CHECK(m.target_of("ch").at(3, 0) == 100.0f);
  CHECK(m.mask.at(0, 0) == 0.0f);
  CHECK(m.target_of("cc").at(0, 0) == 0.0f);
}

TEST_CASE("one hard point labels every pixel")
{
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor bands({6, 8, 8});
  for (auto& v : bands.values())
    v = u(rng);
  const LabelMap m = spectral_soft_labels(bands, {point(2, 5, 123, 2000, 70)}, kVars);
  for (float v : m.target_of("agbd").values())
    CHECK(v == 123.0f);
  CHECK(m.n_soft == 63);
}

TEST_CASE("a soft pixel with the same spectrum as a hard pixel takes its value")
{
  Tensor bands({6, 4, 4}, 0.1f);
  for (std::size_t b = 0; b < 6; ++b) {
    bands.at(b, 0, 0) = 1.0f + static_cast<float>(b);
    bands.at(b, 3, 3) = 6.0f - static_cast<float>(b);
    bands.at(b, 2, 1) = 2.0f * (1.0f + static_cast<float>(b));
  }
  const LabelMap m =
    spectral_soft_labels(bands, {point(0, 0, 10, 100, 1), point(3, 3, 20, 200, 2)}, kVars);
  CHECK(m.target_of("agbd").at(2, 1) == 10.0f);
}

TEST_CASE("spectral soft labels match a brute-force pairwise scan on random tiles")
{
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<std::size_t> side(4, 16);
    const std::size_t h = side(rng), w = side(rng);
    Tensor bands({13, h, w});
    // Coarse levels produce exact spectral ties.
    std::uniform_int_distribution<int> level(0, 3);
    for (auto& v : bands.values())
      v = static_cast<float>(level(rng));
    std::uniform_int_distribution<int> row(0, static_cast<int>(h) - 1), col(0, static_cast<int>(w) - 1);
    std::vector<PointLabel> pts;
    const int n = 1 + trial % 7;
    for (int i = 0; i < n; ++i)
      pts.push_back(point(row(rng), col(rng), static_cast<float>(i), static_cast<float>(100 * i), 1.0f));
    const LabelMap m = spectral_soft_labels(bands, pts, kVars);
    const LabelMap hard = hard_labels(pts, h, w, kVars);
    const auto src = brute_force_source(bands, pts);
    for (std::size_t px = 0; px < h * w; ++px) {
      if (hard.mask[px] > 0.5f)
        CHECK(m.target_of("agbd")[px] == hard.target_of("agbd")[px]);
      else
        CHECK(m.target_of("agbd")[px] == static_cast<float>(src[px]));
    }
  }
}

TEST_CASE("combine blends hard and soft by the mask")
{
  const Tensor hard({2, 2}, {1, 2, 3, 4});
  const Tensor soft({2, 2}, {10, 20, 30, 40});
  CHECK(combine(Tensor({2, 2}, 1.0f), hard, soft) == hard);
  CHECK(combine(Tensor({2, 2}, 0.0f), hard, soft) == soft);
  CHECK(combine(Tensor({2, 2}, {1, 0, 0, 1}), hard, soft) == Tensor({2, 2}, {1, 20, 30, 4}));
  CHECK_THROWS_AS(combine(Tensor({2, 2}), hard, Tensor({2, 3})), std::invalid_argument);
}

TEST_CASE("teacher targets: hard pixels from the data, soft pixels from the teacher")
{
  NetworkConfig c;
  c.encoder_channels = {4, 6};
  c.decoder_feature_dim = 5;
  c.head_hidden_dims = {3, 1};
  NetworkParams zero = build_network(c, 1);
  for (auto& [n, t] : zero.tensors)
    t.fill(0.0f);
  zero.tensors.at("head.value0.l1.b").fill(0.5f);
  TileSample s;
  s.channels = Tensor({13, 8, 8}, 0.2f);
  s.points = {point(1, 1, 77, 500, 30), point(6, 3, 12, 800, 10)};
  const LabelMap m = teacher_targets(zero, s, kVars);
  CHECK(m.target_of("agbd").at(1, 1) == 77.0f);
  CHECK(m.target_of("agbd").at(6, 3) == 12.0f);
  CHECK(m.target_of("agbd").at(0, 0) == doctest::Approx(50.0f));
  CHECK(m.target_of("ch").at(0, 0) == 0.0f);

  const NetworkParams net = build_network(c, 9);
  const LabelMap t = teacher_targets(net, s, kVars);
  const Prediction p = forward(net, s.channels);
  CHECK(t.target_of("cc").at(4, 4) == p.value_of("cc").at(4, 4));
  CHECK(t.target_of("cc").at(6, 3) == 10.0f);
}
