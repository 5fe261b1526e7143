// SPDX-License-Identifier: Apache-2.0
#include <canopy/weighting.hpp>

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <random>

using namespace canopy;

namespace {

std::vector<double> uniform_draws(std::size_t n, double lo, double hi, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v)
    x = u(rng);
  return v;
}

} // namespace

TEST_CASE("bin specs")
{
  const BinSpec a = bin_spec_for("agbd");
  CHECK(a.count() == 100);
  CHECK(a.index(5.0) == 1);
  CHECK(a.index(4.999) == 0);
  CHECK(a.index(500.0) == -1);
  CHECK(a.clamped_index(900.0) == 99);
  CHECK(bin_spec_for("ch").count() == 100);
  CHECK(bin_spec_for("rh70").size == 50.0);
  CHECK(bin_spec_for("cc").count() == 100);
  CHECK_THROWS_AS((BinSpec{0, 10, 3}.validate()), std::invalid_argument);
}

TEST_CASE("KDE of uniform draws is flat in the interior and normalized")
{
  const BinSpec spec{0, 100, 1};
  const PdfTable t = fit_kde(uniform_draws(200000, 0, 100, 1), spec);
  double mass = 0.0;
  for (double p : t.pdf)
    mass += p * spec.size;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  for (std::size_t k = 10; k < 90; ++k)
    CHECK(std::abs(t.pdf[k] - 0.01) < 0.05 * 0.01);
}

TEST_CASE("KDE of a point mass peaks at its bin")
{
  std::vector<double> v(50, 237.0);
  v.push_back(10.0);
  const PdfTable t = fit_kde(v, bin_spec_for("agbd"), 3.0);
  const auto peak = std::max_element(t.pdf.begin(), t.pdf.end()) - t.pdf.begin();
  CHECK(peak == 47);
  CHECK_THROWS_AS(fit_kde(std::vector<double>(10, 1.0), bin_spec_for("agbd")), std::invalid_argument);
}

TEST_CASE("Silverman bandwidth")
{
  // 0.9 min(sd, iqr/1.34) n^-1/5 on a fixed sample
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  double sd = 0;
  for (double x : v)
    sd += (x - 5.5) * (x - 5.5);
  sd = std::sqrt(sd / 9.0);
  const double iqr = 7.75 - 3.25;
  CHECK(silverman_bandwidth(v) == doctest::Approx(0.9 * std::min(sd, iqr / 1.34) * std::pow(10.0, -0.2)));
}

TEST_CASE("inverse-PDF weights")
{
  PdfTable flat;
  flat.spec = BinSpec{0, 10, 1};
  flat.pdf.assign(10, 0.1);
  const WeightTable w = inverse_pdf_weights(flat, "x", std::nullopt, uniform_draws(100, 0, 10, 2));
  for (double x : w.weights)
    CHECK(x == doctest::Approx(1.0));

  PdfTable halved = flat;
  halved.pdf[3] = 0.05;
  const WeightTable h = inverse_pdf_weights(halved, "x", std::nullopt);
  CHECK(h.weights[3] == doctest::Approx(2.0 * h.weights[2]));

  PdfTable decay;
  decay.spec = BinSpec{0, 10, 1};
  for (int k = 0; k < 10; ++k)
    decay.pdf.push_back(std::exp(-0.5 * k));
  const WeightTable f = inverse_pdf_weights(decay, "x", 6.0);
  for (std::size_t k = 6; k < 10; ++k)
    CHECK(f.weights[k] == f.weights[6]);
  for (std::size_t k = 0; k < 10; ++k)
    CHECK(f.weights[k] <= f.weights[6]);
  CHECK(f.lookup(9.5) == f.lookup(6.0));
  CHECK(f.lookup(2.5) == f.weights[2]);
}

TEST_CASE("weight tables round-trip through JSON")
{
  const WeightTable t = fit_weight_table("agbd", uniform_draws(1000, 0, 400, 3));
  const auto path = (std::filesystem::temp_directory_path() / "canopy_weights_test.json").string();
  save_weight_table(t, path);
  const WeightTable u = load_weight_table(path);
  CHECK(u.weights == t.weights);
  CHECK(u.floor_reference == 300.0);
  CHECK(u.spec.size == t.spec.size);
  std::filesystem::remove(path);
  CHECK_FALSE(fit_weight_table("cc", uniform_draws(100, 0, 100, 4)).has_floor());
}

TEST_CASE("quantile uses linear interpolation")
{
  CHECK(quantile({-1, 0, 1}, 0.25) == -0.5);
  CHECK(quantile({4, 1, 3, 2}, 0.5) == 2.5);
  CHECK(quantile({7}, 0.9) == 7.0);
}

TEST_CASE("balanced subsets")
{
  const auto flat = uniform_draws(400, 0, 100, 5);
  const BalancedSubset keep = balanced_subset(flat, 8, 1, 0.0);
  CHECK(keep.indices.size() > 300);

  const std::vector<double> same(30, 4.2);
  CHECK(balanced_subset(same, 8, 1).indices.size() == 30);

  std::vector<double> clusters;
  for (double v : uniform_draws(300, 0, 10, 6))
    clusters.push_back(v);
  for (double v : uniform_draws(30, 90, 100, 7))
    clusters.push_back(v);
  for (double v : uniform_draws(60, 0, 100, 8))
    clusters.push_back(v);
  const BalancedSubset b = balanced_subset(clusters, 8, 3, 0.0);
  CHECK(b.chi2_after < b.chi2_before);
  CHECK(std::is_sorted(b.indices.begin(), b.indices.end()));
  CHECK(balanced_subset(clusters, 8, 3, 0.0).indices == b.indices);
}

TEST_CASE("uniform test sample: flat input, decreasing input and the floor")
{
  const BinSpec spec{0, 500, 5};
  const auto flat = uniform_draws(20000, 0, 500, 9);
  const PdfTable pf = fit_kde(flat, spec);
  const auto kept = uniform_test_sample(flat, pf, 300.0, 1);
  CHECK(kept.size() > 15000);

  // Exponential draws: histogram of the accepted values is flat up to the floor.
  std::mt19937_64 rng(10);
  std::exponential_distribution<double> e(1.0 / 80.0);
  std::vector<double> v;
  while (v.size() < 200000)
    if (const double x = e(rng); x < 500.0)
      v.push_back(x);
  const PdfTable pe = fit_kde(v, spec);
  const auto idx = uniform_test_sample(v, pe, 300.0, 2);
  std::vector<double> hist(6, 0.0);
  for (std::size_t i : idx) {
    if (v[i] >= 300.0)
      continue;
    hist[static_cast<std::size_t>(v[i] / 50.0)] += 1.0;
  }
  const double mean = std::accumulate(hist.begin(), hist.end(), 0.0) / 6.0;
  for (double h : hist)
    CHECK(std::abs(h - mean) < 0.1 * mean);
  std::size_t above = 0, above_kept = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    above += v[i] >= 300.0;
  for (std::size_t i : idx)
    above_kept += v[i] >= 300.0;
  CHECK(above_kept == above);
  CHECK(uniform_test_sample(v, pe, 300.0, 2) == idx);
}
