// SPDX-License-Identifier: Apache-2.0
#include <canopy/eval.hpp>
#include <canopy/gedi.hpp>

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

using namespace canopy;

namespace {

EvalPair pair(double t, double p, Pft pft = Pft::DBT)
{
  EvalPair q;
  q.y_true = t;
  q.y_pred = p;
  q.pft = pft;
  return q;
}

std::vector<EvalPair> random_pairs(std::size_t n, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 300.0);
  std::normal_distribution<double> e(0.0, 20.0);
  std::vector<EvalPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = u(rng);
    out.push_back(pair(t, t + e(rng), static_cast<Pft>(i % 4)));
  }
  return out;
}

} // namespace

TEST_CASE("global metrics by hand")
{
  const std::vector<EvalPair> a{pair(1, 0), pair(1, 2)};
  const GlobalMetrics m = global_metrics(a);
  CHECK(m.me == 0.0);
  CHECK(m.mae == 1.0);
  CHECK(m.rmse == 1.0);
  CHECK(std::isnan(m.corr));

  const std::vector<EvalPair> perfect{pair(1, 1), pair(2, 2), pair(5, 5)};
  const GlobalMetrics p = global_metrics(perfect);
  CHECK(p.me == 0.0);
  CHECK(p.mae == 0.0);
  CHECK(p.rmse == 0.0);
  CHECK(p.r2 == 1.0);

  const std::vector<EvalPair> zeros{pair(0, 3), pair(10, 12)};
  const GlobalMetrics z = global_metrics(zeros);
  CHECK(z.mape_excluded == 1);
  CHECK(z.mape == doctest::Approx(20.0));
  CHECK_THROWS_AS(global_metrics(std::vector<EvalPair>{}), std::invalid_argument);
}

TEST_CASE("metric properties: offset, ordering, inequalities")
{
  auto v = random_pairs(500, 1);
  const GlobalMetrics base = global_metrics(v);
  CHECK(base.rmse >= base.mae);
  CHECK(base.mae >= std::abs(base.me));
  auto shifted = v;
  for (auto& q : shifted)
    q.y_pred += 7.0;
  const GlobalMetrics s = global_metrics(shifted);
  CHECK(s.me == doctest::Approx(base.me + 7.0));
  CHECK(s.corr == doctest::Approx(base.corr));
  std::shuffle(v.begin(), v.end(), std::mt19937_64(3));
  const GlobalMetrics perm = global_metrics(v);
  CHECK(perm.mae == doctest::Approx(base.mae).epsilon(1e-12));
  CHECK(perm.rmse == doctest::Approx(base.rmse).epsilon(1e-12));
}

TEST_CASE("binned profile quantiles and the half-open convention")
{
  const BinSpec spec{0, 10, 5};
  const std::vector<EvalPair> a{pair(1, 0), pair(2, 2), pair(3, 4), pair(5, 5)};
  const auto bins = binned_profile(a, spec, 2);
  REQUIRE(bins.size() == 2);
  CHECK(bins[0].count == 3);
  CHECK(bins[0].median_error == 0.0);
  CHECK(bins[0].q25 == -0.5);
  CHECK(bins[0].q75 == 0.5);
  CHECK(bins[0].median_abs_error == 1.0);
  CHECK_FALSE(bins[0].sparse);
  CHECK(bins[1].count == 1);
  CHECK(bins[1].sparse);
}

TEST_CASE("coverage: Gaussian errors with exact sigma give 68%")
{
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 500.0), s(1.0, 30.0);
  std::vector<EvalPair> v;
  for (int i = 0; i < 100000; ++i) {
    EvalPair q = pair(u(rng), 0.0);
    q.sigma = s(rng);
    q.y_pred = q.y_true + q.sigma * n01(rng);
    v.push_back(q);
  }
  const auto spec = bin_spec_for("agbd");
  const CoverageProfile c = coverage_profile(v, spec);
  CHECK(std::abs(c.global - 0.6827) < 0.01);
  CHECK(c.per_bin.size() == spec.count());
  auto half = v;
  for (auto& q : half)
    q.sigma *= 0.5;
  CHECK(coverage_profile(half, spec).global < c.global);
  auto wide = v;
  for (auto& q : wide)
    q.sigma *= 1e9;
  CHECK(coverage_profile(wide, spec).global == 1.0);
  v[3].sigma = 0.0;
  CHECK_THROWS_AS(coverage_profile(v, spec), std::invalid_argument);
}

TEST_CASE("PFT breakdown agrees with metrics on each class subset")
{
  const auto v = random_pairs(400, 2);
  const PftTable t = pft_breakdown({{"agbd", v}});
  CHECK(t.size() == 4);
  std::vector<EvalPair> ent;
  for (const auto& q : v)
    if (q.pft == Pft::ENT)
      ent.push_back(q);
  CHECK(t.at(Pft::ENT).at("agbd") == global_metrics(ent).rmse);
  const PftTable one = pft_breakdown({{"agbd", ent}, {"ch", ent}, {"cc", ent}});
  CHECK(one.size() == 1);
  CHECK(one.at(Pft::ENT).size() == 3);
  auto bad = v;
  bad[0].pft = static_cast<Pft>(9);
  CHECK_THROWS_AS(pft_breakdown({{"agbd", bad}}), std::invalid_argument);
}

TEST_CASE("uncertainty-ordered profile")
{
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 300.0), s(2.0, 60.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<EvalPair> v;
  for (int i = 0; i < 400; ++i) {
    EvalPair q = pair(u(rng), 0.0);
    q.se_true = s(rng);
    q.y_pred = q.y_true + q.se_true * n01(rng);
    q.sigma = q.se_true;
    v.push_back(q);
  }
  const OrderedProfile o = uncertainty_ordered_profile(v, 0.05, 1000);
  CHECK(std::is_sorted(o.y_true.begin(), o.y_true.end()));
  CHECK(o.rank_corr_abs_error_se > 0.5);
  const auto [lo, hi] = confidence_interval(o.y_true[10], o.se[10], 0.05, 1000);
  CHECK(o.ci_low[10] == lo);
  CHECK(o.ci_high[10] == hi);
}

TEST_CASE("rank and linear correlation")
{
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 1000}, c{2, 2, 1, 0};
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  CHECK(pearson(a, b) < 1.0);
  CHECK(spearman(a, c) == doctest::Approx(-0.9486833).epsilon(1e-6));
}

TEST_CASE("evaluate a network on synthetic tiles and write the report")
{
  NetworkConfig c;
  c.encoder_channels = {4, 6};
  c.decoder_feature_dim = 5;
  c.head_hidden_dims = {3, 1};
  const NetworkParams p = build_network(c, 3);
  const auto tiles = generate_dataset(5, 2, 64);
  const EvalReport r = evaluate(p, tiles, 1, 5);
  REQUIRE(r.variables.size() == 3);
  CHECK(r.variables[0].variable == "agbd");
  CHECK(r.variables[0].coverage.has_value());
  const auto dir = std::filesystem::temp_directory_path() / "canopy_eval_test";
  write_report(r, dir.string());
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
  CHECK(std::filesystem::exists(dir / "bins_agbd.csv"));
  std::filesystem::remove_all(dir);
}
