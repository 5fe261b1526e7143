// SPDX-License-Identifier: Apache-2.0
#include <canopy/deploy.hpp>
#include <canopy/gedi.hpp>

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <random>

using namespace canopy;

namespace {

Raster random_raster(std::size_t h, std::size_t w, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Raster r;
  r.channels = Tensor({13, h, w});
  for (auto& v : r.channels.values())
    v = u(rng);
  return r;
}

double interior_max_diff(const Tensor& a, const Tensor& b, std::size_t margin)
{
  double m = 0.0;
  for (std::size_t y = margin; y + margin < a.extent(0); ++y)
    for (std::size_t x = margin; x + margin < a.extent(1); ++x)
      m = std::max(m, static_cast<double>(std::abs(a.at(y, x) - b.at(y, x))));
  return m;
}

} // namespace

TEST_CASE("grid geometry and validation")
{
  const NetworkConfig c;
  DeployGrid g{96, 32, 100, 70};
  CHECK_NOTHROW(g.validate(c));
  const auto w = g.windows();
  CHECK(w.size() == 4); // 4 cores of 32 rows; 70 columns fit one tile
  std::vector<int> hits(100 * 70, 0);
  for (const auto& win : w)
    for (std::size_t y = 0; y < win.ch; ++y)
      for (std::size_t x = 0; x < win.cw; ++x)
        ++hits[(win.cy0 + y) * 70 + win.cx0 + x];
  for (int h : hits)
    CHECK(h == 1);
  CHECK_THROWS_WITH_AS((DeployGrid{96, 16, 100, 70}.validate(c)), doctest::Contains("receptive radius"),
                       std::invalid_argument);
  CHECK_THROWS_AS((DeployGrid{64, 32, 100, 70}.validate(c)), std::invalid_argument);
  CHECK_THROWS_AS((DeployGrid{98, 32, 100, 70}.validate(c)), std::invalid_argument);
}

TEST_CASE("tiled inference equals whole-image inference away from the raster edge")
{
  const NetworkParams p = build_network(NetworkConfig{}, 5);
  const Raster r = random_raster(128, 128, 1);
  const Prediction whole = forward(p, r.channels);
  const auto margin = static_cast<std::size_t>(p.config.receptive_radius());
  for (const auto& [tile, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{80, 32}, {96, 32}, {112, 40}}) {
    const DeployOutput out = tiled_inference(p, r, DeployGrid{tile, pad}, 2);
    for (std::size_t k = 0; k < whole.value.size(); ++k)
      CHECK(interior_max_diff(whole.value[k], out.prediction.value[k], margin) < 1e-4);
    for (std::size_t k = 0; k < whole.sigma.size(); ++k)
      CHECK(interior_max_diff(whole.sigma[k], out.prediction.sigma[k], margin) < 1e-4);
  }
}

TEST_CASE("small rasters take one padded pass; gap mask is propagated")
{
  const NetworkParams p = build_network(NetworkConfig{}, 5);
  Raster r = random_raster(40, 56, 2);
  r.gap = Tensor({40, 56});
  r.gap.at(3, 4) = 1.0f;
  const DeployGrid g{96, 32};
  DeployGrid sized = g;
  sized.height = 40;
  sized.width = 56;
  CHECK(sized.windows().size() == 1);
  const DeployOutput out = tiled_inference(p, r, g);
  CHECK(out.prediction.value[0].shape() == Shape{40, 56});
  CHECK(out.gap_mask.at(3, 4) == 1.0f);
  CHECK(out.gap_mask.at(0, 0) == 0.0f);
  CHECK_THROWS_AS(tiled_inference(p, Raster{Tensor({12, 40, 40})}, g), std::invalid_argument);
}

TEST_CASE("constant input gives a constant interior")
{
  const NetworkParams p = build_network(NetworkConfig{}, 8);
  Raster r;
  r.channels = Tensor({13, 160, 160}, 0.4f);
  const DeployOutput out = tiled_inference(p, r, DeployGrid{96, 32});
  const Tensor& v = out.prediction.value[1];
  const float ref = v.at(80, 80);
  for (std::size_t y = 40; y < 120; ++y)
    for (std::size_t x = 40; x < 120; ++x)
      CHECK(std::abs(v.at(y, x) - ref) < 1e-3f * std::max(1.0f, std::abs(ref)));
}

TEST_CASE("forest mask and area")
{
  const Tensor ch({1, 4}, {499, 501, 0, 2000});
  const Tensor m = forest_mask(ch);
  CHECK(m == Tensor({1, 4}, {0, 1, 0, 1}));
  CHECK(mask_area_ha(m) == doctest::Approx(0.02));
  CHECK(mask_area_ha(forest_mask(Tensor({3, 3}))) == 0.0);
}

TEST_CASE("change detection on a constructed clear-cut")
{
  const std::size_t n = 50;
  Tensor cc1({n, n}, 80.0f), cc2({n, n}, 78.0f), ch({n, n}, 1500.0f);
  Tensor agb1({n, n}, 200.0f), agb2({n, n}, 195.0f);
  // 12 x 7 clear-cut, two of its pixels outside the forest
  for (std::size_t y = 10; y < 22; ++y)
    for (std::size_t x = 30; x < 37; ++x) {
      cc2.at(y, x) = 5.0f;
      agb2.at(y, x) = 20.0f;
    }
  ch.at(10, 30) = 300.0f;
  ch.at(21, 36) = 300.0f;
  const Tensor forest = forest_mask(ch);
  const ChangeResult r = change_detection(cc1, cc2, forest, agb1, agb2, "2019-2020");
  const double pixels = 12 * 7 - 2;
  CHECK(r.entry.loss_area_ha == doctest::Approx(pixels * 0.01));
  CHECK(r.entry.biomass_delta_mt == doctest::Approx(pixels * 0.01 * 180.0 * 1e-6));
  CHECK(r.entry.co2_mt / r.entry.biomass_delta_mt == doctest::Approx(1.7233).epsilon(1e-4));
  CHECK(mask_area_ha(r.loss_mask) == doctest::Approx(r.entry.loss_area_ha));

  const ChangeResult same = change_detection(cc1, cc1, forest, agb1, agb1);
  CHECK(same.entry.loss_area_ha == 0.0);
  const ChangeResult swapped = change_detection(cc2, cc1, forest, agb2, agb1);
  CHECK(swapped.entry.loss_area_ha == 0.0);
  CHECK_THROWS_AS(change_detection(cc1, Tensor({n, n + 1}), forest, agb1, agb2), std::invalid_argument);

  ChangeReport rep;
  rep.entries = {r.entry, r.entry};
  const nlohmann::json j = rep;
  CHECK(j.contains("loss_area_ha"));
  CHECK(j.contains("biomass_delta_mt"));
  CHECK(j.contains("co2_mt"));
  CHECK(j["co2_mt"].get<double>() == doctest::Approx(2.0 * r.entry.co2_mt));
}

TEST_CASE("CO2 conversion ratio")
{
  CHECK(co2_equivalent(14.9) == doctest::Approx(25.66).epsilon(0.01));
  CHECK(co2_equivalent(1.0) == doctest::Approx(0.47 * 44.0 / 12.0));
}

TEST_CASE("band files round-trip with their sidecar")
{
  const auto dir = std::filesystem::temp_directory_path() / "canopy_band_test";
  std::filesystem::create_directories(dir);
  Tensor t({3, 2}, {1, 2, 3, 4, 5, -6.5});
  RasterMeta m;
  m.band = "agbd";
  m.units = "Mg/ha";
  m.height = 3;
  m.width = 2;
  m.lon = 12.5;
  write_band((dir / "agbd").string(), t, m);
  CHECK(std::filesystem::file_size(dir / "agbd.f32") == 24);
  RasterMeta back;
  CHECK(read_band((dir / "agbd").string(), &back) == t);
  CHECK(back.lon == 12.5);
  CHECK(back.units == "Mg/ha");
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_band((dir / "agbd").string()), std::runtime_error);
}
