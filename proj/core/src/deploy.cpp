// SPDX-License-Identifier: Apache-2.0
#include <canopy/binary_io.hpp>
#include <canopy/deploy.hpp>

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

namespace canopy {

void DeployGrid::validate(const NetworkConfig& network) const
{
  const std::size_t d = network.divisor();
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid deploy grid: " + what); };
  if (height == 0 || width == 0)
    fail("empty raster");
  if (tile_size == 0 || tile_size % d)
    fail("tile_size " + std::to_string(tile_size) + " must be a positive multiple of " + std::to_string(d));
  if (2 * pad >= tile_size)
    fail("pad " + std::to_string(pad) + " must be < tile_size/2");
  if (pad % d)
    fail("pad " + std::to_string(pad) + " must be a multiple of " + std::to_string(d));
  const auto r = static_cast<std::size_t>(network.receptive_radius());
  if (pad < r)
    fail("pad " + std::to_string(pad) + " is below the receptive radius " + std::to_string(r));
}

namespace {

struct Span
{
  long origin;
  std::size_t core0, core_len;
};

std::vector<Span> axis_spans(std::size_t extent, std::size_t tile, std::size_t pad)
{
  if (extent <= tile)
    return {{0, 0, extent}};
  const std::size_t core = tile - 2 * pad;
  std::vector<Span> out;
  for (std::size_t c0 = 0; c0 < extent; c0 += core)
    out.push_back({static_cast<long>(c0) - static_cast<long>(pad), c0, std::min(core, extent - c0)});
  return out;
}

} // namespace

std::vector<Window> DeployGrid::windows() const
{
  std::vector<Window> out;
  for (const Span& ys : axis_spans(height, tile_size, pad))
    for (const Span& xs : axis_spans(width, tile_size, pad))
      out.push_back({ys.origin, xs.origin, ys.core0, xs.core0, ys.core_len, xs.core_len});
  return out;
}

DeployOutput tiled_inference(const NetworkParams& params, const Raster& raster, DeployGrid grid,
                             unsigned threads)
{
  if (raster.channels.rank() != 3 || raster.channels.channels() != static_cast<std::size_t>(kInputChannels))
    throw std::invalid_argument("tiled_inference: raster must be [" + std::to_string(kInputChannels) +
                                ",H,W], got " + shape_string(raster.channels.shape()));
  grid.height = raster.height();
  grid.width = raster.width();
  grid.validate(params.config);
  const std::size_t h = grid.height, w = grid.width, t = grid.tile_size;
  if (!raster.gap.empty() && raster.gap.shape() != Shape{h, w})
    throw std::invalid_argument("tiled_inference: gap mask shape " + shape_string(raster.gap.shape()) +
                                " does not match the raster");

  const auto windows = grid.windows();
  std::vector<Prediction> results(windows.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < windows.size(); i = next++) {
      const Window& win = windows[i];
      Tensor patch({raster.channels.channels(), t, t});
      for (std::size_t c = 0; c < patch.channels(); ++c)
        for (std::size_t y = 0; y < t; ++y) {
          const long ry = win.y0 + static_cast<long>(y);
          if (ry < 0 || ry >= static_cast<long>(h))
            continue;
          for (std::size_t x = 0; x < t; ++x) {
            const long rx = win.x0 + static_cast<long>(x);
            if (rx >= 0 && rx < static_cast<long>(w))
              patch.at(c, y, x) = raster.channels.at(c, static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
          }
        }
      results[i] = forward(params, patch);
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(windows.size())));
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < n_threads; ++k)
    pool.emplace_back(worker);
  worker();
  for (auto& th : pool)
    th.join();

  DeployOutput out;
  out.prediction.names = results.front().names;
  for (std::size_t k = 0; k < results.front().value.size(); ++k)
    out.prediction.value.emplace_back(Shape{h, w});
  for (std::size_t k = 0; k < results.front().sigma.size(); ++k)
    out.prediction.sigma.emplace_back(Shape{h, w});
  auto paste = [&](Tensor& dst, const Tensor& src, const Window& win) {
    const auto oy = static_cast<std::size_t>(static_cast<long>(win.cy0) - win.y0);
    const auto ox = static_cast<std::size_t>(static_cast<long>(win.cx0) - win.x0);
    for (std::size_t y = 0; y < win.ch; ++y)
      for (std::size_t x = 0; x < win.cw; ++x)
        dst[(win.cy0 + y) * w + win.cx0 + x] = src[(oy + y) * t + ox + x];
  };
  for (std::size_t i = 0; i < windows.size(); ++i) {
    for (std::size_t k = 0; k < out.prediction.value.size(); ++k)
      paste(out.prediction.value[k], results[i].value[k], windows[i]);
    for (std::size_t k = 0; k < out.prediction.sigma.size(); ++k)
      paste(out.prediction.sigma[k], results[i].sigma[k], windows[i]);
  }
  out.gap_mask = raster.gap.empty() ? Tensor(Shape{h, w}) : raster.gap;
  return out;
}

Tensor forest_mask(const Tensor& ch_cm)
{
  Tensor m(ch_cm.shape());
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = ch_cm[i] > kForestHeightCm ? 1.0f : 0.0f;
  return m;
}

double mask_area_ha(const Tensor& mask, double pixel_area_ha)
{
  std::size_t n = 0;
  for (float v : mask.values())
    n += v > 0.5f;
  return static_cast<double>(n) * pixel_area_ha;
}

double co2_equivalent(double biomass)
{
  return biomass * kCarbonFraction * kCo2PerCarbon;
}

double ChangeReport::total_area_ha() const
{
  double s = 0.0;
  for (const auto& e : entries)
    s += e.loss_area_ha;
  return s;
}

double ChangeReport::total_biomass_mt() const
{
  double s = 0.0;
  for (const auto& e : entries)
    s += e.biomass_delta_mt;
  return s;
}

double ChangeReport::total_co2_mt() const
{
  return co2_equivalent(total_biomass_mt());
}

ChangeResult change_detection(const Tensor& cc_t1,
                              const Tensor& cc_t2,
                              const Tensor& forest_t1,
                              const Tensor& agbd_t1,
                              const Tensor& agbd_t2,
                              const std::string& period,
                              double pixel_area_ha)
{
  for (const Tensor* t : {&cc_t2, &forest_t1, &agbd_t1, &agbd_t2})
    if (t->shape() != cc_t1.shape())
      throw std::invalid_argument("change_detection: shape mismatch " + shape_string(cc_t1.shape()) +
                                  " vs " + shape_string(t->shape()));
  ChangeResult r;
  r.loss_mask = Tensor(cc_t1.shape());
  double biomass_mg = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cc_t1.size(); ++i)
    if (forest_t1[i] > 0.5f && cc_t1[i] - cc_t2[i] > kCoverLossThreshold) {
      r.loss_mask[i] = 1.0f;
      ++n;
      biomass_mg += (static_cast<double>(agbd_t1[i]) - agbd_t2[i]) * pixel_area_ha;
    }
  r.entry.period = period;
  r.entry.loss_area_ha = static_cast<double>(n) * pixel_area_ha;
  r.entry.biomass_delta_mt = biomass_mg * 1e-6;
  r.entry.co2_mt = co2_equivalent(r.entry.biomass_delta_mt);
  return r;
}

void to_json(nlohmann::json& j, const ChangeEntry& e)
{
  j = {{"period", e.period},
       {"loss_area_ha", e.loss_area_ha},
       {"biomass_delta_mt", e.biomass_delta_mt},
       {"co2_mt", e.co2_mt}};
}

void to_json(nlohmann::json& j, const ChangeReport& r)
{
  j = {{"entries", r.entries},
       {"loss_area_ha", r.total_area_ha()},
       {"biomass_delta_mt", r.total_biomass_mt()},
       {"co2_mt", r.total_co2_mt()},
       {"carbon_fraction", kCarbonFraction},
       {"co2_per_carbon", kCo2PerCarbon}};
}

void write_band(const std::string& stem, const Tensor& plane, const RasterMeta& meta)
{
  if (plane.shape() != Shape{meta.height, meta.width})
    throw std::invalid_argument("write_band: plane " + shape_string(plane.shape()) +
                                " does not match the sidecar extents");
  {
    std::ofstream os(stem + ".f32", std::ios::binary | std::ios::trunc);
    if (!os)
      throw std::runtime_error("cannot write raster " + stem + ".f32");
    io::write_f32s(os, plane.values());
  }
  nlohmann::json j{{"band", meta.band},
                   {"units", meta.units},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"height", meta.height},
                   {"width", meta.width},
                   {"lon", meta.lon},
                   {"lat", meta.lat},
                   {"pixel_size_m", meta.pixel_size_m},
                   {"mask", meta.mask}};
  std::ofstream os(stem + ".json", std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot write raster sidecar " + stem + ".json");
  os << j.dump(2) << '\n';
}

Tensor read_band(const std::string& stem, RasterMeta* meta)
{
  std::ifstream js(stem + ".json");
  if (!js)
    throw std::runtime_error("cannot open raster sidecar " + stem + ".json");
  const auto j = nlohmann::json::parse(js);
  RasterMeta m;
  m.band = j.at("band").get<std::string>();
  m.units = j.at("units").get<std::string>();
  m.height = j.at("height").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  m.lon = j.at("lon").get<double>();
  m.lat = j.at("lat").get<double>();
  m.pixel_size_m = j.at("pixel_size_m").get<double>();
  m.mask = j.value("mask", "");
  std::ifstream is(stem + ".f32", std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open raster " + stem + ".f32");
  Tensor t(Shape{m.height, m.width});
  io::read_f32s(is, t.values());
  if (meta)
    *meta = m;
  return t;
}

std::string units_of(const std::string& variable)
{
  if (variable == "agbd")
    return "Mg/ha";
  if (variable == "cc")
    return "percent";
  if (variable == "ch" || variable.rfind("rh", 0) == 0)
    return "cm";
  return "";
}

void write_deploy_output(const DeployOutput& out, const Raster& raster, const std::string& dir)
{
  std::filesystem::create_directories(dir);
  RasterMeta meta;
  meta.height = out.gap_mask.extent(0);
  meta.width = out.gap_mask.extent(1);
  meta.lon = raster.lon;
  meta.lat = raster.lat;
  meta.pixel_size_m = raster.pixel_size_m;
  meta.mask = "gap_mask";
  const auto base = std::filesystem::path(dir);
  const Prediction& p = out.prediction;
  for (std::size_t k = 0; k < p.value.size(); ++k) {
    meta.band = p.names[k];
    meta.units = units_of(p.names[k]);
    write_band((base / p.names[k]).string(), p.value[k], meta);
  }
  for (std::size_t k = 0; k < p.sigma.size(); ++k) {
    meta.band = p.names[k] + "_sigma";
    meta.units = units_of(p.names[k]);
    write_band((base / meta.band).string(), p.sigma[k], meta);
  }
  meta.band = "gap_mask";
  meta.units = "flag";
  meta.mask.clear();
  write_band((base / "gap_mask").string(), out.gap_mask, meta);
}

} // namespace canopy
