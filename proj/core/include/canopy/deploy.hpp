// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/model.hpp>
#include <canopy/sample.hpp>

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace canopy {

/// Carbon fraction of dry biomass and the CO2/C molar mass ratio.
inline constexpr double kCarbonFraction = 0.47;
inline constexpr double kCo2PerCarbon = 44.0 / 12.0;
/// Area of one 10 m pixel in hectares.
inline constexpr double kPixelAreaHa = 0.01;
/// Forest threshold on canopy height, cm.
inline constexpr float kForestHeightCm = 500.0f;
/// Canopy cover drop (percentage points) that counts as loss.
inline constexpr float kCoverLossThreshold = 20.0f;

/// Input scene for deployment.
struct Raster
{
  Tensor channels; ///< [13,H,W]
  Tensor gap;      ///< [H,W], 1 = composite gap; may be empty
  double lon = 0.0;
  double lat = 0.0;
  double pixel_size_m = 10.0;

  std::size_t height() const { return channels.height(); }
  std::size_t width() const { return channels.width(); }
};

struct Window
{
  long y0, x0;            ///< window origin in raster coordinates (may be negative)
  std::size_t cy0, cx0;   ///< core origin in raster coordinates
  std::size_t ch, cw;     ///< core extent clipped to the raster
};

/// Overlapping tiles of `tile_size` whose cores (tile_size - 2 pad) tile the raster.
struct DeployGrid
{
  std::size_t tile_size = 128;
  std::size_t pad = 32;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t core() const { return tile_size - 2 * pad; }
  /// Throws std::invalid_argument on a bad geometry for `network`.
  void validate(const NetworkConfig& network) const;
  std::vector<Window> windows() const;
};

struct DeployOutput
{
  Prediction prediction;
  Tensor gap_mask; ///< [H,W]; 1 where the input composite had a gap
};

/// Per-window forward passes; padded borders are discarded and cores stitched.
/// Windows reaching past the raster edge read zeros there.
DeployOutput tiled_inference(const NetworkParams& params, const Raster& raster, DeployGrid grid,
                             unsigned threads = 1);

/// 1 where CH > 500 cm.
Tensor forest_mask(const Tensor& ch_cm);
double mask_area_ha(const Tensor& mask, double pixel_area_ha = kPixelAreaHa);

struct ChangeEntry
{
  std::string period;
  double loss_area_ha = 0.0;
  double biomass_delta_mt = 0.0;
  double co2_mt = 0.0;
};

struct ChangeReport
{
  std::vector<ChangeEntry> entries;

  double total_area_ha() const;
  double total_biomass_mt() const;
  double total_co2_mt() const;
};

double co2_equivalent(double biomass);

struct ChangeResult
{
  Tensor loss_mask;
  ChangeEntry entry;
};

/// loss = forest_t1 & (cc_t1 - cc_t2 > 20); biomass delta = sum over the loss
/// mask of (agbd_t1 - agbd_t2) * pixel area, in Mt.
ChangeResult change_detection(const Tensor& cc_t1,
                              const Tensor& cc_t2,
                              const Tensor& forest_t1,
                              const Tensor& agbd_t1,
                              const Tensor& agbd_t2,
                              const std::string& period = "t1-t2",
                              double pixel_area_ha = kPixelAreaHa);

void to_json(nlohmann::json& j, const ChangeEntry& e);
void to_json(nlohmann::json& j, const ChangeReport& r);

/// Single-band little-endian float32 plane `<stem>.f32` with sidecar `<stem>.json`.
struct RasterMeta
{
  std::string band;
  std::string units;
  std::size_t height = 0;
  std::size_t width = 0;
  double lon = 0.0;
  double lat = 0.0;
  double pixel_size_m = 10.0;
  std::string mask; ///< stem of the band holding the validity mask, if any
};

void write_band(const std::string& stem, const Tensor& plane, const RasterMeta& meta);
Tensor read_band(const std::string& stem, RasterMeta* meta = nullptr);

/// Writes one band per value head, one `<name>_sigma` per sigma head and a
/// `gap_mask` band into `dir`.
void write_deploy_output(const DeployOutput& out, const Raster& raster, const std::string& dir);

std::string units_of(const std::string& variable);

} // namespace canopy
