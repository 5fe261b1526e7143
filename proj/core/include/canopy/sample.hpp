// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/tensor.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace canopy {

/// Plant functional type of a footprint.
enum class Pft : std::uint8_t
{
  DBT,
  EBT,
  ENT,
  GSW
};

inline constexpr std::array<Pft, 4> kAllPfts{Pft::DBT, Pft::EBT, Pft::ENT, Pft::GSW};

std::string to_string(Pft pft);
Pft parse_pft(const std::string& s);

/// Relative-height quantiles stored per footprint. RH98 doubles as canopy height.
inline constexpr std::array<int, 7> kRhQuantiles{40, 50, 60, 70, 80, 90, 98};

/// Names of the RH variables ("rh40" ... "rh98"), in quantile order.
std::vector<std::string> rh_variable_names();

/// One footprint rasterized to a single pixel. Heights in cm, AGBD and SE in Mg/ha.
struct PointLabel
{
  int row = 0;
  int col = 0;
  float agbd = 0.0f;
  std::array<float, 7> rh{};
  float cc = 0.0f;
  float se = 0.0f;
  Pft pft = Pft::DBT;
  bool quality = true;

  /// Value of a named target: "agbd", "ch" (= RH98), "cc" or "rh<q>".
  float value(const std::string& variable) const;
};

/// One training/evaluation tile. Channels 0-5 optical/thermal, 6-7 radar,
/// 8-10 altitude/aspect/slope, 11-12 encoded lon/lat.
struct TileSample
{
  Tensor channels;
  std::vector<PointLabel> points;
  double lon = 0.0;
  double lat = 0.0;
  std::uint64_t seed = 0;
  /// [H,W] composite gap mask (1 = no valid observation); may be empty.
  Tensor gap;
  /// Hidden generator fields ([H,W] maps keyed by name); empty for real data.
  std::map<std::string, Tensor> latent;

  std::size_t height() const { return channels.height(); }
  std::size_t width() const { return channels.width(); }
  /// Points with quality = true.
  std::vector<PointLabel> quality_points() const;
};

inline constexpr int kInputChannels = 13;
inline constexpr int kSpectralBands = 6;

} // namespace canopy
