// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json_fwd.hpp>

#include <cstddef>
#include <string>

namespace canopy {

/// Equal-width half-open bins [low + k*size, low + (k+1)*size).
struct BinSpec
{
  double low = 0.0;
  double high = 1.0;
  double size = 1.0;

  void validate() const;
  std::size_t count() const;
  /// Bin of v, or -1 when v lies outside [low, high).
  long index(double v) const;
  /// Bin of v with out-of-range values clamped to the first/last bin.
  std::size_t clamped_index(double v) const;
  double edge(std::size_t k) const { return low + static_cast<double>(k) * size; }
  double center(std::size_t k) const { return edge(k) + 0.5 * size; }
};

/// Evaluation bins per variable: AGBD (0,500,5) Mg/ha, CH and RH (0,5000,50) cm,
/// CC (0,100,1) %.
BinSpec bin_spec_for(const std::string& variable);

void to_json(nlohmann::json& j, const BinSpec& b);
void from_json(const nlohmann::json& j, BinSpec& b);

} // namespace canopy
