// SPDX-License-Identifier: Apache-2.0
#include <canopy/bins.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

namespace canopy {

void BinSpec::validate() const
{
  if (!(size > 0.0) || !(high > low))
    throw std::invalid_argument("bin spec needs high > low and size > 0");
  const double n = (high - low) / size;
  if (std::abs(n - std::round(n)) > 1e-9 * std::max(1.0, n))
    throw std::invalid_argument("bin spec range is not a multiple of the bin size");
}

std::size_t BinSpec::count() const
{
  return static_cast<std::size_t>(std::llround((high - low) / size));
}

long BinSpec::index(double v) const
{
  if (!(v >= low) || !(v < high))
    return -1;
  const auto k = static_cast<long>(std::floor((v - low) / size));
  return std::min(k, static_cast<long>(count()) - 1);
}

std::size_t BinSpec::clamped_index(double v) const
{
  if (!(v > low))
    return 0;
  if (!(v < high))
    return count() - 1;
  return static_cast<std::size_t>(index(v));
}

BinSpec bin_spec_for(const std::string& variable)
{
  if (variable == "agbd")
    return {0.0, 500.0, 5.0};
  if (variable == "ch" || variable.rfind("rh", 0) == 0)
    return {0.0, 5000.0, 50.0};
  if (variable == "cc")
    return {0.0, 100.0, 1.0};
  throw std::invalid_argument("no bin spec for variable '" + variable + "'");
}

void to_json(nlohmann::json& j, const BinSpec& b)
{
  j = nlohmann::json{{"low", b.low}, {"high", b.high}, {"size", b.size}};
}

void from_json(const nlohmann::json& j, BinSpec& b)
{
  b.low = j.at("low").get<double>();
  b.high = j.at("high").get<double>();
  b.size = j.at("size").get<double>();
  b.validate();
}

} // namespace canopy
