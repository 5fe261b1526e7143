// SPDX-License-Identifier: Apache-2.0
#include <canopy/sample.hpp>

#include <stdexcept>

namespace canopy {

std::string to_string(Pft pft)
{
  switch (pft) {
    case Pft::DBT:
      return "DBT";
    case Pft::EBT:
      return "EBT";
    case Pft::ENT:
      return "ENT";
    case Pft::GSW:
      return "GSW";
  }
  throw std::invalid_argument("unknown PFT code " + std::to_string(static_cast<int>(pft)));
}

Pft parse_pft(const std::string& s)
{
  for (Pft p : kAllPfts)
    if (to_string(p) == s)
      return p;
  throw std::invalid_argument("unknown PFT class '" + s + "'");
}

std::vector<std::string> rh_variable_names()
{
  std::vector<std::string> out;
  for (int q : kRhQuantiles)
    out.push_back("rh" + std::to_string(q));
  return out;
}

float PointLabel::value(const std::string& variable) const
{
  if (variable == "agbd")
    return agbd;
  if (variable == "ch")
    return rh.back();
  if (variable == "cc")
    return cc;
  if (variable.rfind("rh", 0) == 0) {
    const int q = std::stoi(variable.substr(2));
    for (std::size_t i = 0; i < kRhQuantiles.size(); ++i)
      if (kRhQuantiles[i] == q)
        return rh[i];
  }
  throw std::invalid_argument("unknown target variable '" + variable + "'");
}

std::vector<PointLabel> TileSample::quality_points() const
{
  std::vector<PointLabel> out;
  for (const auto& p : points)
    if (p.quality)
      out.push_back(p);
  return out;
}

} // namespace canopy
