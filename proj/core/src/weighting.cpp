// SPDX-License-Identifier: Apache-2.0
#include <canopy/weighting.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <set>

namespace canopy {

namespace {

double gauss(double z)
{
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

double floor_pdf(const PdfTable& pdf, std::optional<double> floor_reference)
{
  if (floor_reference)
    if (const double p = pdf.at(*floor_reference); p > 0.0)
      return p;
  double lo = std::numeric_limits<double>::infinity();
  for (double p : pdf.pdf)
    if (p > 0.0)
      lo = std::min(lo, p);
  if (!std::isfinite(lo))
    throw std::invalid_argument("pdf table has no positive entries");
  return lo;
}

} // namespace

double quantile(std::vector<double> values, double q)
{
  if (values.empty())
    throw std::invalid_argument("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0))
    throw std::invalid_argument("quantile level must be in [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  if (i + 1 >= values.size())
    return values.back();
  return values[i] + frac * (values[i + 1] - values[i]);
}

double silverman_bandwidth(std::span<const double> values)
{
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values)
    mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values)
    var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (n - 1.0));
  std::vector<double> copy(values.begin(), values.end());
  const double iqr = quantile(copy, 0.75) - quantile(copy, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 0.9 * spread * std::pow(n, -0.2);
}

PdfTable fit_kde(std::span<const double> values, const BinSpec& spec, double bandwidth)
{
  spec.validate();
  std::set<double> distinct(values.begin(), values.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("fit_kde needs at least 2 distinct values, got " +
                                std::to_string(distinct.size()));
  PdfTable out;
  out.spec = spec;
  // Bandwidths below half a bin only reproduce the histogram noise.
  out.bandwidth = std::max(bandwidth > 0.0 ? bandwidth : silverman_bandwidth(values), 0.5 * spec.size);
  const std::size_t nb = spec.count();
  std::vector<double> counts(nb, 0.0);
  for (double v : values)
    counts[spec.clamped_index(v)] += 1.0;
  const double h = out.bandwidth;
  out.pdf.assign(nb, 0.0);
  for (std::size_t k = 0; k < nb; ++k) {
    const double ck = spec.center(k);
    double s = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      if (counts[b] == 0.0)
        continue;
      const double cb = spec.center(b);
      s += counts[b] * (gauss((ck - cb) / h) + gauss((ck + cb - 2.0 * spec.low) / h) +
                        gauss((ck + cb - 2.0 * spec.high) / h));
    }
    out.pdf[k] = s;
  }
  double mass = 0.0;
  for (double p : out.pdf)
    mass += p * spec.size;
  for (double& p : out.pdf)
    p /= mass;
  return out;
}

std::optional<double> floor_reference_for(const std::string& variable)
{
  if (variable == "agbd")
    return 300.0;
  if (variable == "ch" || variable.rfind("rh", 0) == 0)
    return 3000.0;
  return std::nullopt;
}

double WeightTable::lookup(double v) const
{
  if (has_floor() && v > floor_reference)
    v = floor_reference;
  return weights[spec.clamped_index(v)];
}

WeightTable inverse_pdf_weights(const PdfTable& pdf,
                                const std::string& variable,
                                std::optional<double> floor_reference,
                                std::span<const double> training_values)
{
  WeightTable t;
  t.variable = variable;
  t.spec = pdf.spec;
  if (floor_reference)
    t.floor_reference = *floor_reference;
  const double pf = floor_pdf(pdf, floor_reference);
  t.weights.resize(pdf.pdf.size());
  for (std::size_t k = 0; k < pdf.pdf.size(); ++k)
    t.weights[k] = 1.0 / std::max(pdf.pdf[k], pf);
  if (floor_reference) {
    const double wf = t.weights[pdf.spec.clamped_index(*floor_reference)];
    for (std::size_t k = pdf.spec.clamped_index(*floor_reference); k < t.weights.size(); ++k)
      t.weights[k] = wf;
  }
  if (!training_values.empty()) {
    double mean = 0.0;
    for (double v : training_values)
      mean += t.lookup(v);
    mean /= static_cast<double>(training_values.size());
    for (double& w : t.weights)
      w /= mean;
  }
  return t;
}

WeightTable fit_weight_table(const std::string& variable, std::span<const double> values)
{
  const PdfTable pdf = fit_kde(values, bin_spec_for(variable));
  return inverse_pdf_weights(pdf, variable, floor_reference_for(variable), values);
}

void to_json(nlohmann::json& j, const WeightTable& t)
{
  j = nlohmann::json{{"variable", t.variable}, {"bins", t.spec}, {"weights", t.weights}};
  j["floor_reference"] = t.has_floor() ? nlohmann::json(t.floor_reference) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, WeightTable& t)
{
  t.variable = j.at("variable").get<std::string>();
  t.spec = j.at("bins").get<BinSpec>();
  t.weights = j.at("weights").get<std::vector<double>>();
  const auto& f = j.at("floor_reference");
  t.floor_reference = f.is_null() ? std::numeric_limits<double>::quiet_NaN() : f.get<double>();
  if (t.weights.size() != t.spec.count())
    throw std::invalid_argument("weight table: " + std::to_string(t.weights.size()) +
                                " weights for " + std::to_string(t.spec.count()) + " bins");
  for (double w : t.weights)
    if (!(w > 0.0) || !std::isfinite(w))
      throw std::invalid_argument("weight table: weights must be positive and finite");
}

void save_weight_table(const WeightTable& t, const std::string& path)
{
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write weight table: " + path);
  os << nlohmann::json(t).dump(2) << '\n';
}

WeightTable load_weight_table(const std::string& path)
{
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open weight table: " + path);
  return nlohmann::json::parse(is).get<WeightTable>();
}

double uniformity_chi2(std::span<const double> counts)
{
  if (counts.empty())
    return 0.0;
  double mean = 0.0;
  for (double c : counts)
    mean += c;
  mean /= static_cast<double>(counts.size());
  if (mean == 0.0)
    return 0.0;
  double chi2 = 0.0;
  for (double c : counts)
    chi2 += (c - mean) * (c - mean) / mean;
  return chi2;
}

BalancedSubset balanced_subset(std::span<const double> tile_statistic,
                               std::size_t n_bins,
                               std::uint64_t seed,
                               double min_keep_fraction)
{
  BalancedSubset out;
  const std::size_t n = tile_statistic.size();
  if (n == 0)
    return out;
  if (n_bins == 0)
    throw std::invalid_argument("balanced_subset: n_bins must be positive");
  const auto [lo_it, hi_it] = std::minmax_element(tile_statistic.begin(), tile_statistic.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  std::vector<std::vector<std::size_t>> members(n_bins);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = 0;
    if (width > 0.0)
      k = std::min(n_bins - 1, static_cast<std::size_t>((tile_statistic[i] - lo) / width));
    members[k].push_back(i);
  }
  std::vector<double> before;
  std::size_t min_count = n, occupied = 0;
  for (const auto& m : members) {
    if (m.empty())
      continue;
    ++occupied;
    before.push_back(static_cast<double>(m.size()));
    min_count = std::min(min_count, m.size());
  }
  if (occupied < n_bins && width > 0.0)
    out.warning = std::to_string(n_bins - occupied) + " of " + std::to_string(n_bins) +
                  " statistic bins are empty; balancing over occupied bins only";
  const auto floor_cap = static_cast<std::size_t>(
    std::ceil(min_keep_fraction * static_cast<double>(n) / static_cast<double>(occupied)));
  const std::size_t cap = std::max(min_count, floor_cap);

  std::mt19937_64 rng(seed);
  std::vector<double> after;
  for (auto& m : members) {
    if (m.empty())
      continue;
    if (m.size() > cap) {
      std::shuffle(m.begin(), m.end(), rng);
      m.resize(cap);
    }
    after.push_back(static_cast<double>(m.size()));
    out.indices.insert(out.indices.end(), m.begin(), m.end());
  }
  std::sort(out.indices.begin(), out.indices.end());
  out.chi2_before = uniformity_chi2(before);
  out.chi2_after = uniformity_chi2(after);
  if (out.chi2_after > 0.0 && out.warning.empty())
    out.warning = "keep-fraction floor prevents exact uniformity";
  if (!out.warning.empty())
    std::clog << "balanced_subset: " << out.warning << '\n';
  return out;
}

std::vector<std::size_t> uniform_test_sample(std::span<const double> values,
                                             const PdfTable& pdf,
                                             std::optional<double> floor_reference,
                                             std::uint64_t seed)
{
  const double pf = floor_pdf(pdf, floor_reference);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double draw = u(rng);
    if (floor_reference && values[i] >= *floor_reference) {
      out.push_back(i);
      continue;
    }
    const double p = pf / std::max(pdf.at(values[i]), pf);
    if (draw < p)
      out.push_back(i);
  }
  return out;
}

} // namespace canopy
