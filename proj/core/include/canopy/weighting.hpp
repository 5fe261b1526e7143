// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/bins.hpp>

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canopy {

/// Gaussian KDE of a binned value distribution, evaluated at bin centres.
struct PdfTable
{
  BinSpec spec;
  double bandwidth = 0.0;
  std::vector<double> pdf;

  double at(double v) const { return pdf[spec.clamped_index(v)]; }
};

/// Silverman's rule: 0.9 * min(sd, IQR/1.34) * n^(-1/5).
double silverman_bandwidth(std::span<const double> values);

/// Binned KDE with reflection at both range ends; bandwidth <= 0 selects
/// Silverman's rule. The result integrates to 1 over the bin range.
PdfTable fit_kde(std::span<const double> values, const BinSpec& spec, double bandwidth = 0.0);

/// Default probability floor per variable: 300 Mg/ha AGBD, 3000 cm CH/RH, none for CC.
std::optional<double> floor_reference_for(const std::string& variable);

/// Inverse-PDF lookup table. Values at or above the floor reference share its
/// weight; no value weighs more than the floor.
struct WeightTable
{
  std::string variable;
  BinSpec spec;
  std::vector<double> weights;
  double floor_reference = std::numeric_limits<double>::quiet_NaN();

  bool has_floor() const { return floor_reference == floor_reference; }
  double lookup(double v) const;
};

/// weight = 1 / max(pdf, pdf_floor), normalized to mean 1 over `training_values`
/// (no normalization when that span is empty). Without a floor reference the
/// smallest positive pdf acts as floor.
WeightTable inverse_pdf_weights(const PdfTable& pdf,
                                const std::string& variable,
                                std::optional<double> floor_reference,
                                std::span<const double> training_values = {});

/// Convenience: fit_kde + inverse_pdf_weights with the per-variable defaults.
WeightTable fit_weight_table(const std::string& variable, std::span<const double> values);

void to_json(nlohmann::json& j, const WeightTable& t);
void from_json(const nlohmann::json& j, WeightTable& t);
void save_weight_table(const WeightTable& t, const std::string& path);
WeightTable load_weight_table(const std::string& path);

struct BalancedSubset
{
  std::vector<std::size_t> indices; ///< kept tiles, ascending
  double chi2_before = 0.0;
  double chi2_after = 0.0;
  std::string warning; ///< non-empty when perfect uniformity was not reachable
};

/// Linear-interpolation quantile of unsorted values, q in [0,1].
double quantile(std::vector<double> values, double q);

/// Keeps a subset of tiles whose per-tile statistic (e.g. the 75th percentile
/// of its point values) has a histogram as uniform as possible over the
/// occupied bins of `n_bins` equal bins spanning the statistic's range.
/// Each bin keeps at most max(min occupied count, ceil(min_keep_fraction * N / occupied))
/// tiles, chosen at random under `seed`.
BalancedSubset balanced_subset(std::span<const double> tile_statistic,
                               std::size_t n_bins,
                               std::uint64_t seed,
                               double min_keep_fraction = 0.0);

/// Chi-square statistic of counts against their mean (uniform expectation).
double uniformity_chi2(std::span<const double> counts);

/// Accepts value i with probability p_floor / max(pdf(v_i), p_floor) where
/// p_floor is the pdf at the floor reference (or the smallest positive pdf).
/// Values at or above the floor reference are always accepted.
std::vector<std::size_t> uniform_test_sample(std::span<const double> values,
                                             const PdfTable& pdf,
                                             std::optional<double> floor_reference,
                                             std::uint64_t seed);

} // namespace canopy
