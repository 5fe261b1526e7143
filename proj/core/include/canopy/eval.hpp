// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/bins.hpp>
#include <canopy/model.hpp>
#include <canopy/sample.hpp>

#include <nlohmann/json_fwd.hpp>

#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canopy {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct EvalPair
{
  double y_true = 0.0;
  double y_pred = 0.0;
  double sigma = kNaN;   ///< predicted uncertainty, NaN when absent
  double se_true = kNaN; ///< reference standard error, NaN when absent
  Pft pft = Pft::DBT;

  bool has_sigma() const { return sigma == sigma; }
  bool has_se() const { return se_true == se_true; }
};

struct GlobalMetrics
{
  std::size_t n = 0;
  double corr = kNaN; ///< Pearson; NaN when either side has zero variance
  double me = 0.0;    ///< mean(pred - true)
  double mae = 0.0;
  double mape = kNaN; ///< percent, over y_true != 0 only
  std::size_t mape_excluded = 0;
  double rmse = 0.0;
  double r2 = kNaN;
};

GlobalMetrics global_metrics(std::span<const EvalPair> pairs);

/// Error statistics of one [low, high) bin of y_true. Quantiles interpolate
/// linearly between order statistics.
struct BinStats
{
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
  bool sparse = true; ///< count < min_count
  double median_error = kNaN;
  double median_abs_error = kNaN;
  double q25 = kNaN, q75 = kNaN; ///< error quartiles
  double q05 = kNaN, q95 = kNaN; ///< 90% range of the error
};

std::vector<BinStats> binned_profile(std::span<const EvalPair> pairs,
                                     const BinSpec& spec,
                                     std::size_t min_count = 50);

struct CoverageProfile
{
  double global = kNaN; ///< fraction with |y_true - y_pred| / sigma < 1
  std::size_t n = 0;
  std::vector<double> per_bin; ///< NaN for empty bins
  std::vector<std::size_t> counts;
};

CoverageProfile coverage_profile(std::span<const EvalPair> pairs, const BinSpec& spec);

/// RMSE per plant functional type and variable; classes without pairs are omitted.
using PftTable = std::map<Pft, std::map<std::string, double>>;
PftTable pft_breakdown(const std::map<std::string, std::vector<EvalPair>>& pairs_by_variable);

struct OrderedProfile
{
  std::vector<double> y_true, y_pred, sigma, se, ci_low, ci_high;
  double rank_corr_abs_error_se = kNaN;
};

/// Pairs sorted by y_true (stable), with confidence intervals y_true -/+ t * SE
/// for n_model training samples at level alpha.
OrderedProfile uncertainty_ordered_profile(std::span<const EvalPair> pairs,
                                           double alpha = 0.05,
                                           int n_model = 1000);

double pearson(std::span<const double> a, std::span<const double> b);
/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

/// Prediction/label pairs at the quality footprints of `tiles`.
std::vector<EvalPair> collect_pairs(const std::vector<Prediction>& predictions,
                                    const std::vector<TileSample>& tiles,
                                    const std::string& variable);

std::vector<Prediction> predict_tiles(const NetworkParams& params, const std::vector<TileSample>& tiles);

/// Mean over `variables` of MAE / head scale on points drawn by
/// uniform_test_sample from the validation footprints.
double uniform_validation_mae(const std::vector<Prediction>& predictions,
                              const std::vector<TileSample>& tiles,
                              const NetworkConfig& config,
                              const std::vector<std::string>& variables,
                              std::uint64_t seed);

struct VariableReport
{
  std::string variable;
  GlobalMetrics global;
  GlobalMetrics uniform; ///< on the uniform test sample
  std::vector<BinStats> bins;
  std::optional<CoverageProfile> coverage;
};

struct EvalReport
{
  std::vector<VariableReport> variables;
  PftTable pft_rmse;
  std::optional<OrderedProfile> agbd_ordered;
};

EvalReport evaluate(const NetworkParams& params,
                    const std::vector<TileSample>& tiles,
                    std::uint64_t seed,
                    std::size_t min_count = 50);

void to_json(nlohmann::json& j, const GlobalMetrics& m);
void to_json(nlohmann::json& j, const EvalReport& r);
/// Writes <dir>/report.json, <dir>/metrics.csv and <dir>/bins_<variable>.csv.
void write_report(const EvalReport& report, const std::string& dir);

} // namespace canopy
