// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/sample.hpp>

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace canopy {

enum class Transform
{
  Identity,
  Sqrt,
  Log
};

std::string to_string(Transform t);
Transform parse_transform(const std::string& s);

/// h(v). Rejects v < 0 for sqrt and v <= 0 for log (natural).
double apply_transform(Transform t, double v);
/// h^-1(z). Negative pre-images are clamped to 0 for identity and sqrt.
double inverse_transform(Transform t, double z);

/// Per-stratum regression of transformed AGBD on m predictors.
struct LinearModel
{
  int stratum = 0;
  std::vector<double> b;   ///< m coefficients
  Transform h = Transform::Identity;
  double bias = 0.0;
  double mse = 0.0;
  std::vector<double> cov; ///< m x m row-major covariance of b

  void validate() const;
};

/// h^-1(x.b + bias).
double predict_agbd(std::span<const double> x, const LinearModel& model);

/// sqrt(MSE + x cov x^T), in transformed units.
double standard_error(std::span<const double> x, const LinearModel& model);

/// Regularized incomplete beta I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double dof);
/// Quantile of Student's t, by bisection on the incomplete-beta CDF.
double student_t_quantile(double p, double dof);

/// agbd -/+ t(1 - alpha/2, n - 2) * se.
std::pair<double, double> confidence_interval(double agbd, double se, double alpha, int n);

/// exp(a + b ln(lcm) + re_site).
double allometric_agb(double lcm, double a, double b, double re_site);

/// Site-level power law linking the mean RH (LCM, metres) to reference biomass.
struct Allometry
{
  double a = 1.2;
  double b = 1.3;
  double re_sd = 0.2;
};

struct SynthConfig
{
  int passes = 4;
  int tracks_per_pass = 8;
  double track_spacing = 60.0;     ///< pixels
  double footprint_spacing = 6.0;  ///< pixels
  double quality_rate = 0.9;
  int min_points = 20;
  int scenes = 5;
  double cloud_fraction = 0.3;
  int max_attempts = 25;
  double ch_noise_cm = 100.0;
  double cc_noise = 4.0;
  double sar_noise = 0.05;
  double optical_noise = 0.01;
  Allometry allometry;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// GEDI-style stratum model for a PFT: sqrt(AGBD) regressed on [1, RH50, RH98] (metres).
LinearModel stratum_model(Pft pft);

/// Predictor row [1, RH50 m, RH98 m] for stratum_model.
std::vector<double> gedi_predictors(const std::array<float, 7>& rh_cm);

/// Along-track footprint centre in continuous pixel coordinates.
struct Footprint
{
  int pass = 0;
  int track = 0;
  int index = 0;
  double y = 0.0;
  double x = 0.0;
};

/// One pass: `tracks` parallel tracks `track_spacing` apart, footprints every
/// `footprint_spacing` along track, rotated by `angle` around (y0, x0). Only
/// centres inside [0,H) x [0,W) are returned.
std::vector<Footprint> pass_geometry(int pass,
                                     double y0,
                                     double x0,
                                     double angle,
                                     const SynthConfig& config,
                                     std::size_t height,
                                     std::size_t width);

/// Per-pixel median over the unmasked entries of a stack (masks: 1 = valid).
/// Pixels without any valid observation are 0 and flagged 1 in `gap`.
struct Composite
{
  Tensor value;
  Tensor gap;
};
Composite median_composite(const std::vector<Tensor>& stack, const std::vector<Tensor>& masks);

/// Mixes a master seed and a tile index into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Synthetic tile: smooth latent canopy fields, 13 input channels, and
/// GEDI-pattern footprints. Latent maps: "ch" (cm), "cc" (%), "agbd" (Mg/ha,
/// noise-free stratum model), "lcm" (m), "agb_site" (allometric reference),
/// "pft" (class code), "re_site" (constant).
TileSample generate_scene(std::uint64_t seed,
                          std::size_t height,
                          std::size_t width,
                          double lon,
                          double lat,
                          const SynthConfig& config = {});

/// Tiles 0..n-1 with seeds derive_seed(master, i) and pseudo-random geo.
std::vector<TileSample> generate_dataset(std::uint64_t master_seed,
                                         std::size_t n_tiles,
                                         std::size_t tile_size,
                                         const SynthConfig& config = {});

/// Splits a tile into parts x parts non-overlapping sub-tiles (row-major order).
std::vector<TileSample> split_tile(const TileSample& tile, std::size_t parts = 2);

/// Dataset file: magic, version, then per tile a JSON header, little-endian
/// float32 planes and a binary point table.
void save_dataset(const std::vector<TileSample>& tiles, const std::string& path);
std::vector<TileSample> load_dataset(const std::string& path);

} // namespace canopy
