// SPDX-License-Identifier: Apache-2.0
#include <canopy/gedi.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace canopy {

std::string to_string(Transform t)
{
  switch (t) {
    case Transform::Identity:
      return "identity";
    case Transform::Sqrt:
      return "sqrt";
    case Transform::Log:
      return "log";
  }
  return "?";
}

Transform parse_transform(const std::string& s)
{
  if (s == "identity")
    return Transform::Identity;
  if (s == "sqrt")
    return Transform::Sqrt;
  if (s == "log")
    return Transform::Log;
  throw std::invalid_argument("unknown transform '" + s + "'");
}

double apply_transform(Transform t, double v)
{
  switch (t) {
    case Transform::Identity:
      return v;
    case Transform::Sqrt:
      if (v < 0.0)
        throw std::invalid_argument("sqrt transform of negative value " + std::to_string(v));
      return std::sqrt(v);
    case Transform::Log:
      if (!(v > 0.0))
        throw std::invalid_argument("log transform of non-positive value " + std::to_string(v));
      return std::log(v);
  }
  return v;
}

double inverse_transform(Transform t, double z)
{
  switch (t) {
    case Transform::Identity:
      return std::max(z, 0.0);
    case Transform::Sqrt:
      return z > 0.0 ? z * z : 0.0;
    case Transform::Log:
      return std::exp(z);
  }
  return z;
}

void LinearModel::validate() const
{
  const std::size_t m = b.size();
  if (m == 0)
    throw std::invalid_argument("linear model has no coefficients");
  if (cov.size() != m * m)
    throw std::invalid_argument("linear model covariance must be " + std::to_string(m) + "x" +
                                std::to_string(m));
  if (!(mse >= 0.0))
    throw std::invalid_argument("linear model MSE must be non-negative");
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (cov[i * m + j] != cov[j * m + i])
        throw std::invalid_argument("linear model covariance is not symmetric");
}

double predict_agbd(std::span<const double> x, const LinearModel& model)
{
  if (x.size() != model.b.size())
    throw std::invalid_argument("predict_agbd: " + std::to_string(x.size()) + " predictors for " +
                                std::to_string(model.b.size()) + " coefficients");
  double z = model.bias;
  for (std::size_t i = 0; i < x.size(); ++i)
    z += x[i] * model.b[i];
  return inverse_transform(model.h, z);
}

double standard_error(std::span<const double> x, const LinearModel& model)
{
  const std::size_t m = model.b.size();
  if (x.size() != m || model.cov.size() != m * m)
    throw std::invalid_argument("standard_error: predictor length " + std::to_string(x.size()) +
                                " does not match the model");
  double q = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      q += x[i] * model.cov[i * m + j] * x[j];
  const double r = model.mse + q;
  if (r < -1e-12 * std::max(1.0, model.mse))
    throw std::logic_error("standard_error: negative radicand, covariance is not PSD");
  return std::sqrt(std::max(r, 0.0));
}

namespace {

// Continued fraction for I_x(a,b) (modified Lentz).
double beta_cf(double a, double b, double x)
{
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny)
    d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny)
      d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny)
      c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny)
      d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny)
      c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps)
      return h;
  }
  throw std::runtime_error("incomplete beta continued fraction did not converge");
}

} // namespace

double regularized_incomplete_beta(double a, double b, double x)
{
  if (!(a > 0.0) || !(b > 0.0))
    throw std::invalid_argument("incomplete beta needs a, b > 0");
  if (x <= 0.0)
    return 0.0;
  if (x >= 1.0)
    return 1.0;
  const double ln_front =
    std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof)
{
  if (!(dof > 0.0))
    throw std::invalid_argument("student t needs positive degrees of freedom");
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * regularized_incomplete_beta(0.5 * dof, 0.5, x);
  return t > 0.0 ? 1.0 - tail : tail;
}

double student_t_quantile(double p, double dof)
{
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("student t quantile needs 0 < p < 1");
  if (p == 0.5)
    return 0.0;
  double lo = -1.0, hi = 1.0;
  while (student_t_cdf(lo, dof) > p)
    lo *= 2.0;
  while (student_t_cdf(hi, dof) < p)
    hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, dof) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::pair<double, double> confidence_interval(double agbd, double se, double alpha, int n)
{
  if (n <= 2)
    throw std::invalid_argument("confidence_interval needs n > 2, got " + std::to_string(n));
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("confidence_interval needs 0 < alpha < 1");
  if (se < 0.0)
    throw std::invalid_argument("confidence_interval needs se >= 0");
  const double t = student_t_quantile(1.0 - alpha / 2.0, n - 2);
  return {agbd - t * se, agbd + t * se};
}

double allometric_agb(double lcm, double a, double b, double re_site)
{
  if (!(lcm > 0.0))
    throw std::invalid_argument("allometric_agb needs lcm > 0, got " + std::to_string(lcm));
  return std::exp(a + b * std::log(lcm) + re_site);
}

void SynthConfig::validate() const
{
  if (passes <= 0 || tracks_per_pass <= 0)
    throw std::invalid_argument("synth: passes and tracks_per_pass must be positive");
  if (!(track_spacing > 0.0) || !(footprint_spacing > 0.0))
    throw std::invalid_argument("synth: spacings must be positive");
  if (!(quality_rate > 0.0 && quality_rate <= 1.0))
    throw std::invalid_argument("synth: quality_rate must be in (0,1]");
  if (scenes <= 0)
    throw std::invalid_argument("synth: scenes must be positive");
  if (!(cloud_fraction >= 0.0 && cloud_fraction < 1.0))
    throw std::invalid_argument("synth: cloud_fraction must be in [0,1)");
  if (max_attempts <= 0 || min_points < 1)
    throw std::invalid_argument("synth: max_attempts and min_points must be positive");
}

void to_json(nlohmann::json& j, const SynthConfig& c)
{
  j = nlohmann::json{{"passes", c.passes},
                     {"tracks_per_pass", c.tracks_per_pass},
                     {"track_spacing", c.track_spacing},
                     {"footprint_spacing", c.footprint_spacing},
                     {"quality_rate", c.quality_rate},
                     {"min_points", c.min_points},
                     {"scenes", c.scenes},
                     {"cloud_fraction", c.cloud_fraction},
                     {"max_attempts", c.max_attempts},
                     {"ch_noise_cm", c.ch_noise_cm},
                     {"cc_noise", c.cc_noise},
                     {"sar_noise", c.sar_noise},
                     {"optical_noise", c.optical_noise},
                     {"allometry",
                      {{"a", c.allometry.a}, {"b", c.allometry.b}, {"re_sd", c.allometry.re_sd}}}};
}

void from_json(const nlohmann::json& j, SynthConfig& c)
{
  const SynthConfig d;
  c.passes = j.value("passes", d.passes);
  c.tracks_per_pass = j.value("tracks_per_pass", d.tracks_per_pass);
  c.track_spacing = j.value("track_spacing", d.track_spacing);
  c.footprint_spacing = j.value("footprint_spacing", d.footprint_spacing);
  c.quality_rate = j.value("quality_rate", d.quality_rate);
  c.min_points = j.value("min_points", d.min_points);
  c.scenes = j.value("scenes", d.scenes);
  c.cloud_fraction = j.value("cloud_fraction", d.cloud_fraction);
  c.max_attempts = j.value("max_attempts", d.max_attempts);
  c.ch_noise_cm = j.value("ch_noise_cm", d.ch_noise_cm);
  c.cc_noise = j.value("cc_noise", d.cc_noise);
  c.sar_noise = j.value("sar_noise", d.sar_noise);
  c.optical_noise = j.value("optical_noise", d.optical_noise);
  if (j.contains("allometry")) {
    const auto& a = j.at("allometry");
    c.allometry.a = a.value("a", d.allometry.a);
    c.allometry.b = a.value("b", d.allometry.b);
    c.allometry.re_sd = a.value("re_sd", d.allometry.re_sd);
  }
  c.validate();
}

LinearModel stratum_model(Pft pft)
{
  LinearModel m;
  m.stratum = static_cast<int>(pft);
  m.h = Transform::Sqrt;
  switch (pft) {
    case Pft::DBT:
      m.b = {0.6, 0.22, 0.26};
      m.mse = 0.9;
      break;
    case Pft::EBT:
      m.b = {0.8, 0.25, 0.30};
      m.mse = 1.1;
      break;
    case Pft::ENT:
      m.b = {0.4, 0.20, 0.24};
      m.mse = 0.8;
      break;
    case Pft::GSW:
      m.b = {0.3, 0.25, 0.20};
      m.mse = 0.5;
      break;
  }
  m.cov = {0.02, 0.0, 0.0, 0.0, 1e-4, 2e-5, 0.0, 2e-5, 1e-4};
  return m;
}

std::vector<double> gedi_predictors(const std::array<float, 7>& rh_cm)
{
  return {1.0, rh_cm[1] / 100.0, rh_cm[6] / 100.0};
}

std::vector<Footprint> pass_geometry(int pass,
                                     double y0,
                                     double x0,
                                     double angle,
                                     const SynthConfig& config,
                                     std::size_t height,
                                     std::size_t width)
{
  const double dy = std::sin(angle), dx = std::cos(angle);
  // Cross-track unit vector.
  const double py = dx, px = -dy;
  const double reach = std::hypot(static_cast<double>(height), static_cast<double>(width)) +
                       config.track_spacing * config.tracks_per_pass;
  const int k_max = static_cast<int>(std::ceil(reach / config.footprint_spacing));
  std::vector<Footprint> out;
  for (int t = 0; t < config.tracks_per_pass; ++t) {
    const double off = (t - 0.5 * (config.tracks_per_pass - 1)) * config.track_spacing;
    for (int k = -k_max; k <= k_max; ++k) {
      const double s = k * config.footprint_spacing;
      const double y = y0 + off * py + s * dy;
      const double x = x0 + off * px + s * dx;
      if (y >= 0.0 && x >= 0.0 && y < static_cast<double>(height) && x < static_cast<double>(width))
        out.push_back({pass, t, k, y, x});
    }
  }
  return out;
}

Composite median_composite(const std::vector<Tensor>& stack, const std::vector<Tensor>& masks)
{
  if (stack.empty())
    throw std::invalid_argument("median_composite needs at least one scene");
  if (masks.size() != stack.size())
    throw std::invalid_argument("median_composite: " + std::to_string(stack.size()) +
                                " scenes but " + std::to_string(masks.size()) + " masks");
  const Shape& shape = stack.front().shape();
  for (std::size_t s = 0; s < stack.size(); ++s)
    if (stack[s].shape() != shape || masks[s].shape() != shape)
      throw std::invalid_argument("median_composite: scene " + std::to_string(s) + " has shape " +
                                  shape_string(stack[s].shape()) + ", expected " +
                                  shape_string(shape));
  Composite out{Tensor(shape), Tensor(shape)};
  std::vector<float> buf;
  for (std::size_t i = 0; i < out.value.size(); ++i) {
    buf.clear();
    for (std::size_t s = 0; s < stack.size(); ++s)
      if (masks[s][i] != 0.0f)
        buf.push_back(stack[s][i]);
    if (buf.empty()) {
      out.gap[i] = 1.0f;
      continue;
    }
    std::sort(buf.begin(), buf.end());
    const std::size_t n = buf.size();
    out.value[i] = n % 2 ? buf[n / 2] : 0.5f * (buf[n / 2 - 1] + buf[n / 2]);
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi)
{
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng, double sd = 1.0)
{
  return std::normal_distribution<double>(0.0, sd)(rng);
}

double logistic(double x)
{
  return 1.0 / (1.0 + std::exp(-x));
}

/// Sum of random plane waves, roughly N(0,1) per pixel.
std::vector<double> smooth_field(Rng& rng, std::size_t h, std::size_t w, double wl_min, double wl_max,
                                 int waves = 8)
{
  std::vector<double> ky(waves), kx(waves), phase(waves);
  for (int i = 0; i < waves; ++i) {
    const double wl = uniform(rng, wl_min, wl_max);
    const double dir = uniform(rng, 0.0, std::numbers::pi);
    ky[i] = 2.0 * std::numbers::pi * std::sin(dir) / wl;
    kx[i] = 2.0 * std::numbers::pi * std::cos(dir) / wl;
    phase[i] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  const double norm = std::sqrt(2.0 / waves);
  std::vector<double> f(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = 0; i < waves; ++i)
        s += std::cos(ky[i] * y + kx[i] * x + phase[i]);
      f[y * w + x] = norm * s;
    }
  return f;
}

// Reflectance-like signatures for the 6 optical/thermal roles.
constexpr double kVegSignature[4][6] = {
  {0.03, 0.07, 0.04, 0.40, 0.20, 0.55}, // DBT
  {0.02, 0.05, 0.03, 0.35, 0.15, 0.50}, // EBT
  {0.02, 0.04, 0.02, 0.25, 0.12, 0.52}, // ENT
  {0.05, 0.09, 0.08, 0.30, 0.28, 0.65}, // GSW
};
constexpr double kSoilSignature[6] = {0.10, 0.14, 0.18, 0.25, 0.35, 0.75};

std::array<float, 7> rh_profile(double ch_cm, double gamma)
{
  std::array<float, 7> rh{};
  for (std::size_t i = 0; i < rh.size(); ++i)
    rh[i] = static_cast<float>(ch_cm * std::pow(kRhQuantiles[i] / 98.0, gamma));
  return rh;
}

struct Latent
{
  std::vector<double> ch_cm, cc, gamma, altitude, aspect, slope;
  std::vector<Pft> pft;
};

Latent make_latent(Rng& rng, std::size_t h, std::size_t w, double lat)
{
  Latent L;
  const std::size_t n = h * w;
  const double abs_lat = std::abs(lat);
  Pft main_pft = Pft::DBT, second_pft = Pft::ENT;
  if (abs_lat < 23.0) {
    main_pft = Pft::EBT;
    second_pft = Pft::DBT;
  } else if (abs_lat > 50.0) {
    main_pft = Pft::ENT;
    second_pft = Pft::DBT;
  }
  const double hmax = 22.0 + 18.0 * std::cos(lat * std::numbers::pi / 180.0);
  const double forest_offset = normal(rng, 0.8);
  const auto forest = smooth_field(rng, h, w, 20.0, 90.0);
  const auto vigor = smooth_field(rng, h, w, 15.0, 60.0);
  const auto open = smooth_field(rng, h, w, 10.0, 40.0);
  const auto mix = smooth_field(rng, h, w, 20.0, 70.0);
  const auto shape = smooth_field(rng, h, w, 25.0, 80.0);
  const auto alt = smooth_field(rng, h, w, 60.0, 160.0, 6);
  const double relief = uniform(rng, 0.2, 1.5);
  L.ch_cm.resize(n);
  L.cc.resize(n);
  L.gamma.resize(n);
  L.pft.resize(n);
  L.altitude.resize(n);
  L.aspect.resize(n);
  L.slope.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double tree = logistic(2.2 * (forest[i] + forest_offset));
    const double ch_m = hmax * std::pow(tree, 1.3) * (0.75 + 0.25 * logistic(2.0 * vigor[i]));
    L.ch_cm[i] = 100.0 * ch_m;
    L.cc[i] = 100.0 * std::clamp(1.15 * tree + 0.12 * open[i] - 0.05, 0.0, 1.0);
    L.pft[i] = ch_m < 5.0 ? Pft::GSW : (mix[i] > 0.6 ? second_pft : main_pft);
    L.gamma[i] = std::clamp(1.0 + 0.3 * shape[i] + (L.pft[i] == Pft::GSW ? -0.3 : 0.0), 0.5, 1.6);
    L.altitude[i] = relief * alt[i];
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t yl = y > 0 ? y - 1 : y, yh = y + 1 < h ? y + 1 : y;
      const std::size_t xl = x > 0 ? x - 1 : x, xh = x + 1 < w ? x + 1 : x;
      const double gy = (L.altitude[yh * w + x] - L.altitude[yl * w + x]) / double(yh - yl);
      const double gx = (L.altitude[y * w + xh] - L.altitude[y * w + xl]) / double(xh - xl);
      L.slope[y * w + x] = std::min(1.0, 10.0 * std::hypot(gy, gx));
      L.aspect[y * w + x] = std::atan2(gy, gx) / std::numbers::pi;
    }
  return L;
}

PointLabel make_label(Rng& rng, const Latent& L, std::size_t px, int row, int col,
                      const SynthConfig& config)
{
  PointLabel p;
  p.row = row;
  p.col = col;
  p.pft = L.pft[px];
  p.quality = uniform(rng, 0.0, 1.0) < config.quality_rate;
  const double ch = std::max(0.0, L.ch_cm[px] + normal(rng, config.ch_noise_cm));
  p.rh = rh_profile(ch, L.gamma[px]);
  p.cc = static_cast<float>(std::clamp(L.cc[px] + normal(rng, config.cc_noise), 0.0, 100.0));
  const LinearModel model = stratum_model(p.pft);
  const auto x = gedi_predictors(p.rh);
  const double se_t = standard_error(x, model);
  double z = model.bias;
  for (std::size_t i = 0; i < x.size(); ++i)
    z += x[i] * model.b[i];
  z = std::max(z, 0.0);
  p.agbd = static_cast<float>(inverse_transform(model.h, z + normal(rng, se_t)));
  // Standard deviation of (z + e)^2 for e ~ N(0, se_t^2).
  p.se = static_cast<float>(std::sqrt(4.0 * z * z * se_t * se_t + 2.0 * std::pow(se_t, 4)));
  return p;
}

} // namespace

TileSample generate_scene(std::uint64_t seed,
                          std::size_t height,
                          std::size_t width,
                          double lon,
                          double lat,
                          const SynthConfig& config)
{
  config.validate();
  if (height < 64 || width < 64)
    throw std::invalid_argument("generate_scene needs H, W >= 64, got " + std::to_string(height) +
                                "x" + std::to_string(width));
  Rng rng(seed);
  const std::size_t h = height, w = width, n = h * w;
  const Latent L = make_latent(rng, h, w, lat);

  TileSample t;
  t.seed = seed;
  t.lon = lon;
  t.lat = lat;
  t.channels = Tensor({static_cast<std::size_t>(kInputChannels), h, w});

  // Optical/thermal: per-scene reflectance with noise and cloud masks, then median.
  std::vector<std::vector<Tensor>> optical(kSpectralBands);
  std::vector<Tensor> masks;
  // Threshold so that roughly cloud_fraction of an N(0,1) field is cloudy.
  double lo = -6.0, cloud_threshold = 6.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + cloud_threshold);
    (0.5 * std::erfc(mid / std::sqrt(2.0)) > config.cloud_fraction ? lo : cloud_threshold) = mid;
  }
  for (int s = 0; s < config.scenes; ++s) {
    const auto cloud = smooth_field(rng, h, w, 12.0, 50.0, 6);
    Tensor mask({h, w});
    for (std::size_t i = 0; i < n; ++i)
      mask[i] = cloud[i] > cloud_threshold ? 0.0f : 1.0f;
    masks.push_back(std::move(mask));
    const double gain = 1.0 + normal(rng, 0.02);
    for (int c = 0; c < kSpectralBands; ++c) {
      Tensor band({h, w});
      for (std::size_t i = 0; i < n; ++i) {
        const double f = L.cc[i] / 100.0;
        const double shade = (c == 3 || c == 4) ? 1.0 - 0.35 * std::min(L.ch_cm[i] / 4000.0, 1.0) : 1.0;
        const double illum = 1.0 + 0.1 * L.slope[i] * std::cos(std::numbers::pi * L.aspect[i]);
        const double r = (f * kVegSignature[static_cast<int>(L.pft[i])][c] * shade +
                          (1.0 - f) * kSoilSignature[c]) * illum * gain;
        band[i] = static_cast<float>(2.0 * (r + normal(rng, config.optical_noise)));
      }
      optical[c].push_back(std::move(band));
    }
  }
  Tensor gap;
  for (int c = 0; c < kSpectralBands; ++c) {
    Composite comp = median_composite(optical[c], masks);
    std::copy(comp.value.values().begin(), comp.value.values().end(), t.channels.plane(c).begin());
    gap = std::move(comp.gap);
  }
  t.gap = std::move(gap);

  // Radar: backscatter saturating with height, speckle, median over scenes.
  for (int c = 0; c < 2; ++c) {
    std::vector<Tensor> stack;
    std::vector<Tensor> valid;
    for (int s = 0; s < config.scenes; ++s) {
      Tensor scene({h, w});
      for (std::size_t i = 0; i < n; ++i) {
        const double ch_m = L.ch_cm[i] / 100.0;
        const double v = c == 0 ? -1.0 + 1.2 * (1.0 - std::exp(-ch_m / 12.0)) + 0.15 * L.cc[i] / 100.0
                                : -1.6 + 1.5 * (1.0 - std::exp(-ch_m / 10.0));
        scene[i] = static_cast<float>(v + normal(rng, config.sar_noise));
      }
      stack.push_back(std::move(scene));
      valid.emplace_back(Shape{h, w}, 1.0f);
    }
    const Composite comp = median_composite(stack, valid);
    std::copy(comp.value.values().begin(), comp.value.values().end(),
              t.channels.plane(6 + c).begin());
  }
  for (std::size_t i = 0; i < n; ++i) {
    t.channels.plane(8)[i] = static_cast<float>(0.5 * L.altitude[i]);
    t.channels.plane(9)[i] = static_cast<float>(L.aspect[i]);
    t.channels.plane(10)[i] = static_cast<float>(L.slope[i]);
    t.channels.plane(11)[i] = static_cast<float>(lon / 180.0);
    t.channels.plane(12)[i] = static_cast<float>(lat / 90.0);
  }

  // Latent maps.
  const Allometry& al = config.allometry;
  const double re_site = normal(rng, al.re_sd);
  Tensor lch({h, w}), lcc({h, w}), lagbd({h, w}), llcm({h, w}), lsite({h, w}), lpft({h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const auto rh = rh_profile(L.ch_cm[i], L.gamma[i]);
    lch[i] = static_cast<float>(L.ch_cm[i]);
    lcc[i] = static_cast<float>(L.cc[i]);
    lagbd[i] = static_cast<float>(predict_agbd(gedi_predictors(rh), stratum_model(L.pft[i])));
    double mean_rh = 0.0;
    for (float v : rh)
      mean_rh += v;
    const double lcm = mean_rh / rh.size() / 100.0;
    llcm[i] = static_cast<float>(lcm);
    lsite[i] = lcm > 0.0 ? static_cast<float>(allometric_agb(lcm, al.a, al.b, re_site)) : 0.0f;
    lpft[i] = static_cast<float>(static_cast<int>(L.pft[i]));
  }
  t.latent["ch"] = std::move(lch);
  t.latent["cc"] = std::move(lcc);
  t.latent["agbd"] = std::move(lagbd);
  t.latent["lcm"] = std::move(llcm);
  t.latent["agb_site"] = std::move(lsite);
  t.latent["pft"] = std::move(lpft);
  t.latent["re_site"] = Tensor({1}, static_cast<float>(re_site));

  // Footprints: whole passes are redrawn until enough quality points land.
  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    std::set<std::size_t> used;
    for (int pass = 0; pass < config.passes; ++pass) {
      const double angle = uniform(rng, 0.0, std::numbers::pi);
      const double y0 = 0.5 * h + uniform(rng, -0.5, 0.5) * config.track_spacing;
      const double x0 = 0.5 * w + uniform(rng, -0.5, 0.5) * config.track_spacing;
      for (const Footprint& f : pass_geometry(pass, y0, x0, angle, config, h, w)) {
        const int row = static_cast<int>(std::floor(f.y));
        const int col = static_cast<int>(std::floor(f.x));
        const std::size_t px = static_cast<std::size_t>(row) * w + static_cast<std::size_t>(col);
        if (!used.insert(px).second)
          continue;
        t.points.push_back(make_label(rng, L, px, row, col, config));
      }
    }
    if (t.quality_points().size() >= static_cast<std::size_t>(config.min_points))
      return t;
    t.points.clear();
  }
  throw std::runtime_error("generate_scene: fewer than " + std::to_string(config.min_points) +
                           " quality footprints after " + std::to_string(config.max_attempts) +
                           " attempts (seed " + std::to_string(seed) + ")");
}

std::vector<TileSample> generate_dataset(std::uint64_t master_seed,
                                         std::size_t n_tiles,
                                         std::size_t tile_size,
                                         const SynthConfig& config)
{
  std::vector<TileSample> out;
  out.reserve(n_tiles);
  for (std::size_t i = 0; i < n_tiles; ++i) {
    const std::uint64_t seed = derive_seed(master_seed, i);
    Rng geo(derive_seed(seed, 0xC0FFEE));
    const double lon = uniform(geo, -180.0, 180.0);
    const double lat = uniform(geo, -55.0, 65.0);
    out.push_back(generate_scene(seed, tile_size, tile_size, lon, lat, config));
  }
  return out;
}

std::vector<TileSample> split_tile(const TileSample& tile, std::size_t parts)
{
  const std::size_t h = tile.height(), w = tile.width();
  if (parts == 0 || h % parts || w % parts)
    throw std::invalid_argument("split_tile: " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible into " + std::to_string(parts) + " parts");
  const std::size_t sh = h / parts, sw = w / parts;
  auto crop = [&](const Tensor& src, std::size_t y0, std::size_t x0) {
    if (src.rank() == 3) {
      Tensor out({src.channels(), sh, sw});
      for (std::size_t c = 0; c < src.channels(); ++c)
        for (std::size_t y = 0; y < sh; ++y)
          for (std::size_t x = 0; x < sw; ++x)
            out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
      return out;
    }
    if (src.rank() == 2 && src.extent(0) == h && src.extent(1) == w) {
      Tensor out({sh, sw});
      for (std::size_t y = 0; y < sh; ++y)
        for (std::size_t x = 0; x < sw; ++x)
          out[y * sw + x] = src[(y0 + y) * w + x0 + x];
      return out;
    }
    return src;
  };
  std::vector<TileSample> out;
  for (std::size_t i = 0; i < parts; ++i)
    for (std::size_t j = 0; j < parts; ++j) {
      const std::size_t y0 = i * sh, x0 = j * sw;
      TileSample s;
      s.seed = derive_seed(tile.seed, i * parts + j);
      s.lon = tile.lon;
      s.lat = tile.lat;
      s.channels = crop(tile.channels, y0, x0);
      if (!tile.gap.empty())
        s.gap = crop(tile.gap, y0, x0);
      for (const auto& [name, m] : tile.latent)
        s.latent[name] = crop(m, y0, x0);
      for (PointLabel p : tile.points) {
        if (p.row < static_cast<int>(y0) || p.row >= static_cast<int>(y0 + sh) ||
            p.col < static_cast<int>(x0) || p.col >= static_cast<int>(x0 + sw))
          continue;
        p.row -= static_cast<int>(y0);
        p.col -= static_cast<int>(x0);
        s.points.push_back(p);
      }
      out.push_back(std::move(s));
    }
  return out;
}

} // namespace canopy
