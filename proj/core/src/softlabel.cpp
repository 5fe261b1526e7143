// SPDX-License-Identifier: Apache-2.0
#include <canopy/softlabel.hpp>

#include <algorithm>
#include <cmath>

namespace canopy {

namespace {

void check_point(const PointLabel& p, std::size_t h, std::size_t w)
{
  if (p.row < 0 || p.col < 0 || static_cast<std::size_t>(p.row) >= h ||
      static_cast<std::size_t>(p.col) >= w)
    throw std::invalid_argument("point (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                                ") outside a " + std::to_string(h) + "x" + std::to_string(w) +
                                " tile");
}

} // namespace

const Tensor& LabelMap::target_of(const std::string& variable) const
{
  const auto it = std::find(variables.begin(), variables.end(), variable);
  if (it == variables.end())
    throw std::invalid_argument("label map has no variable '" + variable + "'");
  return target[static_cast<std::size_t>(it - variables.begin())];
}

double cosine_similarity(std::span<const float> x, std::span<const float> y)
{
  if (x.size() != y.size())
    throw std::invalid_argument("cosine_similarity: lengths " + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()));
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += static_cast<double>(x[i]) * y[i];
    nx += static_cast<double>(x[i]) * x[i];
    ny += static_cast<double>(y[i]) * y[i];
  }
  if (nx == 0.0 || ny == 0.0)
    return 0.0;
  return dot / (std::sqrt(nx) * std::sqrt(ny));
}

LabelMap hard_labels(const std::vector<PointLabel>& points,
                     std::size_t height,
                     std::size_t width,
                     const std::vector<std::string>& variables)
{
  LabelMap out;
  out.variables = variables;
  out.mask = Tensor({height, width});
  out.target.assign(variables.size(), Tensor({height, width}));
  for (const auto& p : points) {
    check_point(p, height, width);
    const std::size_t px = static_cast<std::size_t>(p.row) * width + static_cast<std::size_t>(p.col);
    if (out.mask[px] != 0.0f)
      continue;
    out.mask[px] = 1.0f;
    ++out.n_hard;
    for (std::size_t v = 0; v < variables.size(); ++v)
      out.target[v][px] = p.value(variables[v]);
  }
  out.n_soft = height * width - out.n_hard;
  return out;
}

LabelMap spectral_soft_labels(const Tensor& bands,
                              const std::vector<PointLabel>& points,
                              const std::vector<std::string>& variables)
{
  if (bands.rank() != 3)
    throw std::invalid_argument("spectral_soft_labels: bands must be [B,H,W], got " +
                                shape_string(bands.shape()));
  if (points.empty())
    throw std::invalid_argument("spectral_soft_labels: at least one hard point is required");
  const std::size_t h = bands.height(), w = bands.width();
  const std::size_t nb = std::min<std::size_t>(bands.channels(), kSpectralBands);
  LabelMap out = hard_labels(points, h, w, variables);
  const std::size_t n = h * w;
  const std::size_t m = points.size();

  // Row-normalized spectra: A-hat for pixels, B-hat for hard points. Zero rows
  // stay zero, which yields similarity 0 to every candidate.
  std::vector<double> a(n * nb);
  for (std::size_t px = 0; px < n; ++px) {
    double norm = 0.0;
    for (std::size_t c = 0; c < nb; ++c) {
      const double v = bands[c * n + px];
      a[px * nb + c] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (std::size_t c = 0; c < nb; ++c)
        a[px * nb + c] /= norm;
  }
  std::vector<double> b(m * nb);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t px = static_cast<std::size_t>(points[j].row) * w +
                           static_cast<std::size_t>(points[j].col);
    for (std::size_t c = 0; c < nb; ++c)
      b[j * nb + c] = a[px * nb + c];
  }

  std::vector<std::vector<float>> values(m);
  for (std::size_t j = 0; j < m; ++j)
    for (const auto& v : variables)
      values[j].push_back(points[j].value(v));

  for (std::size_t px = 0; px < n; ++px) {
    if (out.mask[px] != 0.0f)
      continue;
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < nb; ++c)
        s += a[px * nb + c] * b[j * nb + c];
      if (s > best_sim + kSimilarityTieTolerance) {
        best_sim = s;
        best = j;
      }
    }
    for (std::size_t v = 0; v < variables.size(); ++v)
      out.target[v][px] = values[best][v];
  }
  return out;
}

Tensor combine(const Tensor& mask, const Tensor& hard, const Tensor& soft)
{
  if (mask.shape() != hard.shape() || mask.shape() != soft.shape())
    throw std::invalid_argument("combine: shapes " + shape_string(mask.shape()) + ", " +
                                shape_string(hard.shape()) + ", " + shape_string(soft.shape()));
  Tensor out(mask.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mask[i] * hard[i] + (1.0f - mask[i]) * soft[i];
  return out;
}

LabelMap teacher_targets(const NetworkParams& teacher,
                         const TileSample& sample,
                         const std::vector<std::string>& variables)
{
  const Prediction pred = forward(teacher, sample.channels);
  LabelMap out = hard_labels(sample.quality_points(), sample.height(), sample.width(), variables);
  for (std::size_t v = 0; v < variables.size(); ++v)
    out.target[v] = combine(out.mask, out.target[v], pred.value_of(variables[v]));
  return out;
}

} // namespace canopy
