// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/model.hpp>
#include <canopy/sample.hpp>

#include <span>
#include <string>
#include <vector>

namespace canopy {

/// Per-variable targets together with the hard-label mask m.
struct LabelMap
{
  std::vector<std::string> variables;
  std::vector<Tensor> target; ///< one [H,W] map per variable
  Tensor mask;                ///< [H,W], 1 at hard pixels
  std::size_t n_hard = 0;
  std::size_t n_soft = 0;

  const Tensor& target_of(const std::string& variable) const;
};

inline constexpr double kSimilarityTieTolerance = 1e-9;

/// x.y / (|x| |y|); 0 when either vector is zero.
double cosine_similarity(std::span<const float> x, std::span<const float> y);

/// Hard labels only: point values at their pixels, zero elsewhere. When two
/// points share a pixel the first one wins.
LabelMap hard_labels(const std::vector<PointLabel>& points,
                     std::size_t height,
                     std::size_t width,
                     const std::vector<std::string>& variables);

/// Every unlabeled pixel takes the values of the hard point whose spectrum is
/// most cosine-similar to its own. Similarities within kSimilarityTieTolerance
/// are ties; ties go to the lowest point index.
/// `bands` is [B,H,W]; only the first kSpectralBands channels are used when
/// more are supplied.
LabelMap spectral_soft_labels(const Tensor& bands,
                              const std::vector<PointLabel>& points,
                              const std::vector<std::string>& variables);

/// m * hard + (1 - m) * soft.
Tensor combine(const Tensor& mask, const Tensor& hard, const Tensor& soft);

/// Teacher prediction off the mask, true point values on it.
LabelMap teacher_targets(const NetworkParams& teacher,
                         const TileSample& sample,
                         const std::vector<std::string>& variables);

} // namespace canopy
