// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/tensor.hpp>

#include <cstdint>
#include <set>

namespace canopy {

struct AdamConfig
{
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments
{
  Tensor m;
  Tensor v;
};

struct AdamState
{
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;

  void reset()
  {
    step = 0;
    moments.clear();
  }
};

/// Bias-corrected Adam update applied to every parameter that has a gradient
/// and is not in `frozen`. Gradients are validated first: a non-finite value
/// aborts the step before any parameter or moment is touched.
void adam_step(ParamMap<float>& params,
               const ParamMap<float>& grads,
               AdamState& state,
               const AdamConfig& config,
               const std::set<std::string>& frozen = {});

} // namespace canopy
