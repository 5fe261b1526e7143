// SPDX-License-Identifier: Apache-2.0
#include <canopy/optim.hpp>

#include <cmath>

namespace canopy {

void adam_step(ParamMap<float>& params,
               const ParamMap<float>& grads,
               AdamState& state,
               const AdamConfig& config,
               const std::set<std::string>& frozen)
{
  for (const auto& [name, g] : grads) {
    if (frozen.count(name))
      continue;
    auto it = params.find(name);
    if (it == params.end())
      throw std::invalid_argument("adam_step: gradient for unknown parameter " + name);
    if (it->second.shape() != g.shape())
      throw std::invalid_argument("adam_step: gradient shape " + shape_string(g.shape()) +
                                  " does not match parameter " + name + " " +
                                  shape_string(it->second.shape()));
    for (float v : g.values())
      if (!std::isfinite(v))
        throw std::runtime_error("adam_step: non-finite gradient in parameter " + name);
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);

  for (const auto& [name, g] : grads) {
    if (frozen.count(name))
      continue;
    Tensor& p = params.at(name);
    auto [mit, inserted] = state.moments.try_emplace(name);
    AdamMoments& mom = mit->second;
    if (inserted || mom.m.shape() != p.shape()) {
      mom.m = Tensor(p.shape());
      mom.v = Tensor(p.shape());
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double m = config.beta1 * mom.m[i] + (1.0 - config.beta1) * gi;
      const double v = config.beta2 * mom.v[i] + (1.0 - config.beta2) * gi * gi;
      mom.m[i] = static_cast<float>(m);
      mom.v[i] = static_cast<float>(v);
      const double mhat = m / c1;
      const double vhat = v / c2;
      p[i] = static_cast<float>(p[i] - config.lr * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

} // namespace canopy
