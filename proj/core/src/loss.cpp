// SPDX-License-Identifier: Apache-2.0
#include <canopy/loss.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace canopy {

void LossWeights::validate() const
{
  if (!(lambda_h > 0.0))
    throw std::invalid_argument("lambda_h must be positive");
  if (!(lambda_s >= 0.0))
    throw std::invalid_argument("lambda_s must be non-negative");
  for (double a : alpha)
    if (!(a >= 0.0))
      throw std::invalid_argument("alpha weights must be non-negative");
  for (double l : lambda_reg)
    if (!(l >= 0.0))
      throw std::invalid_argument("lambda_reg must be non-negative");
  if (!(sample_weight >= 0.0))
    throw std::invalid_argument("sample_weight must be non-negative");
}

double nll(double pred, double target, double sigma, double lambda_reg)
{
  if (!(sigma > 0.0))
    throw std::invalid_argument("nll: sigma must be positive, got " + std::to_string(sigma));
  const double r = pred - target;
  const double s2 = sigma * sigma;
  return 0.5 * (r * r / s2 + std::log(s2)) + lambda_reg * s2;
}

double optimal_variance(double residual, double lambda_reg)
{
  const double r2 = residual * residual;
  if (lambda_reg <= 0.0)
    return r2;
  // Root of 2 lambda v^2 + v - r^2 = 0, written to avoid cancellation.
  return 2.0 * r2 / (1.0 + std::sqrt(1.0 + 8.0 * lambda_reg * r2));
}

template <typename T>
NllMap<T> nll_map(const BasicTensor<T>& pred,
                  const BasicTensor<T>& target,
                  const BasicTensor<T>& sigma,
                  double lambda_reg,
                  bool fixed_sigma)
{
  if (pred.shape() != target.shape() || (!fixed_sigma && sigma.shape() != pred.shape()))
    throw std::invalid_argument("nll_map: shapes " + shape_string(pred.shape()) + ", " +
                                shape_string(target.shape()) + ", " + shape_string(sigma.shape()));
  NllMap<T> out{BasicTensor<T>(pred.shape()), BasicTensor<T>(pred.shape()), {}};
  if (!fixed_sigma)
    out.d_sigma = BasicTensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    if (fixed_sigma) {
      out.loss[i] = static_cast<T>(0.5 * r * r + lambda_reg);
      out.d_pred[i] = static_cast<T>(r);
      continue;
    }
    const double s = sigma[i];
    if (!(s > 0.0))
      throw std::invalid_argument("nll_map: non-positive sigma " + std::to_string(s) +
                                  " at index " + std::to_string(i));
    const double s2 = s * s;
    out.loss[i] = static_cast<T>(0.5 * (r * r / s2 + std::log(s2)) + lambda_reg * s2);
    out.d_pred[i] = static_cast<T>(r / s2);
    out.d_sigma[i] = static_cast<T>(-r * r / (s2 * s) + 1.0 / s + 2.0 * lambda_reg * s);
  }
  return out;
}

template NllMap<float> nll_map(const Tensor&, const Tensor&, const Tensor&, double, bool);
template NllMap<double> nll_map(const Tensor64&, const Tensor64&, const Tensor64&, double, bool);

Tensor balance_weights(const Tensor& mask, double lambda_h, double lambda_s)
{
  std::size_t n_h = 0;
  for (float m : mask.values())
    n_h += m != 0.0f;
  const std::size_t n_s = mask.size() - n_h;
  if (n_h == 0)
    throw std::invalid_argument("balance: sample has no hard pixels");
  const double wh = lambda_h / static_cast<double>(n_h);
  const double ws = n_s > 0 ? lambda_s / static_cast<double>(n_s) : 0.0;
  Tensor w(mask.shape());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<float>(mask[i] != 0.0f ? wh : ws);
  return w;
}

double balance(const Tensor& loss_map, const Tensor& mask, double lambda_h, double lambda_s)
{
  if (loss_map.shape() != mask.shape())
    throw std::invalid_argument("balance: shapes " + shape_string(loss_map.shape()) + " vs " +
                                shape_string(mask.shape()));
  std::size_t n_h = 0;
  for (float m : mask.values())
    n_h += m != 0.0f;
  if (n_h == 0)
    throw std::invalid_argument("balance: sample has no hard pixels");
  const std::size_t n_s = mask.size() - n_h;
  std::vector<double> hard, soft;
  hard.reserve(n_h);
  soft.reserve(n_s);
  for (std::size_t i = 0; i < mask.size(); ++i)
    (mask[i] != 0.0f ? hard : soft).push_back(loss_map[i]);
  double total = lambda_h * pairwise_sum(hard) / static_cast<double>(n_h);
  if (n_s > 0)
    total += lambda_s * pairwise_sum(soft) / static_cast<double>(n_s);
  return total;
}

double soft_weight_schedule(int epoch, int initial_epochs, int total_epochs)
{
  if (epoch < 0 || epoch >= total_epochs)
    throw std::invalid_argument("soft_weight_schedule: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(total_epochs) + ")");
  if (epoch < initial_epochs)
    return std::pow(10.0, -3.0 * epoch / initial_epochs);
  const int span = total_epochs - 1 - initial_epochs;
  if (span <= 0)
    return 1e-3;
  return 1e-3 * std::pow(10.0, static_cast<double>(epoch - initial_epochs) / span);
}

double total_loss(std::span<const double> balanced, std::span<const double> alpha, double sample_weight)
{
  if (balanced.size() != alpha.size())
    throw std::invalid_argument("total_loss: " + std::to_string(balanced.size()) + " losses vs " +
                                std::to_string(alpha.size()) + " weights");
  double s = 0.0;
  for (std::size_t i = 0; i < balanced.size(); ++i)
    s += alpha[i] * balanced[i];
  return sample_weight * s;
}

double pairwise_sum(std::span<const double> values)
{
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values)
      s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

} // namespace canopy
