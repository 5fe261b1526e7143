// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/tensor.hpp>

#include <span>
#include <vector>

namespace canopy {

struct LossWeights
{
  double lambda_h = 1.0;
  double lambda_s = 1.0;
  std::vector<double> lambda_reg{0.0, 0.0, 0.0};
  std::vector<double> alpha{1.0, 1.0, 1.0};
  double sample_weight = 1.0;

  void validate() const;
};

/// Per-pixel negative log likelihood and its partial derivatives.
template <typename T>
struct NllMap
{
  BasicTensor<T> loss;
  BasicTensor<T> d_pred;
  BasicTensor<T> d_sigma; ///< empty when sigma is fixed
};

/// 0.5 * ((pred - target)^2 / sigma^2 + ln sigma^2) + lambda_reg * sigma^2.
/// With fixed_sigma the sigma argument is ignored and sigma = 1.
template <typename T>
NllMap<T> nll_map(const BasicTensor<T>& pred,
                  const BasicTensor<T>& target,
                  const BasicTensor<T>& sigma,
                  double lambda_reg,
                  bool fixed_sigma);

/// Scalar form of the per-pixel loss.
double nll(double pred, double target, double sigma, double lambda_reg);

/// sigma^2 minimizing the per-pixel loss for residual r.
double optimal_variance(double residual, double lambda_reg);

/// Per-pixel weights lambda_h/n_h on the mask and lambda_s/n_s off it.
/// n_s = 0 drops the soft term. Throws when the mask is empty.
Tensor balance_weights(const Tensor& mask, double lambda_h, double lambda_s);

/// sum(balance_weights * loss).
double balance(const Tensor& loss_map, const Tensor& mask, double lambda_h, double lambda_s);

/// Soft-label weight per epoch: geometric decay 1 -> 1e-3 over the initial
/// epochs, then geometric growth 1e-3 -> 1e-2 until the last epoch.
double soft_weight_schedule(int epoch, int initial_epochs, int total_epochs);

/// sample_weight * sum_i alpha_i * balanced_i.
double total_loss(std::span<const double> balanced, std::span<const double> alpha, double sample_weight);

/// Pairwise (cascade) summation in index order; fixed reduction tree.
double pairwise_sum(std::span<const double> values);

} // namespace canopy
