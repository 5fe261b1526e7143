// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/tensor.hpp>

#include <random>

namespace canopy {

/// Stride and (possibly asymmetric) zero padding of a square-kernel convolution.
struct ConvGeometry
{
  int stride = 1;
  int pad_before = 0;
  int pad_after = 0;

  static ConvGeometry symmetric(int pad, int stride = 1) { return {stride, pad, pad}; }

  /// Output extent equals input extent at stride 1. Even kernels put the extra
  /// padding row/column after the data.
  static ConvGeometry same(int kernel) { return {1, (kernel - 1) / 2, kernel - 1 - (kernel - 1) / 2}; }

  std::size_t output_extent(std::size_t in, std::size_t kernel) const;
};

template <typename T>
struct LayerGrad
{
  BasicTensor<T> grad_input;
  BasicTensor<T> grad_kernel;
  BasicTensor<T> grad_bias;
};

/// Cross-correlation of a [Cin,H,W] input with a [Cout,Cin,K,K] kernel plus a
/// [Cout] bias. K must be 1, 2 or 3.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input,
                      const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias,
                      ConvGeometry geometry);

/// Gradients of conv2d. grad_input is left empty when want_input_grad is false.
template <typename T>
LayerGrad<T> conv2d_backward(const BasicTensor<T>& input,
                             const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_output,
                             ConvGeometry geometry,
                             bool want_input_grad = true);

/// 2x bilinear upsampling with half-pixel centres (align_corners = false);
/// source coordinates are clamped at the borders.
template <typename T>
BasicTensor<T> bilinear_upsample2x(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> bilinear_upsample2x_backward(const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// grad w.r.t. the relu input, given that input.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softplus_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_output);

double softplus(double x);
double sigmoid(double x);

/// Stack two [C,H,W] tensors along the channel axis.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Inverse of concat_channels for gradients: first `channels_a` planes go to `a`.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x,
                                                         std::size_t channels_a);

/// Glorot/Xavier uniform initializer: U(-L, L), L = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, int fan_in, int fan_out, std::mt19937_64& rng);

double glorot_limit(int fan_in, int fan_out);

} // namespace canopy
