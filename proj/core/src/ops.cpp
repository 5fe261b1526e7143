// SPDX-License-Identifier: Apache-2.0
#include <canopy/ops.hpp>

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace canopy {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvDims
{
  std::size_t cin, h, w, cout, k, ho, wo;
};

template <typename T>
ConvDims check_conv(const BasicTensor<T>& input, const BasicTensor<T>& kernel, ConvGeometry g)
{
  if (input.rank() != 3 || kernel.rank() != 4 || kernel.extent(1) != input.extent(0) ||
      kernel.extent(2) != kernel.extent(3))
    throw std::invalid_argument("conv2d: input shape " + shape_string(input.shape()) +
                                " incompatible with kernel shape " + shape_string(kernel.shape()));
  const std::size_t k = kernel.extent(2);
  if (k < 1 || k > 3)
    throw std::invalid_argument("conv2d: kernel size must be 1, 2 or 3, kernel shape " +
                                shape_string(kernel.shape()));
  if (g.stride < 1 || g.pad_before < 0 || g.pad_after < 0)
    throw std::invalid_argument("conv2d: invalid stride/padding");
  ConvDims d{input.extent(0), input.extent(1), input.extent(2), kernel.extent(0), k, 0, 0};
  d.ho = g.output_extent(d.h, k);
  d.wo = g.output_extent(d.w, k);
  if (d.ho == 0 || d.wo == 0)
    throw std::invalid_argument("conv2d: input shape " + shape_string(input.shape()) +
                                " too small for kernel shape " + shape_string(kernel.shape()));
  return d;
}

bool is_pointwise(const ConvDims& d, ConvGeometry g)
{
  return d.k == 1 && g.stride == 1 && g.pad_before == 0 && g.pad_after == 0;
}

template <typename T>
RowMatrix<T> im2col(const BasicTensor<T>& input, const ConvDims& d, ConvGeometry g)
{
  RowMatrix<T> col(d.cin * d.k * d.k, d.ho * d.wo);
  const auto pb = static_cast<std::ptrdiff_t>(g.pad_before);
  const auto h = static_cast<std::ptrdiff_t>(d.h);
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = col.row((c * d.k + ky) * d.k + kx).data();
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * g.stride +
                                    static_cast<std::ptrdiff_t>(ky) - pb;
          T* dst = row + oy * d.wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + d.wo, T{0});
            continue;
          }
          const T* src = input.data() + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * g.stride +
                                      static_cast<std::ptrdiff_t>(kx) - pb;
            dst[ox] = (ix < 0 || ix >= w) ? T{0} : src[ix];
          }
        }
      }
  return col;
}

template <typename T>
void col2im(const RowMatrix<T>& col, const ConvDims& d, ConvGeometry g, BasicTensor<T>& out)
{
  const auto pb = static_cast<std::ptrdiff_t>(g.pad_before);
  const auto h = static_cast<std::ptrdiff_t>(d.h);
  const auto w = static_cast<std::ptrdiff_t>(d.w);
  for (std::size_t c = 0; c < d.cin; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = col.row((c * d.k + ky) * d.k + kx).data();
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * g.stride +
                                    static_cast<std::ptrdiff_t>(ky) - pb;
          if (iy < 0 || iy >= h)
            continue;
          T* dst = out.data() + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const T* src = row + oy * d.wo;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * g.stride +
                                      static_cast<std::ptrdiff_t>(kx) - pb;
            if (ix >= 0 && ix < w)
              dst[ix] += src[ox];
          }
        }
      }
}

struct UpsampleTap
{
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<UpsampleTap> upsample_taps(std::size_t n)
{
  std::vector<UpsampleTap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0)
      src = 0.0;
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double frac = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

} // namespace

std::size_t ConvGeometry::output_extent(std::size_t in, std::size_t kernel) const
{
  const std::size_t padded = in + static_cast<std::size_t>(pad_before + pad_after);
  if (padded < kernel)
    return 0;
  return (padded - kernel) / static_cast<std::size_t>(stride) + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input,
                      const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias,
                      ConvGeometry geometry)
{
  const ConvDims d = check_conv(input, kernel, geometry);
  if (bias.size() != d.cout)
    throw std::invalid_argument("conv2d: bias shape " + shape_string(bias.shape()) +
                                " does not match kernel shape " + shape_string(kernel.shape()));
  BasicTensor<T> out({d.cout, d.ho, d.wo});
  MatrixMap<T> y(out.data(), d.cout, d.ho * d.wo);
  ConstMatrixMap<T> wmat(kernel.data(), d.cout, d.cin * d.k * d.k);
  if (is_pointwise(d, geometry)) {
    ConstMatrixMap<T> x(input.data(), d.cin, d.h * d.w);
    y.noalias() = wmat * x;
  } else {
    const RowMatrix<T> col = im2col(input, d, geometry);
    y.noalias() = wmat * col;
  }
  for (std::size_t c = 0; c < d.cout; ++c)
    y.row(c).array() += bias[c];
  return out;
}

template <typename T>
LayerGrad<T> conv2d_backward(const BasicTensor<T>& input,
                             const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_output,
                             ConvGeometry geometry,
                             bool want_input_grad)
{
  const ConvDims d = check_conv(input, kernel, geometry);
  if (grad_output.shape() != Shape{d.cout, d.ho, d.wo})
    throw std::invalid_argument("conv2d_backward: grad_output shape " +
                                shape_string(grad_output.shape()) + " does not match output " +
                                shape_string({d.cout, d.ho, d.wo}));
  LayerGrad<T> g;
  g.grad_kernel = BasicTensor<T>(kernel.shape());
  g.grad_bias = BasicTensor<T>({d.cout});
  ConstMatrixMap<T> gy(grad_output.data(), d.cout, d.ho * d.wo);
  ConstMatrixMap<T> wmat(kernel.data(), d.cout, d.cin * d.k * d.k);
  MatrixMap<T> gw(g.grad_kernel.data(), d.cout, d.cin * d.k * d.k);
  // Fixed summation order, independent of alignment.
  for (std::size_t c = 0; c < d.cout; ++c) {
    const T* row = grad_output.data() + c * d.ho * d.wo;
    T s{0};
    for (std::size_t i = 0; i < d.ho * d.wo; ++i)
      s += row[i];
    g.grad_bias[c] = s;
  }

  if (is_pointwise(d, geometry)) {
    ConstMatrixMap<T> x(input.data(), d.cin, d.h * d.w);
    gw.noalias() = gy * x.transpose();
    if (want_input_grad) {
      g.grad_input = BasicTensor<T>(input.shape());
      MatrixMap<T> gx(g.grad_input.data(), d.cin, d.h * d.w);
      gx.noalias() = wmat.transpose() * gy;
    }
    return g;
  }

  const RowMatrix<T> col = im2col(input, d, geometry);
  gw.noalias() = gy * col.transpose();
  if (want_input_grad) {
    const RowMatrix<T> gcol = wmat.transpose() * gy;
    g.grad_input = BasicTensor<T>(input.shape());
    col2im(gcol, d, geometry, g.grad_input);
  }
  return g;
}

template <typename T>
BasicTensor<T> bilinear_upsample2x(const BasicTensor<T>& input)
{
  if (input.rank() != 3 || input.height() == 0 || input.width() == 0)
    throw std::invalid_argument("bilinear_upsample2x: bad input shape " +
                                shape_string(input.shape()));
  const std::size_t c = input.channels(), h = input.height(), w = input.width();
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  BasicTensor<T> out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const auto& b = tx[ox];
        const double v = a.w0 * (b.w0 * input.at(ch, a.i0, b.i0) + b.w1 * input.at(ch, a.i0, b.i1)) +
                         a.w1 * (b.w0 * input.at(ch, a.i1, b.i0) + b.w1 * input.at(ch, a.i1, b.i1));
        out.at(ch, oy, ox) = static_cast<T>(v);
      }
    }
  return out;
}

template <typename T>
BasicTensor<T> bilinear_upsample2x_backward(const BasicTensor<T>& grad_output)
{
  if (grad_output.rank() != 3 || grad_output.height() % 2 || grad_output.width() % 2)
    throw std::invalid_argument("bilinear_upsample2x_backward: bad gradient shape " +
                                shape_string(grad_output.shape()));
  const std::size_t c = grad_output.channels(), h = grad_output.height() / 2,
                    w = grad_output.width() / 2;
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  BasicTensor<T> gin({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const auto& b = tx[ox];
        const double g = grad_output.at(ch, oy, ox);
        gin.at(ch, a.i0, b.i0) += static_cast<T>(a.w0 * b.w0 * g);
        gin.at(ch, a.i0, b.i1) += static_cast<T>(a.w0 * b.w1 * g);
        gin.at(ch, a.i1, b.i0) += static_cast<T>(a.w1 * b.w0 * g);
        gin.at(ch, a.i1, b.i1) += static_cast<T>(a.w1 * b.w1 * g);
      }
    }
  return gin;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x)
{
  BasicTensor<T> y = x;
  for (auto& v : y.values())
    v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_output)
{
  if (x.shape() != grad_output.shape())
    throw std::invalid_argument("relu_backward: shape " + shape_string(x.shape()) + " vs " +
                                shape_string(grad_output.shape()));
  BasicTensor<T> g = grad_output;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > T{0}))
      g[i] = T{0};
  return g;
}

double softplus(double x)
{
  // Floor at the smallest normal double so the output stays strictly positive.
  return std::max(std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))),
                  std::numeric_limits<double>::min());
}

double sigmoid(double x)
{
  if (x >= 0.0)
    return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& x)
{
  BasicTensor<T> y = x;
  for (auto& v : y.values())
    v = std::max(static_cast<T>(softplus(static_cast<double>(v))), std::numeric_limits<T>::min());
  return y;
}

template <typename T>
BasicTensor<T> softplus_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_output)
{
  if (x.shape() != grad_output.shape())
    throw std::invalid_argument("softplus_backward: shape " + shape_string(x.shape()) + " vs " +
                                shape_string(grad_output.shape()));
  BasicTensor<T> g = grad_output;
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = static_cast<T>(g[i] * sigmoid(static_cast<double>(x[i])));
  return g;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
  if (a.rank() != 3 || b.rank() != 3 || a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("concat_channels: shape " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.storage().begin(), a.storage().end());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return BasicTensor<T>({a.channels() + b.channels(), a.height(), a.width()}, std::move(data));
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x,
                                                         std::size_t channels_a)
{
  if (x.rank() != 3 || channels_a > x.channels())
    throw std::invalid_argument("split_channels: shape " + shape_string(x.shape()));
  const std::size_t plane = x.height() * x.width();
  const auto mid = x.storage().begin() + static_cast<std::ptrdiff_t>(channels_a * plane);
  BasicTensor<T> a({channels_a, x.height(), x.width()}, std::vector<T>(x.storage().begin(), mid));
  BasicTensor<T> b({x.channels() - channels_a, x.height(), x.width()},
                   std::vector<T>(mid, x.storage().end()));
  return {std::move(a), std::move(b)};
}

double glorot_limit(int fan_in, int fan_out)
{
  if (fan_in <= 0 || fan_out <= 0)
    throw std::invalid_argument("glorot_uniform: fans must be positive, got " +
                                std::to_string(fan_in) + "/" + std::to_string(fan_out));
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor glorot_uniform(Shape shape, int fan_in, int fan_out, std::mt19937_64& rng)
{
  const double limit = glorot_limit(fan_in, fan_out);
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.values())
    v = static_cast<float>(dist(rng));
  return t;
}

#define CANOPY_INSTANTIATE_OPS(T)                                                               \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                 const BasicTensor<T>&, ConvGeometry);                         \
  template LayerGrad<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                        const BasicTensor<T>&, ConvGeometry, bool);            \
  template BasicTensor<T> bilinear_upsample2x(const BasicTensor<T>&);                          \
  template BasicTensor<T> bilinear_upsample2x_backward(const BasicTensor<T>&);                 \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> softplus(const BasicTensor<T>&);                                     \
  template BasicTensor<T> softplus_backward(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>&,     \
                                                                    std::size_t);

CANOPY_INSTANTIATE_OPS(float)
CANOPY_INSTANTIATE_OPS(double)

#undef CANOPY_INSTANTIATE_OPS

} // namespace canopy
