// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace canopy {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_volume(const Shape& shape);

//! Dense row-major array. Feature maps are stored as [channels, height, width].
template <typename T>
class BasicTensor
{
public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
    : shape_(std::move(shape))
    , data_(shape_volume(shape_), fill)
  {}

  BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape))
    , data_(std::move(data))
  {
    if (data_.size() != shape_volume(shape_))
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // [C,H,W] accessors
  std::size_t channels() const { return shape_.at(0); }
  std::size_t height() const { return shape_.at(1); }
  std::size_t width() const { return shape_.at(2); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t y, std::size_t x)
  {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const
  {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  /// [H,W] maps.
  T& at(std::size_t y, std::size_t x) { return data_[y * shape_[1] + x]; }
  const T& at(std::size_t y, std::size_t x) const { return data_[y * shape_[1] + x]; }

  //! View of one channel plane of a [C,H,W] tensor.
  std::span<T> plane(std::size_t c)
  {
    const std::size_t n = shape_.at(1) * shape_.at(2);
    return std::span<T>(data_).subspan(c * n, n);
  }
  std::span<const T> plane(std::size_t c) const
  {
    const std::size_t n = shape_.at(1) * shape_.at(2);
    return std::span<const T>(data_).subspan(c * n, n);
  }

  void reshape(Shape shape)
  {
    if (shape_volume(shape) != data_.size())
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " +
                                  shape_string(shape));
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  BasicTensor<U> cast() const
  {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  BasicTensor& operator+=(const BasicTensor& other)
  {
    if (other.shape_ != shape_)
      throw std::invalid_argument("tensor add: shape " + shape_string(shape_) + " vs " +
                                  shape_string(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i)
      data_[i] += other.data_[i];
    return *this;
  }

  BasicTensor& operator*=(T s)
  {
    for (auto& v : data_)
      v *= s;
    return *this;
  }

  bool operator==(const BasicTensor& other) const = default;

private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

//! Named tensors in deterministic (lexicographic) order.
template <typename T>
using ParamMap = std::map<std::string, BasicTensor<T>>;

template <typename U, typename T>
ParamMap<U> cast_params(const ParamMap<T>& params)
{
  ParamMap<U> out;
  for (const auto& [name, t] : params)
    out.emplace(name, t.template cast<U>());
  return out;
}

//! FNV-1a over the raw bytes of every tensor, names included.
std::uint64_t checksum(const ParamMap<float>& params);
std::uint64_t checksum(const Tensor& tensor);

} // namespace canopy
