// SPDX-License-Identifier: Apache-2.0
#include <canopy/tensor.hpp>

#include <cstring>

namespace canopy {

std::string shape_string(const Shape& shape)
{
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_volume(const Shape& shape)
{
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_bytes(std::uint64_t& h, const void* p, std::size_t n)
{
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= kFnvPrime;
  }
}

} // namespace

std::uint64_t checksum(const Tensor& tensor)
{
  std::uint64_t h = kFnvOffset;
  for (auto e : tensor.shape()) {
    const std::uint64_t v = e;
    fnv_bytes(h, &v, sizeof v);
  }
  fnv_bytes(h, tensor.data(), tensor.size() * sizeof(float));
  return h;
}

std::uint64_t checksum(const ParamMap<float>& params)
{
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : params) {
    fnv_bytes(h, name.data(), name.size());
    const std::uint64_t th = checksum(t);
    fnv_bytes(h, &th, sizeof th);
  }
  return h;
}

} // namespace canopy
