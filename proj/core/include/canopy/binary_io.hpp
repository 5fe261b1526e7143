// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian primitives shared by the dataset, checkpoint and raster formats.
namespace canopy::io {

template <typename U>
U byteswap_if_big(U v)
{
  if constexpr (std::endian::native == std::endian::big) {
    U out{};
    auto* s = reinterpret_cast<const unsigned char*>(&v);
    auto* d = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i)
      d[i] = s[sizeof(U) - 1 - i];
    return out;
  } else {
    return v;
  }
}

inline void write_u32(std::ostream& os, std::uint32_t v)
{
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_i32(std::ostream& os, std::int32_t v)
{
  write_u32(os, static_cast<std::uint32_t>(v));
}

inline void write_u8(std::ostream& os, std::uint8_t v)
{
  os.write(reinterpret_cast<const char*>(&v), 1);
}

inline void write_f32(std::ostream& os, float f)
{
  write_u32(os, std::bit_cast<std::uint32_t>(f));
}

inline void write_f32s(std::ostream& os, std::span<const float> values)
{
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values)
      write_f32(os, f);
  }
}

inline void write_string(std::ostream& os, const std::string& s)
{
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void require(std::istream& is, const char* what)
{
  if (!is)
    throw std::runtime_error(std::string("truncated input while reading ") + what);
}

inline std::uint32_t read_u32(std::istream& is)
{
  std::uint32_t v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  require(is, "u32");
  return byteswap_if_big(v);
}

inline std::int32_t read_i32(std::istream& is)
{
  return static_cast<std::int32_t>(read_u32(is));
}

inline std::uint8_t read_u8(std::istream& is)
{
  std::uint8_t v{};
  is.read(reinterpret_cast<char*>(&v), 1);
  require(is, "u8");
  return v;
}

inline float read_f32(std::istream& is)
{
  return std::bit_cast<float>(read_u32(is));
}

inline void read_f32s(std::istream& is, std::span<float> out)
{
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(out.size() * sizeof(float)));
    require(is, "float block");
  } else {
    for (float& f : out)
      f = read_f32(is);
  }
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 28)
{
  const std::uint32_t n = read_u32(is);
  if (n > max_len)
    throw std::runtime_error("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(is, "string");
  return s;
}

inline void write_magic(std::ostream& os, const char (&magic)[9])
{
  os.write(magic, 8);
}

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& what)
{
  char buf[8]{};
  is.read(buf, 8);
  if (!is || std::memcmp(buf, magic, 8) != 0)
    throw std::runtime_error("not a " + what + " file (bad magic)");
}

} // namespace canopy::io
