// SPDX-License-Identifier: Apache-2.0
#include <canopy/binary_io.hpp>
#include <canopy/gedi.hpp>

#include <nlohmann/json.hpp>

#include <fstream>

namespace canopy {

namespace {

constexpr char kMagic[9] = "CNPYDSET";
constexpr std::uint32_t kVersion = 1;

void write_point(std::ostream& os, const PointLabel& p)
{
  io::write_i32(os, p.row);
  io::write_i32(os, p.col);
  io::write_f32(os, p.agbd);
  io::write_f32s(os, p.rh);
  io::write_f32(os, p.cc);
  io::write_f32(os, p.se);
  io::write_u8(os, static_cast<std::uint8_t>(p.pft));
  io::write_u8(os, p.quality ? 1 : 0);
}

PointLabel read_point(std::istream& is)
{
  PointLabel p;
  p.row = io::read_i32(is);
  p.col = io::read_i32(is);
  p.agbd = io::read_f32(is);
  io::read_f32s(is, p.rh);
  p.cc = io::read_f32(is);
  p.se = io::read_f32(is);
  const std::uint8_t pft = io::read_u8(is);
  if (pft > static_cast<std::uint8_t>(Pft::GSW))
    throw std::runtime_error("dataset: invalid PFT code " + std::to_string(pft));
  p.pft = static_cast<Pft>(pft);
  p.quality = io::read_u8(is) != 0;
  return p;
}

Tensor read_tensor(std::istream& is, const Shape& shape)
{
  Tensor t(shape);
  io::read_f32s(is, t.values());
  return t;
}

} // namespace

void save_dataset(const std::vector<TileSample>& tiles, const std::string& path)
{
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot open dataset for writing: " + path);
  io::write_magic(os, kMagic);
  io::write_u32(os, kVersion);
  io::write_u32(os, static_cast<std::uint32_t>(tiles.size()));
  for (const auto& t : tiles) {
    nlohmann::json header;
    header["lon"] = t.lon;
    header["lat"] = t.lat;
    header["seed"] = t.seed;
    header["shape"] = t.channels.shape();
    header["n_points"] = t.points.size();
    header["gap"] = !t.gap.empty();
    auto& latent = header["latent"] = nlohmann::json::array();
    for (const auto& [name, m] : t.latent)
      latent.push_back({{"name", name}, {"shape", m.shape()}});
    io::write_string(os, header.dump());
    io::write_f32s(os, t.channels.values());
    if (!t.gap.empty())
      io::write_f32s(os, t.gap.values());
    for (const auto& [name, m] : t.latent)
      io::write_f32s(os, m.values());
    for (const auto& p : t.points)
      write_point(os, p);
  }
  if (!os)
    throw std::runtime_error("failed writing dataset: " + path);
}

std::vector<TileSample> load_dataset(const std::string& path)
{
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open dataset: " + path);
  io::expect_magic(is, kMagic, "dataset");
  const std::uint32_t version = io::read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  const std::uint32_t n = io::read_u32(is);
  std::vector<TileSample> tiles;
  tiles.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto header = nlohmann::json::parse(io::read_string(is));
    TileSample t;
    t.lon = header.at("lon").get<double>();
    t.lat = header.at("lat").get<double>();
    t.seed = header.at("seed").get<std::uint64_t>();
    const auto shape = header.at("shape").get<Shape>();
    if (shape.size() != 3)
      throw std::runtime_error("dataset: tile " + std::to_string(i) + " has channel shape " +
                               shape_string(shape));
    t.channels = read_tensor(is, shape);
    if (header.at("gap").get<bool>())
      t.gap = read_tensor(is, {shape[1], shape[2]});
    for (const auto& e : header.at("latent"))
      t.latent[e.at("name").get<std::string>()] = read_tensor(is, e.at("shape").get<Shape>());
    const auto n_points = header.at("n_points").get<std::size_t>();
    t.points.reserve(n_points);
    for (std::size_t k = 0; k < n_points; ++k)
      t.points.push_back(read_point(is));
    tiles.push_back(std::move(t));
  }
  return tiles;
}

} // namespace canopy
