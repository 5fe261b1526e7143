// SPDX-License-Identifier: Apache-2.0
#include <canopy/binary_io.hpp>
#include <canopy/model.hpp>

#include <nlohmann/json.hpp>

#include <fstream>

namespace canopy {

namespace {

constexpr char kMagic[9] = "CNPYCKPT";
constexpr std::uint32_t kVersion = 1;

nlohmann::json tensor_entry(const std::string& name, const Tensor& t)
{
  return {{"name", name}, {"shape", t.shape()}};
}

Tensor read_tensor(std::istream& is, const nlohmann::json& entry)
{
  Tensor t(entry.at("shape").get<Shape>());
  io::read_f32s(is, t.values());
  return t;
}

} // namespace

void save_checkpoint(const NetworkParams& params, const std::string& path)
{
  nlohmann::json header;
  header["config"] = params.config;
  header["adam_step"] = params.optimizer.step;
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : params.tensors) {
    auto e = tensor_entry(name, t);
    e["trainable"] = params.trainable.count(name) ? params.trainable.at(name) : true;
    table.push_back(std::move(e));
  }
  auto& moments = header["moments"] = nlohmann::json::array();
  for (const auto& [name, m] : params.optimizer.moments)
    moments.push_back(tensor_entry(name, m.m));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot open checkpoint for writing: " + path);
  io::write_magic(os, kMagic);
  io::write_u32(os, kVersion);
  io::write_string(os, header.dump());
  for (const auto& [name, t] : params.tensors)
    io::write_f32s(os, t.values());
  for (const auto& [name, m] : params.optimizer.moments) {
    io::write_f32s(os, m.m.values());
    io::write_f32s(os, m.v.values());
  }
  if (!os)
    throw std::runtime_error("failed writing checkpoint: " + path);
}

NetworkParams load_checkpoint(const std::string& path)
{
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open checkpoint: " + path);
  io::expect_magic(is, kMagic, "checkpoint");
  const std::uint32_t version = io::read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto header = nlohmann::json::parse(io::read_string(is));
  NetworkParams p;
  p.config = header.at("config").get<NetworkConfig>();
  p.config.validate();
  p.optimizer.step = header.at("adam_step").get<std::int64_t>();
  for (const auto& e : header.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    p.tensors[name] = read_tensor(is, e);
    p.trainable[name] = e.at("trainable").get<bool>();
  }
  for (const auto& e : header.at("moments")) {
    AdamMoments m;
    m.m = read_tensor(is, e);
    m.v = read_tensor(is, e);
    p.optimizer.moments.emplace(e.at("name").get<std::string>(), std::move(m));
  }
  return p;
}

} // namespace canopy
