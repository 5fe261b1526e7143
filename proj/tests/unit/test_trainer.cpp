// SPDX-License-Identifier: Apache-2.0
#include <canopy/gedi.hpp>
#include <canopy/trainer.hpp>

#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>

using namespace canopy;

namespace {

TrainConfig small_config()
{
  TrainConfig c;
  c.network.encoder_channels = {4, 8};
  c.network.decoder_feature_dim = 6;
  c.network.head_hidden_dims = {4, 1};
  c.tile_size = 64;
  c.batch_size = 4;
  c.stage1_epochs = 4;
  c.initial_epochs = 2;
  c.swap_extra_epochs = 1;
  c.stage2_epochs = 1;
  c.stage3_epochs = 2;
  c.rh_epochs = 1;
  c.seed = 3;
  return c;
}

const std::vector<TileSample>& train_tiles()
{
  static const auto t = generate_dataset(11, 8, 64);
  return t;
}

const std::vector<TileSample>& val_tiles()
{
  static const auto t = generate_dataset(12, 3, 64);
  return t;
}

const Stage1Result& stage1()
{
  static const Stage1Result r = train_stage1(train_tiles(), val_tiles(), small_config(), nullptr);
  return r;
}

double mean_of(const Tensor& t)
{
  double s = 0;
  for (float v : t.values())
    s += v;
  return s / static_cast<double>(t.size());
}

} // namespace

TEST_CASE("learning-rate schedule")
{
  const std::size_t total = 1000, warm = 25;
  CHECK(lr_schedule(0, total, warm, 1e-7, 1e-4) == doctest::Approx(1e-7));
  CHECK(lr_schedule(warm, total, warm, 1e-7, 1e-4) == doctest::Approx(1e-4));
  CHECK(lr_schedule(10, total, warm, 1e-7, 1e-4) < lr_schedule(11, total, warm, 1e-7, 1e-4));
  const double last = lr_schedule(total - 1, total, warm, 1e-7, 1e-4);
  const double grid = lr_schedule(total - 2, total, warm, 1e-7, 1e-4) - last;
  CHECK(std::abs(last - 1e-7) <= grid + 1e-18);
  for (std::size_t s = warm + 1; s < total; ++s)
    CHECK(lr_schedule(s, total, warm, 1e-7, 1e-4) <= lr_schedule(s - 1, total, warm, 1e-7, 1e-4));
  CHECK_THROWS_AS(lr_schedule(total, total, warm, 1e-7, 1e-4), std::invalid_argument);
}

TEST_CASE("config validation and JSON round-trip")
{
  TrainConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  c.lr_min = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.stage1_epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.swap_extra_epochs = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.tile_size = 63;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("prepare_tiles splits double-size tiles")
{
  const auto big = generate_dataset(4, 1, 128);
  const auto parts = prepare_tiles(big, 64);
  CHECK(parts.size() <= 4);
  CHECK(!parts.empty());
  for (const auto& p : parts)
    CHECK(p.channels.shape() == Shape{13, 64, 64});
  CHECK_THROWS_AS(prepare_tiles(big, 32), std::invalid_argument);
}

TEST_CASE("stage 1: teacher immutability, iteration cadence, determinism")
{
  const Stage1Result& r = stage1();
  REQUIRE(!r.iterations.empty());
  CHECK(r.iterations[0].epochs == 2);
  int total = 0;
  for (const auto& it : r.iterations) {
    total += it.epochs;
    CHECK(it.teacher_checksum_before == it.teacher_checksum_after);
    CHECK(std::isfinite(it.val_mae));
  }
  CHECK(total <= 4);
  if (r.iterations.size() > 1)
    CHECK(r.iterations[1].epochs == 2); // budget truncates 2 + 1 to what is left
  const Stage1Result again = train_stage1(train_tiles(), val_tiles(), small_config(), nullptr);
  CHECK(checksum(again.params.tensors) == checksum(r.params.tensors));
}

TEST_CASE("stage 1 training loss decreases")
{
  TrainConfig c = small_config();
  c.student_teacher = false;
  c.soft_labels = false;
  c.stage1_epochs = 6;
  c.initial_epochs = 6;
  TrainLog log;
  const Stage1Result r = train_stage1(train_tiles(), {}, c, &log);
  CHECK(r.iterations.size() == 1);
  CHECK(std::isnan(r.val_mae));
  REQUIRE(log.rows().size() == 6);
  CHECK(log.rows().back().loss < log.rows().front().loss);
  for (const auto& row : log.rows())
    CHECK(row.lambda_s == 0.0);
}

TEST_CASE("stage 1 resumes from its checkpoint directory")
{
  const auto dir = std::filesystem::temp_directory_path() / "canopy_trainer_resume";
  std::filesystem::remove_all(dir);
  TrainConfig c = small_config();
  c.checkpoint_dir = dir.string();
  c.log_path = (dir / "log.csv").string();
  TrainLog log(c.log_path);
  const Stage1Result a = train_stage1(train_tiles(), val_tiles(), c, &log);
  CHECK(checksum(a.params.tensors) == checksum(stage1().params.tensors));
  CHECK(std::filesystem::exists(dir / "stage1" / "best.ckpt"));
  CHECK(std::filesystem::exists(dir / "log.csv"));
  {
    std::ifstream is(dir / "stage1" / "state.json");
    CHECK(nlohmann::json::parse(is)["done"].get<bool>());
  }
  // Same run in chunks of one epoch.
  std::filesystem::remove_all(dir);
  TrainConfig chunked = c;
  chunked.max_epochs_per_run = 1;
  int calls = 0;
  Stage1Result part;
  do {
    part = train_stage1(train_tiles(), val_tiles(), chunked, nullptr);
    ++calls;
  } while (!part.complete && calls < 20);
  CHECK(calls > 2);
  CHECK(checksum(part.params.tensors) == checksum(a.params.tensors));
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage 2 leaves the trunk and the sigma heads untouched")
{
  const NetworkParams& p1 = stage1().params;
  const NetworkParams p2 = train_stage2(p1, train_tiles(), small_config(), nullptr);
  CHECK(checksum(p2.trunk_tensors()) == checksum(p1.trunk_tensors()));
  for (const auto& [name, t] : p1.tensors)
    if (name.rfind("head.sigma", 0) == 0)
      CHECK(p2.tensors.at(name) == t);
  bool changed = false;
  for (const auto& n : head_tensor_names(p1.config, false, 0))
    changed |= p2.tensors.at(n) != p1.tensors.at(n);
  CHECK(changed);
}

TEST_CASE("stage 3: value heads frozen, sigma positive, larger lambda_reg shrinks sigma")
{
  TrainConfig c = small_config();
  c.calibrate_lambda_reg = false;
  const NetworkParams& p = stage1().params;
  c.lambda_reg = {0.0, 0.0, 0.0};
  const Stage3Result lo = train_stage3(p, train_tiles(), val_tiles(), c, nullptr);
  c.lambda_reg = {10.0, 10.0, 10.0};
  const Stage3Result hi = train_stage3(p, train_tiles(), val_tiles(), c, nullptr);
  for (const auto& [name, t] : p.tensors)
    if (name.rfind("head.sigma", 0) != 0)
      CHECK(lo.params.tensors.at(name) == t);
  const Prediction a = forward(lo.params, val_tiles()[0].channels);
  const Prediction b = forward(hi.params, val_tiles()[0].channels);
  for (std::size_t k = 0; k < a.sigma.size(); ++k) {
    for (float s : a.sigma[k].values())
      CHECK(s > 0.0f);
    CHECK(mean_of(b.sigma[k]) < mean_of(a.sigma[k]));
  }
  CHECK(lo.coverage.size() == 3);
  for (double cov : lo.coverage) {
    CHECK(cov >= 0.0);
    CHECK(cov <= 1.0);
  }
}

TEST_CASE("RH fine-tuning adds seven heads and keeps the base model")
{
  const NetworkParams& p = stage1().params;
  const NetworkParams f = finetune_rh(p, train_tiles(), small_config(), nullptr);
  CHECK(f.config.n_value_heads == p.config.n_value_heads + 7);
  for (const auto& [name, t] : p.tensors)
    CHECK(f.tensors.at(name) == t);
  const Prediction pred = forward(f, val_tiles()[0].channels);
  const auto names = rh_variable_names();
  for (std::size_t i = 0; i < 64 * 64; i += 97)
    for (std::size_t k = 1; k < names.size(); ++k)
      CHECK(pred.value_of(names[k])[i] >= pred.value_of(names[k - 1])[i]);

  auto broken = train_tiles();
  broken[0].points[0].rh[2] = std::nanf("");
  CHECK_THROWS_AS(finetune_rh(p, broken, small_config(), nullptr), std::invalid_argument);
}

TEST_CASE("allometric biomass from RH maps")
{
  Prediction p;
  for (const auto& n : rh_variable_names()) {
    p.names.push_back(n);
    p.value.push_back(Tensor({1, 2}, {1000.0f, 0.0f}));
  }
  const Tensor agb = rh_allometric_agbd(p, 0.5, 1.3, 0.1);
  CHECK(agb[0] == doctest::Approx(std::exp(0.5 + 1.3 * std::log(10.0) + 0.1)));
  CHECK(agb[1] == 0.0f);
}
