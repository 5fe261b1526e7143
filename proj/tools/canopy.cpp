// SPDX-License-Identifier: Apache-2.0
// canopy: command-line front end for dataset synthesis, training,
// evaluation, deployment and change accounting.

#include <canopy/deploy.hpp>
#include <canopy/eval.hpp>
#include <canopy/gedi.hpp>
#include <canopy/trainer.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace canopy;

namespace {

nlohmann::json read_json(const std::string& path)
{
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed JSON in " + path + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j)
{
  if (!path.parent_path().empty())
    fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

struct Options
{
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stage = "1";
  std::string data, val, init, model;
  std::size_t tiles = 200;
  std::size_t size = 64;
  std::size_t index = 0;
  std::size_t tile = 128;
  std::size_t pad = 32;
  unsigned threads = 1;
  std::string t1, t2, period = "t1-t2";
};

TrainConfig train_config(const Options& o)
{
  TrainConfig c;
  if (!o.config.empty())
    c = read_json(o.config).get<TrainConfig>();
  if (o.seed)
    c.seed = *o.seed;
  c.validate();
  return c;
}

void need(const std::string& value, const std::string& flag)
{
  if (value.empty())
    throw std::invalid_argument(flag + " is required");
}

int cmd_synth(const Options& o)
{
  need(o.out, "--out");
  SynthConfig sc;
  if (!o.config.empty())
    sc = read_json(o.config).get<SynthConfig>();
  const auto tiles = generate_dataset(o.seed.value_or(1), o.tiles, o.size, sc);
  if (const auto parent = fs::path(o.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_dataset(tiles, o.out);
  return 0;
}

int cmd_train(const Options& o)
{
  need(o.out, "--out");
  need(o.data, "--data");
  TrainConfig c = train_config(o);
  const fs::path out(o.out);
  fs::create_directories(out);
  if (c.checkpoint_dir.empty())
    c.checkpoint_dir = out.string();
  if (c.log_path.empty())
    c.log_path = (out / "train_log.csv").string();
  TrainLog log(c.log_path);
  const auto train = load_dataset(o.data);
  const auto val = o.val.empty() ? std::vector<TileSample>{} : load_dataset(o.val);
  auto init = [&](const std::string& fallback) {
    const std::string path = o.init.empty() ? (out / fallback).string() : o.init;
    return load_checkpoint(path);
  };

  if (o.stage == "1") {
    const Stage1Result r = train_stage1(train, val, c, &log);
    nlohmann::json iters = nlohmann::json::array();
    for (const auto& it : r.iterations)
      iters.push_back({{"iteration", it.iteration},
                       {"epochs", it.epochs},
                       {"val_mae", std::isfinite(it.val_mae) ? nlohmann::json(it.val_mae) : nlohmann::json()}});
    if (!r.complete) {
      std::cout << nlohmann::json{{"stage", 1}, {"complete", false}}.dump() << '\n';
      return 0;
    }
    save_checkpoint(r.params, (out / "stage1.ckpt").string());
    write_json(out / "stage1.json",
               {{"val_mae", std::isfinite(r.val_mae) ? nlohmann::json(r.val_mae) : nlohmann::json()},
                {"iterations", iters}});
  } else if (o.stage == "2") {
    save_checkpoint(train_stage2(init("stage1.ckpt"), train, c, &log), (out / "stage2.ckpt").string());
  } else if (o.stage == "3") {
    const Stage3Result r = train_stage3(init("stage2.ckpt"), train, val, c, &log);
    save_checkpoint(r.params, (out / "stage3.ckpt").string());
    nlohmann::json cov = nlohmann::json::array();
    for (double v : r.coverage)
      cov.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json());
    write_json(out / "stage3.json", {{"variables", c.base_variables()}, {"lambda_reg", r.lambda_reg}, {"coverage", cov}});
  } else {
    throw std::invalid_argument("--stage must be 1, 2 or 3, got '" + o.stage + "'");
  }
  return 0;
}

int cmd_finetune_rh(const Options& o)
{
  need(o.out, "--out");
  need(o.data, "--data");
  need(o.init, "--init");
  TrainConfig c = train_config(o);
  TrainLog log(c.log_path);
  const NetworkParams p = finetune_rh(load_checkpoint(o.init), load_dataset(o.data), c, &log);
  if (const auto parent = fs::path(o.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_checkpoint(p, o.out);
  return 0;
}

int cmd_eval(const Options& o)
{
  need(o.out, "--out");
  need(o.data, "--data");
  need(o.model, "--model");
  const EvalReport r = evaluate(load_checkpoint(o.model), load_dataset(o.data), o.seed.value_or(1));
  write_report(r, o.out);
  return 0;
}

int cmd_deploy(const Options& o)
{
  need(o.out, "--out");
  need(o.data, "--data");
  need(o.model, "--model");
  const auto tiles = load_dataset(o.data);
  if (o.index >= tiles.size())
    throw std::invalid_argument("--index " + std::to_string(o.index) + " outside a dataset of " +
                                std::to_string(tiles.size()) + " tiles");
  const TileSample& t = tiles[o.index];
  Raster r;
  r.channels = t.channels;
  r.gap = t.gap;
  r.lon = t.lon;
  r.lat = t.lat;
  DeployGrid g;
  g.tile_size = o.tile;
  g.pad = o.pad;
  const DeployOutput out = tiled_inference(load_checkpoint(o.model), r, g, o.threads);
  write_deploy_output(out, r, o.out);
  return 0;
}

int cmd_change(const Options& o)
{
  need(o.t1, "--t1");
  need(o.t2, "--t2");
  need(o.out, "--out");
  auto band = [](const std::string& dir, const std::string& name) { return read_band((fs::path(dir) / name).string()); };
  const Tensor ch1 = band(o.t1, "ch");
  const ChangeResult r = change_detection(band(o.t1, "cc"), band(o.t2, "cc"), forest_mask(ch1),
                                          band(o.t1, "agbd"), band(o.t2, "agbd"), o.period);
  ChangeReport report;
  report.entries.push_back(r.entry);
  write_json(o.out, report);
  RasterMeta meta;
  read_band((fs::path(o.t1) / "cc").string(), &meta);
  meta.band = "loss_mask";
  meta.units = "flag";
  meta.mask.clear();
  write_band((fs::path(o.out).parent_path() / "loss_mask").string(), r.loss_mask, meta);
  return 0;
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"canopy: sparse-label canopy structure and biomass toolkit"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--out", o.out, "output path");
  };
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  common(synth);
  synth->add_option("--tiles", o.tiles, "number of tiles")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "tile edge in pixels")->check(CLI::Range(64, 4096));

  auto* train = app.add_subcommand("train", "run one training stage (resumes from --out)");
  common(train);
  train->add_option("--stage", o.stage, "1, 2 or 3");
  train->add_option("--data", o.data, "training dataset");
  train->add_option("--val", o.val, "validation dataset");
  train->add_option("--init", o.init, "input checkpoint for stages 2 and 3");

  auto* rh = app.add_subcommand("finetune-rh", "add and train the seven RH heads");
  common(rh);
  rh->add_option("--data", o.data, "training dataset");
  rh->add_option("--init", o.init, "base checkpoint");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  common(ev);
  ev->add_option("--model", o.model, "checkpoint");
  ev->add_option("--data", o.data, "dataset");

  auto* dep = app.add_subcommand("deploy", "tiled inference on one dataset scene");
  common(dep);
  dep->add_option("--model", o.model, "checkpoint");
  dep->add_option("--data", o.data, "dataset holding the scene");
  dep->add_option("--index", o.index, "scene index");
  dep->add_option("--tile", o.tile, "tile size");
  dep->add_option("--pad", o.pad, "padding");
  dep->add_option("--threads", o.threads, "worker threads");

  auto* chg = app.add_subcommand("change", "tree-cover loss between two deploy outputs");
  common(chg);
  chg->add_option("--t1", o.t1, "deploy output, first date");
  chg->add_option("--t2", o.t2, "deploy output, second date");
  chg->add_option("--period", o.period, "label of the period");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed"))
    o.seed = seed;
  const std::string name = sub->get_name();
  try {
    if (name == "synth")
      return cmd_synth(o);
    if (name == "train")
      return cmd_train(o);
    if (name == "finetune-rh")
      return cmd_finetune_rh(o);
    if (name == "eval")
      return cmd_eval(o);
    if (name == "deploy")
      return cmd_deploy(o);
    return cmd_change(o);
  } catch (const std::invalid_argument& e) {
    std::cerr << nlohmann::json{{"error", "invalid_argument"}, {"command", name}, {"message", e.what()}}.dump() << '\n';
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "runtime_error"}, {"command", name}, {"message", e.what()}}.dump() << '\n';
  }
  return 1;
}
