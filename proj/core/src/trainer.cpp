// SPDX-License-Identifier: Apache-2.0
#include <canopy/eval.hpp>
#include <canopy/loss.hpp>
#include <canopy/softlabel.hpp>
#include <canopy/trainer.hpp>
#include <canopy/weighting.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

namespace canopy {

void TrainConfig::validate() const
{
  network.validate();
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid train config: " + what);
  };
  if (tile_size == 0 || tile_size % network.divisor())
    fail("tile_size must be a positive multiple of " + std::to_string(network.divisor()));
  if (batch_size == 0)
    fail("batch_size must be positive");
  if (stage1_epochs <= 0 || stage2_epochs <= 0 || stage3_epochs <= 0 || rh_epochs <= 0)
    fail("epochs must be positive");
  if (initial_epochs <= 0 || initial_epochs > stage1_epochs)
    fail("initial_epochs must be in [1, stage1_epochs]");
  if (swap_extra_epochs < 0)
    fail("swap_extra_epochs must be non-negative");
  if (!(lr_min > 0.0) || !(lr_min < lr_peak) || !(lr_min < head_lr_peak))
    fail("need 0 < lr_min < lr_peak");
  if (warmup_epochs < 0.0)
    fail("warmup_epochs must be non-negative");
  if (!(lambda_h > 0.0) || stage2_lambda_s < 0.0)
    fail("lambda_h must be positive and stage2_lambda_s non-negative");
  const auto n_base = static_cast<std::size_t>(network.n_value_heads - network.n_extended_heads);
  if (alpha.size() != n_base || lambda_reg.size() != n_base)
    fail("alpha and lambda_reg need one entry per base head");
  for (double a : alpha)
    if (a < 0.0)
      fail("alpha must be non-negative");
  for (double l : lambda_reg)
    if (l < 0.0)
      fail("lambda_reg must be non-negative");
  if (!(target_coverage > 0.0 && target_coverage < 1.0))
    fail("target_coverage must be in (0,1)");
  if (balance_bins == 0)
    fail("balance_bins must be positive");
  if (max_epochs_per_run < 0)
    fail("max_epochs_per_run must be non-negative");
}

std::vector<std::string> TrainConfig::base_variables() const
{
  const auto n_base = static_cast<std::size_t>(network.n_value_heads - network.n_extended_heads);
  return {network.head_names.begin(), network.head_names.begin() + static_cast<long>(n_base)};
}

void to_json(nlohmann::json& j, const TrainConfig& c)
{
  j = nlohmann::json{{"network", c.network},
                     {"tile_size", c.tile_size},
                     {"batch_size", c.batch_size},
                     {"stage1_epochs", c.stage1_epochs},
                     {"initial_epochs", c.initial_epochs},
                     {"swap_extra_epochs", c.swap_extra_epochs},
                     {"stage2_epochs", c.stage2_epochs},
                     {"stage3_epochs", c.stage3_epochs},
                     {"rh_epochs", c.rh_epochs},
                     {"warmup_epochs", c.warmup_epochs},
                     {"lr_min", c.lr_min},
                     {"lr_peak", c.lr_peak},
                     {"head_lr_peak", c.head_lr_peak},
                     {"seed", c.seed},
                     {"student_teacher", c.student_teacher},
                     {"soft_labels", c.soft_labels},
                     {"lambda_h", c.lambda_h},
                     {"stage2_lambda_s", c.stage2_lambda_s},
                     {"alpha", c.alpha},
                     {"lambda_reg", c.lambda_reg},
                     {"calibrate_lambda_reg", c.calibrate_lambda_reg},
                     {"target_coverage", c.target_coverage},
                     {"convergence_tol", c.convergence_tol},
                     {"balance_bins", c.balance_bins},
                     {"balance_min_keep", c.balance_min_keep},
                     {"sample_weights", c.sample_weights},
                     {"checkpoint_dir", c.checkpoint_dir},
                     {"log_path", c.log_path},
                     {"max_epochs_per_run", c.max_epochs_per_run}};
}

void from_json(const nlohmann::json& j, TrainConfig& c)
{
  const TrainConfig d;
  c.network = j.value("network", d.network);
  c.tile_size = j.value("tile_size", d.tile_size);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
  c.initial_epochs = j.value("initial_epochs", d.initial_epochs);
  c.swap_extra_epochs = j.value("swap_extra_epochs", d.swap_extra_epochs);
  c.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
  c.stage3_epochs = j.value("stage3_epochs", d.stage3_epochs);
  c.rh_epochs = j.value("rh_epochs", d.rh_epochs);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.lr_peak = j.value("lr_peak", d.lr_peak);
  c.head_lr_peak = j.value("head_lr_peak", d.head_lr_peak);
  c.seed = j.value("seed", d.seed);
  c.student_teacher = j.value("student_teacher", d.student_teacher);
  c.soft_labels = j.value("soft_labels", d.soft_labels);
  c.lambda_h = j.value("lambda_h", d.lambda_h);
  c.stage2_lambda_s = j.value("stage2_lambda_s", d.stage2_lambda_s);
  c.alpha = j.value("alpha", d.alpha);
  c.lambda_reg = j.value("lambda_reg", d.lambda_reg);
  c.calibrate_lambda_reg = j.value("calibrate_lambda_reg", d.calibrate_lambda_reg);
  c.target_coverage = j.value("target_coverage", d.target_coverage);
  c.convergence_tol = j.value("convergence_tol", d.convergence_tol);
  c.balance_bins = j.value("balance_bins", d.balance_bins);
  c.balance_min_keep = j.value("balance_min_keep", d.balance_min_keep);
  c.sample_weights = j.value("sample_weights", d.sample_weights);
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.log_path = j.value("log_path", d.log_path);
  c.max_epochs_per_run = j.value("max_epochs_per_run", d.max_epochs_per_run);
  c.validate();
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double lr_min, double lr_peak)
{
  if (total_steps == 0 || step >= total_steps)
    throw std::invalid_argument("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + ")");
  if (step < warmup_steps)
    return lr_min + (lr_peak - lr_min) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::size_t span = total_steps - 1 - std::min(warmup_steps, total_steps - 1);
  if (span == 0)
    return step == total_steps - 1 && warmup_steps < total_steps - 1 ? lr_min : lr_peak;
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

std::string csv_field(double v)
{
  if (!std::isfinite(v))
    return "";
  return nlohmann::json(v).dump();
}

} // namespace

TrainLog::TrainLog(const std::string& csv_path)
  : path_(csv_path)
{
  if (path_.empty())
    return;
  if (!std::filesystem::exists(path_)) {
    if (const auto parent = std::filesystem::path(path_).parent_path(); !parent.empty())
      std::filesystem::create_directories(parent);
    std::ofstream os(path_);
    if (!os)
      throw std::runtime_error("cannot write training log: " + path_);
    os << "stage,iteration,epoch,loss,lr,lambda_s,coverage,val_mae\n";
  }
}

void TrainLog::append(const LogRow& row)
{
  rows_.push_back(row);
  if (path_.empty())
    return;
  std::ofstream os(path_, std::ios::app);
  os << row.stage << ',' << row.iteration << ',' << row.epoch << ',' << csv_field(row.loss) << ','
     << csv_field(row.lr) << ',' << csv_field(row.lambda_s) << ',' << csv_field(row.coverage) << ','
     << csv_field(row.val_mae) << '\n';
}

std::vector<TileSample> prepare_tiles(const std::vector<TileSample>& tiles, std::size_t tile_size)
{
  std::vector<TileSample> out;
  for (const auto& t : tiles) {
    std::vector<TileSample> parts;
    if (t.height() == tile_size && t.width() == tile_size)
      parts.push_back(t);
    else if (t.height() == 2 * tile_size && t.width() == 2 * tile_size)
      parts = split_tile(t, 2);
    else
      throw std::invalid_argument("tile of " + std::to_string(t.height()) + "x" +
                                  std::to_string(t.width()) + " does not match tile_size " +
                                  std::to_string(tile_size) + " (or twice it)");
    for (auto& p : parts)
      if (!p.quality_points().empty())
        out.push_back(std::move(p));
  }
  return out;
}

Tensor rh_allometric_agbd(const Prediction& prediction, double a, double b, double re_site)
{
  std::vector<const Tensor*> maps;
  for (const auto& name : rh_variable_names())
    maps.push_back(&prediction.value_of(name));
  Tensor out(maps.front()->shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (const Tensor* m : maps)
      s += (*m)[i];
    const double lcm = s / static_cast<double>(maps.size()) / 100.0;
    out[i] = lcm > 0.0 ? static_cast<float>(allometric_agb(lcm, a, b, re_site)) : 0.0f;
  }
  return out;
}

namespace {

struct Job
{
  const TrainConfig* config;
  TrainLog* log;
};

void log_row(TrainLog* log, const LogRow& row)
{
  if (log)
    log->append(row);
}

std::vector<WeightTable> fit_tables(const std::vector<TileSample>& tiles,
                                    const std::vector<std::string>& variables)
{
  std::vector<WeightTable> out;
  for (const auto& v : variables) {
    std::vector<double> values;
    for (const auto& t : tiles)
      for (const auto& p : t.points)
        if (p.quality)
          values.push_back(p.value(v));
    out.push_back(fit_weight_table(v, values));
  }
  return out;
}

double tile_weight(const TileSample& t, const WeightTable& table, const std::string& variable)
{
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& p : t.points)
    if (p.quality) {
      s += table.lookup(p.value(variable));
      ++n;
    }
  return n ? s / static_cast<double>(n) : 1.0;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed)
{
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch)
{
  return (n + batch - 1) / batch;
}

std::size_t warmup_steps(const TrainConfig& c, std::size_t per_epoch)
{
  return static_cast<std::size_t>(std::llround(c.warmup_epochs * static_cast<double>(per_epoch)));
}

/// Checksum of every tensor that the freeze mask protects.
std::uint64_t frozen_checksum(const NetworkParams& p)
{
  ParamMap<float> frozen;
  for (const auto& [name, t] : p.tensors)
    if (!p.trainable.at(name))
      frozen.emplace(name, t);
  return checksum(frozen);
}

void optimizer_step(NetworkParams& p, ParamMap<float>& grads, double lr, const std::string& where)
{
  const std::uint64_t before = frozen_checksum(p);
  AdamConfig ac;
  ac.lr = lr;
  try {
    adam_step(p.tensors, grads, p.optimizer, ac, p.frozen_names());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
  if (frozen_checksum(p) != before)
    throw std::logic_error(where + ": a frozen tensor changed during the optimizer step");
  grads.clear();
}

// ---------------------------------------------------------------- stage 1

struct FullSample
{
  const Tensor* input;
  const LabelMap* targets;
  double weight;
};

/// Accumulates the gradient of one sample's loss (times grad_scale) and returns the loss.
double full_sample_gradient(const NetworkParams& net,
                            const FullSample& s,
                            const std::vector<std::string>& variables,
                            const TrainConfig& cfg,
                            double lambda_s,
                            double grad_scale,
                            ParamMap<float>& grads)
{
  const NetworkConfig& nc = net.config;
  NetCache<float> cache;
  const Tensor features = trunk_forward(nc, net.tensors, *s.input, &cache);
  HeadSelection sel = HeadSelection::none(nc);
  std::vector<int> heads;
  for (const auto& v : variables) {
    const int h = nc.head_index(v);
    heads.push_back(h);
    sel.value[static_cast<std::size_t>(h)] = true;
  }
  const HeadOutputs<float> out = heads_forward(nc, net.tensors, features, sel, &cache);
  HeadGrads<float> hg;
  hg.value.resize(out.value.size());
  hg.sigma.resize(out.sigma.size());
  const Tensor w = balance_weights(s.targets->mask, cfg.lambda_h, lambda_s);
  std::vector<double> balanced;
  for (std::size_t k = 0; k < variables.size(); ++k) {
    const auto h = static_cast<std::size_t>(heads[k]);
    Tensor target = s.targets->target[k];
    target *= 1.0f / nc.head_scales[h];
    const NllMap<float> nm = nll_map(out.value[h], target, Tensor{}, 0.0, true);
    balanced.push_back(balance(nm.loss, s.targets->mask, cfg.lambda_h, lambda_s));
    Tensor g = nm.d_pred;
    const auto factor = static_cast<float>(cfg.alpha[k] * s.weight * grad_scale);
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] *= w[i] * factor;
    hg.value[h] = std::move(g);
  }
  const Tensor gf = heads_backward(nc, net.tensors, cache, hg, grads, true);
  trunk_backward(nc, net.tensors, cache, gf, grads);
  return total_loss(balanced, cfg.alpha, s.weight);
}

struct Stage1Data
{
  std::vector<TileSample> tiles;
  std::vector<std::string> variables;
  std::vector<LabelMap> hard;
  std::vector<LabelMap> spectral; ///< filled when soft labels are enabled
  std::vector<double> weight;
};

Stage1Data prepare_stage1(const std::vector<TileSample>& train, const TrainConfig& cfg)
{
  Stage1Data d;
  d.tiles = prepare_tiles(train, cfg.tile_size);
  if (d.tiles.empty())
    throw std::invalid_argument("stage 1: no training tile has quality footprints");
  d.variables = cfg.base_variables();
  const auto tables = fit_tables(d.tiles, d.variables);
  for (const auto& t : d.tiles) {
    const auto pts = t.quality_points();
    d.hard.push_back(hard_labels(pts, t.height(), t.width(), d.variables));
    if (cfg.soft_labels)
      d.spectral.push_back(spectral_soft_labels(t.channels, pts, d.variables));
    double w = 1.0;
    if (cfg.sample_weights) {
      w = 0.0;
      for (std::size_t k = 0; k < d.variables.size(); ++k)
        w += tile_weight(t, tables[k], d.variables[k]);
      w /= static_cast<double>(d.variables.size());
    }
    d.weight.push_back(w);
  }
  return d;
}

struct Stage1State
{
  int iteration = 0;
  int next_epoch = 0;    ///< within the iteration
  int global_epoch = 0;  ///< epochs completed before this iteration
  bool done = false;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<IterationRecord> records;
};

nlohmann::json state_to_json(const Stage1State& s)
{
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : s.records)
    recs.push_back({{"iteration", r.iteration},
                    {"epochs", r.epochs},
                    {"val_mae", std::isfinite(r.val_mae) ? nlohmann::json(r.val_mae) : nlohmann::json()},
                    {"teacher_checksum_before", r.teacher_checksum_before},
                    {"teacher_checksum_after", r.teacher_checksum_after}});
  return {{"iteration", s.iteration},
          {"next_epoch", s.next_epoch},
          {"global_epoch", s.global_epoch},
          {"done", s.done},
          {"best_score", std::isfinite(s.best_score) ? nlohmann::json(s.best_score) : nlohmann::json()},
          {"records", recs}};
}

Stage1State state_from_json(const nlohmann::json& j)
{
  Stage1State s;
  s.iteration = j.at("iteration").get<int>();
  s.next_epoch = j.at("next_epoch").get<int>();
  s.global_epoch = j.at("global_epoch").get<int>();
  s.done = j.at("done").get<bool>();
  s.best_score = j.at("best_score").is_null() ? std::numeric_limits<double>::infinity()
                                              : j.at("best_score").get<double>();
  for (const auto& r : j.at("records")) {
    IterationRecord rec;
    rec.iteration = r.at("iteration").get<int>();
    rec.epochs = r.at("epochs").get<int>();
    rec.val_mae = r.at("val_mae").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : r.at("val_mae").get<double>();
    rec.teacher_checksum_before = r.at("teacher_checksum_before").get<std::uint64_t>();
    rec.teacher_checksum_after = r.at("teacher_checksum_after").get<std::uint64_t>();
    s.records.push_back(rec);
  }
  return s;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j)
{
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os)
      throw std::runtime_error("cannot write " + tmp);
    os << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint_atomic(const NetworkParams& p, const std::filesystem::path& path)
{
  const auto tmp = path.string() + ".tmp";
  save_checkpoint(p, tmp);
  std::filesystem::rename(tmp, path);
}

int iteration_epochs(const TrainConfig& cfg, int iteration, int global_epoch)
{
  if (!cfg.student_teacher)
    return iteration == 0 ? cfg.stage1_epochs : 0;
  const int want = cfg.initial_epochs + iteration * cfg.swap_extra_epochs;
  return std::min(want, cfg.stage1_epochs - global_epoch);
}

} // namespace

Stage1Result train_stage1(const std::vector<TileSample>& train,
                          const std::vector<TileSample>& val,
                          const TrainConfig& cfg,
                          TrainLog* log)
{
  cfg.validate();
  const Stage1Data data = prepare_stage1(train, cfg);
  const std::size_t n = data.tiles.size();
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);

  std::filesystem::path dir;
  const bool persist = !cfg.checkpoint_dir.empty();
  if (persist) {
    dir = std::filesystem::path(cfg.checkpoint_dir) / "stage1";
    std::filesystem::create_directories(dir);
  }

  Stage1State st;
  int epochs_this_run = 0;
  NetworkParams student, teacher, best;
  bool have_teacher = false, have_best = false;
  if (persist && std::filesystem::exists(dir / "state.json")) {
    std::ifstream is(dir / "state.json");
    st = state_from_json(nlohmann::json::parse(is));
    if (std::filesystem::exists(dir / "best.ckpt")) {
      best = load_checkpoint((dir / "best.ckpt").string());
      have_best = true;
    }
    if (st.done) {
      Stage1Result r{best, st.records, st.best_score};
      if (!std::isfinite(r.val_mae))
        r.val_mae = std::numeric_limits<double>::quiet_NaN();
      return r;
    }
    student = load_checkpoint((dir / "student.ckpt").string());
    if (st.iteration > 0) {
      teacher = load_checkpoint((dir / "teacher.ckpt").string());
      have_teacher = true;
    }
  } else {
    student = build_network(cfg.network, derive_seed(cfg.seed, 0));
  }

  while (!st.done) {
    const int epochs = iteration_epochs(cfg, st.iteration, st.global_epoch);
    if (epochs <= 0)
      break;

    // Targets for this iteration: spectral labels first, then the frozen teacher.
    std::vector<LabelMap> teacher_maps;
    IterationRecord rec;
    rec.iteration = st.iteration;
    rec.epochs = epochs;
    if (have_teacher) {
      rec.teacher_checksum_before = checksum(teacher.tensors);
      if (cfg.soft_labels)
        for (const auto& t : data.tiles)
          teacher_maps.push_back(teacher_targets(teacher, t, data.variables));
    }
    const std::vector<LabelMap>* soft = nullptr;
    if (cfg.soft_labels)
      soft = have_teacher ? &teacher_maps : &data.spectral;

    const std::size_t total_steps = static_cast<std::size_t>(epochs) * per_epoch;
    const std::size_t warm = warmup_steps(cfg, per_epoch);
    ParamMap<float> grads;
    for (int e = st.next_epoch; e < epochs; ++e) {
      if (cfg.max_epochs_per_run > 0 && epochs_this_run == cfg.max_epochs_per_run) {
        Stage1Result partial;
        partial.params = have_best ? best : student;
        partial.iterations = st.records;
        partial.complete = false;
        return partial;
      }
      ++epochs_this_run;
      const int ge = st.global_epoch + e;
      const double lambda_s =
        cfg.soft_labels ? soft_weight_schedule(ge, cfg.initial_epochs, cfg.stage1_epochs) : 0.0;
      const auto order = epoch_order(n, derive_seed(derive_seed(cfg.seed, 1000 + st.iteration), e));
      double epoch_loss = 0.0;
      double lr = 0.0;
      for (std::size_t b = 0; b < per_epoch; ++b) {
        const std::size_t lo = b * cfg.batch_size;
        const std::size_t hi = std::min(n, lo + cfg.batch_size);
        const double scale = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) {
          const std::size_t t = order[i];
          const LabelMap& targets = soft ? (*soft)[t] : data.hard[t];
          const FullSample s{&data.tiles[t].channels, &targets, data.weight[t]};
          epoch_loss += full_sample_gradient(student, s, data.variables, cfg, lambda_s, scale, grads);
        }
        lr = lr_schedule(static_cast<std::size_t>(e) * per_epoch + b, total_steps, warm, cfg.lr_min,
                         cfg.lr_peak);
        if (!std::isfinite(epoch_loss))
          throw std::runtime_error("stage1 diverged (non-finite loss) at epoch " + std::to_string(ge) +
                                   (persist ? "; last good checkpoint: " + (dir / "student.ckpt").string()
                                            : std::string()));
        optimizer_step(student, grads, lr, "stage1 epoch " + std::to_string(ge));
      }
      LogRow row;
      row.stage = "stage1";
      row.iteration = st.iteration;
      row.epoch = ge;
      row.loss = epoch_loss / static_cast<double>(n);
      row.lr = lr;
      row.lambda_s = lambda_s;
      st.next_epoch = e + 1;
      if (st.next_epoch == epochs && !val.empty())
        row.val_mae = uniform_validation_mae(predict_tiles(student, val), val, student.config,
                                             data.variables, cfg.seed);
      log_row(log, row);
      if (persist) {
        save_checkpoint_atomic(student, dir / "student.ckpt");
        write_json(dir / "state.json", state_to_json(st));
      }
      if (st.next_epoch == epochs)
        rec.val_mae = row.val_mae;
    }
    if (have_teacher)
      rec.teacher_checksum_after = checksum(teacher.tensors);
    st.records.push_back(rec);

    // Keep the best network by validation score (the latest one without validation data).
    const double score = rec.val_mae;
    const bool improved = !std::isfinite(score) || !have_best || score < st.best_score;
    bool converged = false;
    if (std::isfinite(score) && std::isfinite(st.best_score) && st.iteration > 0)
      converged = (st.best_score - score) / st.best_score < cfg.convergence_tol;
    if (improved) {
      best = student;
      have_best = true;
      if (std::isfinite(score))
        st.best_score = score;
      if (persist)
        save_checkpoint_atomic(best, dir / "best.ckpt");
    }

    st.global_epoch += epochs;
    st.next_epoch = 0;
    ++st.iteration;
    teacher = student;
    have_teacher = true;
    student = build_network(cfg.network, derive_seed(cfg.seed, static_cast<std::uint64_t>(st.iteration)));
    if (!cfg.student_teacher || converged || st.global_epoch >= cfg.stage1_epochs)
      st.done = true;
    if (persist) {
      if (!st.done) {
        save_checkpoint_atomic(teacher, dir / "teacher.ckpt");
        save_checkpoint_atomic(student, dir / "student.ckpt");
      }
      write_json(dir / "state.json", state_to_json(st));
    }
  }
  Stage1Result r;
  r.params = best;
  r.iterations = st.records;
  r.val_mae = std::isfinite(st.best_score) ? st.best_score : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ---------------------------------------------------------------- frozen-trunk stages

namespace {

/// Gradient of sum_k alpha_k w_k balance(L_k) through value head `head`
/// evaluated on fixed features; returns the loss.
double value_head_gradient(const NetworkParams& net,
                           int head,
                           const Tensor& features,
                           const Tensor& target_norm,
                           const Tensor& mask,
                           double lambda_h,
                           double lambda_s,
                           double factor,
                           ParamMap<float>& grads)
{
  const NetworkConfig& nc = net.config;
  NetCache<float> cache;
  HeadSelection sel = HeadSelection::none(nc);
  sel.value[static_cast<std::size_t>(head)] = true;
  const HeadOutputs<float> out = heads_forward(nc, net.tensors, features, sel, &cache);
  const Tensor& pred = out.value[static_cast<std::size_t>(head)];
  const NllMap<float> nm = nll_map(pred, target_norm, Tensor{}, 0.0, true);
  const Tensor w = balance_weights(mask, lambda_h, lambda_s);
  Tensor g = nm.d_pred;
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] *= static_cast<float>(w[i] * factor);
  HeadGrads<float> hg;
  hg.value.resize(out.value.size());
  hg.sigma.resize(out.sigma.size());
  hg.value[static_cast<std::size_t>(head)] = std::move(g);
  (void)heads_backward(nc, net.tensors, cache, hg, grads, false);
  return balance(nm.loss, mask, lambda_h, lambda_s);
}

/// Features and labels at the hard pixels of one tile, laid out as a 1 x n strip.
struct Strip
{
  Tensor features;             ///< [D,1,n]
  Tensor mask;                 ///< [1,n], all ones
  std::vector<Tensor> target;  ///< per variable, network units
  std::vector<Tensor> value;   ///< per variable, frozen value-head output
  std::vector<double> weight;  ///< per variable
};

Tensor gather_columns(const Tensor& features, const std::vector<std::size_t>& pixels)
{
  const std::size_t d = features.channels();
  const std::size_t hw = features.height() * features.width();
  Tensor out({d, 1, pixels.size()});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < pixels.size(); ++k)
      out[c * pixels.size() + k] = features[c * hw + pixels[k]];
  return out;
}

std::vector<Strip> make_strips(const NetworkParams& net,
                               const std::vector<TileSample>& tiles,
                               const std::vector<std::string>& variables,
                               const std::vector<WeightTable>* tables,
                               bool with_values)
{
  const NetworkConfig& nc = net.config;
  std::vector<Strip> out;
  for (const auto& t : tiles) {
    std::vector<std::size_t> pixels;
    std::vector<PointLabel> pts;
    std::set<std::size_t> seen;
    for (const auto& p : t.points) {
      if (!p.quality)
        continue;
      const std::size_t px = static_cast<std::size_t>(p.row) * t.width() + static_cast<std::size_t>(p.col);
      if (!seen.insert(px).second)
        continue;
      pixels.push_back(px);
      pts.push_back(p);
    }
    if (pixels.empty())
      continue;
    Strip s;
    s.features = gather_columns(trunk_forward(nc, net.tensors, t.channels), pixels);
    s.mask = Tensor({1, pixels.size()}, 1.0f);
    for (std::size_t k = 0; k < variables.size(); ++k) {
      const int h = nc.head_index(variables[k]);
      if (h < 0)
        throw std::invalid_argument("network has no head for '" + variables[k] + "'");
      Tensor target({1, pixels.size()});
      for (std::size_t i = 0; i < pts.size(); ++i)
        target[i] = pts[i].value(variables[k]) / nc.head_scales[static_cast<std::size_t>(h)];
      s.target.push_back(std::move(target));
      s.weight.push_back(tables ? tile_weight(t, (*tables)[k], variables[k]) : 1.0);
    }
    if (with_values) {
      HeadSelection sel = HeadSelection::none(nc);
      for (const auto& v : variables)
        sel.value[static_cast<std::size_t>(nc.head_index(v))] = true;
      HeadOutputs<float> o = heads_forward(nc, net.tensors, s.features, sel);
      for (const auto& v : variables)
        s.value.push_back(std::move(o.value[static_cast<std::size_t>(nc.head_index(v))]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Runs `epochs` of mini-batch Adam over `n` samples with a fresh optimizer
/// and a restarted schedule. `sample_grad(i, scale, grads)` returns the loss.
template <typename F>
void run_head_epochs(NetworkParams& net,
                     std::size_t n,
                     int epochs,
                     const TrainConfig& cfg,
                     std::uint64_t stream,
                     const std::string& stage,
                     double lambda_s,
                     TrainLog* log,
                     F&& sample_grad)
{
  net.optimizer.reset();
  if (n == 0)
    throw std::invalid_argument(stage + ": no training samples");
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  const std::size_t total = static_cast<std::size_t>(epochs) * per_epoch;
  const std::size_t warm = warmup_steps(cfg, per_epoch);
  ParamMap<float> grads;
  for (int e = 0; e < epochs; ++e) {
    const auto order = epoch_order(n, derive_seed(stream, static_cast<std::uint64_t>(e)));
    double loss = 0.0, lr = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = lo; i < hi; ++i)
        loss += sample_grad(order[i], scale, grads);
      if (!std::isfinite(loss))
        throw std::runtime_error(stage + " diverged (non-finite loss) at epoch " + std::to_string(e));
      lr = lr_schedule(static_cast<std::size_t>(e) * per_epoch + b, total, warm, cfg.lr_min,
                       cfg.head_lr_peak);
      optimizer_step(net, grads, lr, stage + " epoch " + std::to_string(e));
    }
    LogRow row;
    row.stage = stage;
    row.epoch = e;
    row.loss = loss / static_cast<double>(n);
    row.lr = lr;
    row.lambda_s = lambda_s;
    log_row(log, row);
  }
}

} // namespace

NetworkParams train_stage2(const NetworkParams& params,
                           const std::vector<TileSample>& train,
                           const TrainConfig& cfg,
                           TrainLog* log)
{
  cfg.validate();
  const auto tiles = prepare_tiles(train, cfg.tile_size);
  const auto variables = cfg.base_variables();
  NetworkParams net = set_freeze(params, Stage::Stage2);
  const NetworkConfig& nc = net.config;

  std::vector<Tensor> features;
  std::vector<LabelMap> targets;
  for (const auto& t : tiles) {
    features.push_back(trunk_forward(nc, net.tensors, t.channels));
    targets.push_back(teacher_targets(params, t, variables));
  }

  for (std::size_t k = 0; k < variables.size(); ++k) {
    const std::string& v = variables[k];
    const int head = nc.head_index(v);
    std::vector<double> stat;
    for (const auto& t : tiles) {
      std::vector<double> vals;
      for (const auto& p : t.quality_points())
        vals.push_back(p.value(v));
      stat.push_back(quantile(vals, 0.75));
    }
    const BalancedSubset subset =
      balanced_subset(stat, cfg.balance_bins, derive_seed(cfg.seed, 200 + k), cfg.balance_min_keep);
    std::vector<TileSample> chosen;
    for (std::size_t i : subset.indices)
      chosen.push_back(tiles[i]);
    const auto tables = fit_tables(chosen, {v});
    std::vector<Tensor> norm_targets;
    std::vector<double> weights;
    for (std::size_t i : subset.indices) {
      Tensor t = targets[i].target[k];
      t *= 1.0f / nc.head_scales[static_cast<std::size_t>(head)];
      norm_targets.push_back(std::move(t));
      weights.push_back(cfg.sample_weights ? tile_weight(tiles[i], tables[0], v) : 1.0);
    }
    run_head_epochs(net, subset.indices.size(), cfg.stage2_epochs, cfg, derive_seed(cfg.seed, 300 + k),
                    "stage2:" + v, cfg.stage2_lambda_s, log,
                    [&](std::size_t j, double scale, ParamMap<float>& grads) {
                      const std::size_t i = subset.indices[j];
                      const double w = weights[j];
                      return w * value_head_gradient(net, head, features[i], norm_targets[j],
                                                     targets[i].mask, cfg.lambda_h,
                                                     cfg.stage2_lambda_s, w * scale, grads);
                    });
  }
  net.optimizer.reset();
  return net;
}

namespace {

/// Sigma head `head` trained on strips with frozen value predictions.
void train_sigma_head(NetworkParams& net,
                      int head,
                      std::size_t k,
                      const std::vector<Strip>& strips,
                      double lambda_reg,
                      const TrainConfig& cfg,
                      TrainLog* log,
                      const std::string& stage)
{
  const NetworkConfig& nc = net.config;
  run_head_epochs(
    net, strips.size(), cfg.stage3_epochs, cfg, derive_seed(cfg.seed, 400 + k), stage, 0.0, log,
    [&](std::size_t j, double scale, ParamMap<float>& grads) {
      const Strip& s = strips[j];
      NetCache<float> cache;
      HeadSelection sel = HeadSelection::none(nc);
      sel.sigma[static_cast<std::size_t>(head)] = true;
      const HeadOutputs<float> out = heads_forward(nc, net.tensors, s.features, sel, &cache);
      const Tensor& sigma = out.sigma[static_cast<std::size_t>(head)];
      const NllMap<float> nm = nll_map(s.value[k], s.target[k], sigma, lambda_reg, false);
      const double w = s.weight[k];
      const Tensor bw = balance_weights(s.mask, cfg.lambda_h, 0.0);
      Tensor g = nm.d_sigma;
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] *= static_cast<float>(bw[i] * w * scale);
      HeadGrads<float> hg;
      hg.value.resize(out.value.size());
      hg.sigma.resize(out.sigma.size());
      hg.sigma[static_cast<std::size_t>(head)] = std::move(g);
      (void)heads_backward(nc, net.tensors, cache, hg, grads, false);
      return w * balance(nm.loss, s.mask, cfg.lambda_h, 0.0);
    });
}

double strip_coverage(const NetworkParams& net, int head, std::size_t k, const std::vector<Strip>& strips)
{
  const NetworkConfig& nc = net.config;
  std::size_t inside = 0, total = 0;
  for (const auto& s : strips) {
    HeadSelection sel = HeadSelection::none(nc);
    sel.sigma[static_cast<std::size_t>(head)] = true;
    const HeadOutputs<float> out = heads_forward(nc, net.tensors, s.features, sel);
    const Tensor& sigma = out.sigma[static_cast<std::size_t>(head)];
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      inside += std::abs(s.target[k][i] - s.value[k][i]) < sigma[i];
      ++total;
    }
  }
  return total ? static_cast<double>(inside) / static_cast<double>(total)
               : std::numeric_limits<double>::quiet_NaN();
}

} // namespace

Stage3Result train_stage3(const NetworkParams& params,
                          const std::vector<TileSample>& train,
                          const std::vector<TileSample>& val,
                          const TrainConfig& cfg,
                          TrainLog* log)
{
  cfg.validate();
  const auto tiles = prepare_tiles(train, cfg.tile_size);
  const auto variables = cfg.base_variables();
  Stage3Result r;
  r.params = set_freeze(params, Stage::Stage3);
  NetworkParams& net = r.params;
  const auto tables = fit_tables(tiles, variables);
  const auto strips = make_strips(net, tiles, variables, cfg.sample_weights ? &tables : nullptr, true);
  const auto val_tiles = val.empty() ? std::vector<TileSample>{} : prepare_tiles(val, cfg.tile_size);
  const auto val_strips = make_strips(net, val_tiles, variables, nullptr, true);

  for (std::size_t k = 0; k < variables.size(); ++k) {
    const int head = net.config.head_index(variables[k]);
    if (head >= net.config.n_sigma_heads) {
      r.lambda_reg.push_back(cfg.lambda_reg[k]);
      r.coverage.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const ParamMap<float> init = net.tensors;
    const std::string stage = "stage3:" + variables[k];
    auto fit = [&](double lambda, TrainLog* l) {
      net.tensors = init;
      train_sigma_head(net, head, k, strips, lambda, cfg, l, stage);
      return strip_coverage(net, head, k, val_strips);
    };
    double lambda = cfg.lambda_reg[k];
    if (cfg.calibrate_lambda_reg && !val_strips.empty()) {
      // Coverage falls as lambda grows; bisect log10(lambda) towards the target.
      lambda = 0.0;
      if (fit(0.0, nullptr) > cfg.target_coverage) {
        double lo = -4.0, hi = 3.0;
        for (int it = 0; it < 10; ++it) {
          const double mid = 0.5 * (lo + hi);
          (fit(std::pow(10.0, mid), nullptr) > cfg.target_coverage ? lo : hi) = mid;
        }
        lambda = std::pow(10.0, 0.5 * (lo + hi));
      }
    }
    const double cov = fit(lambda, log);
    r.lambda_reg.push_back(lambda);
    r.coverage.push_back(cov);
    if (log) {
      LogRow row;
      row.stage = stage;
      row.epoch = cfg.stage3_epochs - 1;
      row.loss = log->rows().empty() ? 0.0 : log->rows().back().loss;
      row.coverage = cov;
      log->append(row);
    }
  }
  net.optimizer.reset();
  return r;
}

NetworkParams finetune_rh(const NetworkParams& params,
                          const std::vector<TileSample>& train,
                          const TrainConfig& cfg,
                          TrainLog* log)
{
  cfg.validate();
  const auto tiles = prepare_tiles(train, cfg.tile_size);
  for (const auto& t : tiles)
    for (const auto& p : t.points)
      if (p.quality)
        for (float v : p.rh)
          if (!std::isfinite(v))
            throw std::invalid_argument("finetune_rh: dataset has footprints without RH targets");
  const auto names = rh_variable_names();
  const std::vector<float> scales(names.size(), 1000.0f);
  NetworkParams net =
    set_freeze(extend_heads(params, static_cast<int>(names.size()), derive_seed(cfg.seed, 500), names, scales),
               Stage::FineTuneRH);
  const auto tables = fit_tables(tiles, names);
  const auto strips = make_strips(net, tiles, names, cfg.sample_weights ? &tables : nullptr, false);
  std::vector<int> heads;
  for (const auto& v : names)
    heads.push_back(net.config.head_index(v));
  run_head_epochs(net, strips.size(), cfg.rh_epochs, cfg, derive_seed(cfg.seed, 600), "finetune-rh", 0.0,
                  log, [&](std::size_t j, double scale, ParamMap<float>& grads) {
                    const Strip& s = strips[j];
                    double loss = 0.0;
                    for (std::size_t k = 0; k < heads.size(); ++k)
                      loss += s.weight[k] * value_head_gradient(net, heads[k], s.features, s.target[k],
                                                                s.mask, cfg.lambda_h, 0.0,
                                                                s.weight[k] * scale, grads);
                    return loss;
                  });
  net.optimizer.reset();
  return net;
}

} // namespace canopy
