// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/gedi.hpp>
#include <canopy/model.hpp>
#include <canopy/sample.hpp>

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace canopy {

struct TrainConfig
{
  NetworkConfig network;
  std::size_t tile_size = 64;   ///< larger tiles of exactly twice this size are split in 4
  std::size_t batch_size = 8;
  int stage1_epochs = 24;
  int initial_epochs = 8;
  int swap_extra_epochs = 8;
  int stage2_epochs = 4;
  int stage3_epochs = 8;
  int rh_epochs = 8;
  double warmup_epochs = 1.0;
  double lr_min = 1e-7;
  double lr_peak = 1e-3;
  double head_lr_peak = 1e-3;   ///< peak rate of the frozen-trunk stages
  std::uint64_t seed = 1;
  bool student_teacher = true;  ///< false: one network, no role swaps
  bool soft_labels = true;      ///< false: lambda_s = 0 throughout stage 1
  double lambda_h = 1.0;
  double stage2_lambda_s = 1e-2;
  std::vector<double> alpha{1.0, 1.0, 1.0};
  std::vector<double> lambda_reg{1e-4, 1e-4, 1e-4};
  bool calibrate_lambda_reg = true;
  double target_coverage = 0.68;
  double convergence_tol = 0.01;
  std::size_t balance_bins = 8;
  double balance_min_keep = 0.5;
  bool sample_weights = true;
  std::string checkpoint_dir;   ///< empty: no checkpoints, no resume
  std::string log_path;         ///< empty: no CSV log
  int max_epochs_per_run = 0;   ///< stage 1 stops after this many epochs in one call; 0 = no limit

  void validate() const;
  /// Names of the base value heads (the first n_value_heads - n_extended_heads).
  std::vector<std::string> base_variables() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warm-up from lr_min to lr_peak over `warmup_steps`, then cosine
/// decay reaching lr_min at the final step.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                   double lr_min, double lr_peak);

struct LogRow
{
  std::string stage;
  int iteration = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double lambda_s = 0.0;
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double val_mae = std::numeric_limits<double>::quiet_NaN();
};

/// Training-curve log kept in memory and optionally appended to a CSV file
/// (stage, iteration, epoch, loss, lr, lambda_s, coverage, val_mae).
class TrainLog
{
public:
  TrainLog() = default;
  explicit TrainLog(const std::string& csv_path);

  void append(const LogRow& row);
  const std::vector<LogRow>& rows() const { return rows_; }

private:
  std::vector<LogRow> rows_;
  std::string path_;
};

struct IterationRecord
{
  int iteration = 0;
  int epochs = 0;
  double val_mae = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

struct Stage1Result
{
  NetworkParams params;
  std::vector<IterationRecord> iterations;
  double val_mae = std::numeric_limits<double>::quiet_NaN();
  bool complete = true; ///< false when max_epochs_per_run interrupted the stage
};

/// Stage 1: whole network, fixed sigma, hard + soft targets. Iteration 0 uses
/// spectral soft labels; later iterations use a frozen teacher (the previous
/// student) and a freshly initialized student trained swap_extra_epochs longer.
/// `val` drives early stopping and the choice of the returned network; it may be empty.
Stage1Result train_stage1(const std::vector<TileSample>& train,
                          const std::vector<TileSample>& val,
                          const TrainConfig& config,
                          TrainLog* log = nullptr);

/// Stage 2: frozen trunk; each base value head trained on a subset of tiles
/// balanced on its variable, with soft targets from the stage-1 network.
NetworkParams train_stage2(const NetworkParams& params,
                           const std::vector<TileSample>& train,
                           const TrainConfig& config,
                           TrainLog* log = nullptr);

struct Stage3Result
{
  NetworkParams params;
  std::vector<double> lambda_reg;
  std::vector<double> coverage; ///< per variable on `val` (NaN without val)
};

/// Stage 3: only the sigma heads train, with the full likelihood on hard
/// labels. With calibrate_lambda_reg, lambda_reg per variable is chosen so
/// that the validation coverage approaches target_coverage.
Stage3Result train_stage3(const NetworkParams& params,
                          const std::vector<TileSample>& train,
                          const std::vector<TileSample>& val,
                          const TrainConfig& config,
                          TrainLog* log = nullptr);

/// Adds one value head per RH quantile and trains only those heads.
NetworkParams finetune_rh(const NetworkParams& params,
                          const std::vector<TileSample>& train,
                          const TrainConfig& config,
                          TrainLog* log = nullptr);

/// Allometric AGBD from the predicted RH maps: exp(a + b ln(LCM) + re) with
/// LCM = mean RH40..RH98 in metres. Pixels with LCM <= 0 get 0.
Tensor rh_allometric_agbd(const Prediction& prediction, double a, double b, double re_site);

/// Tiles ready for training: split to the configured tile size, tiles
/// without quality points dropped.
std::vector<TileSample> prepare_tiles(const std::vector<TileSample>& tiles, std::size_t tile_size);

} // namespace canopy
