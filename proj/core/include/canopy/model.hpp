// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <canopy/ops.hpp>
#include <canopy/optim.hpp>
#include <canopy/tensor.hpp>

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace canopy {

enum class Stage
{
  Stage1,
  Stage2,
  Stage3,
  FineTuneRH
};

Stage parse_stage(const std::string& s);
std::string to_string(Stage stage);

/// Topology of the encoder / FPN decoder / prediction-head network.
///
/// Value head i predicts variable head_names[i]; sigma head i (i < n_sigma_heads)
/// predicts its uncertainty. Raw head outputs are multiplied by head_scales[i]
/// to obtain physical units. The last n_extended_heads value heads are the ones
/// added by extend_heads().
struct NetworkConfig
{
  int input_channels = 13;
  std::vector<int> encoder_channels{16, 32, 64};
  int decoder_feature_dim = 32;
  std::vector<int> head_hidden_dims{32, 32, 1};
  int n_value_heads = 3;
  int n_sigma_heads = 3;
  int n_extended_heads = 0;
  std::vector<std::string> head_names{"agbd", "ch", "cc"};
  std::vector<float> head_scales{100.0f, 1000.0f, 100.0f};
  float value_bias_init = 0.5f;

  void validate() const;
  std::size_t levels() const { return encoder_channels.size(); }
  /// Spatial extents must be multiples of this.
  std::size_t divisor() const { return std::size_t{1} << (levels() - 1); }
  /// Radius (pixels) beyond which input values cannot influence an output pixel.
  int receptive_radius() const;
  int head_index(const std::string& name) const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct NetworkParams
{
  NetworkConfig config;
  ParamMap<float> tensors;
  /// true = trainable. Covers every tensor in `tensors`.
  std::map<std::string, bool> trainable;
  AdamState optimizer;

  std::size_t parameter_count() const;
  std::set<std::string> frozen_names() const;
  ParamMap<float> trunk_tensors() const;
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const NetworkConfig& config);

/// Names of the tensors belonging to a head ("value" or "sigma").
std::vector<std::string> head_tensor_names(const NetworkConfig& config, bool sigma, int index);

NetworkParams build_network(const NetworkConfig& config, std::uint64_t seed);

/// Appends n_new value heads (Glorot weights), leaving existing tensors untouched.
NetworkParams extend_heads(const NetworkParams& params,
                           int n_new,
                           std::uint64_t seed,
                           const std::vector<std::string>& names = {},
                           const std::vector<float>& scales = {});

/// Stage1: everything trainable. Stage2: base value heads. Stage3: sigma heads.
/// FineTuneRH: the extended heads only.
NetworkParams set_freeze(NetworkParams params, Stage stage);

template <typename T>
struct ConvRecord
{
  BasicTensor<T> input;
  BasicTensor<T> preact;
};

template <typename T>
struct NetCache
{
  std::map<std::string, ConvRecord<T>> layers;
};

struct HeadSelection
{
  std::vector<bool> value;
  std::vector<bool> sigma;

  static HeadSelection all(const NetworkConfig& config);
  static HeadSelection none(const NetworkConfig& config);
};

/// Head outputs in network units, each [H,W]. Unselected heads are empty.
template <typename T>
struct HeadOutputs
{
  std::vector<BasicTensor<T>> value;
  std::vector<BasicTensor<T>> sigma;
};

/// Gradients w.r.t. activated head outputs, each [H,W] or empty (no gradient).
template <typename T>
using HeadGrads = HeadOutputs<T>;

/// Encoder + decoder. Returns the [D,H,W] feature map.
template <typename T>
BasicTensor<T> trunk_forward(const NetworkConfig& config,
                             const ParamMap<T>& params,
                             const BasicTensor<T>& input,
                             NetCache<T>* cache = nullptr);

template <typename T>
HeadOutputs<T> heads_forward(const NetworkConfig& config,
                             const ParamMap<T>& params,
                             const BasicTensor<T>& features,
                             const HeadSelection& selection,
                             NetCache<T>* cache = nullptr);

/// Accumulates head parameter gradients into `grads`; returns dL/dfeatures
/// (empty if want_feature_grad is false).
template <typename T>
BasicTensor<T> heads_backward(const NetworkConfig& config,
                              const ParamMap<T>& params,
                              const NetCache<T>& cache,
                              const HeadGrads<T>& head_grads,
                              ParamMap<T>& grads,
                              bool want_feature_grad);

template <typename T>
void trunk_backward(const NetworkConfig& config,
                    const ParamMap<T>& params,
                    const NetCache<T>& cache,
                    const BasicTensor<T>& grad_features,
                    ParamMap<T>& grads);

/// Per-variable maps in physical units, each [H,W].
struct Prediction
{
  std::vector<std::string> names;
  std::vector<Tensor> value;
  std::vector<Tensor> sigma;

  const Tensor& value_of(const std::string& name) const;
};

/// Inference: physical units, "cc" clamped to [0,100], "rh*" heads sorted
/// per pixel so quantiles are non-decreasing.
Prediction forward(const NetworkParams& params, const Tensor& input);

/// Forward without the inference-time projections (clamp, sort).
Prediction forward_unprojected(const NetworkParams& params, const Tensor& input);

/// Versioned binary checkpoint (little-endian float32 tensor table).
void save_checkpoint(const NetworkParams& params, const std::string& path);
NetworkParams load_checkpoint(const std::string& path);

} // namespace canopy
