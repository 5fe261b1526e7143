// SPDX-License-Identifier: Apache-2.0
#include <canopy/model.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace canopy {

namespace {

enum class Activation
{
  Relu,
  Softplus
};

const ConvGeometry kSame3 = ConvGeometry::same(3);
const ConvGeometry kSame2 = ConvGeometry::same(2);
const ConvGeometry kDown3 = ConvGeometry::symmetric(1, 2);
const ConvGeometry kPoint = ConvGeometry::same(1);

std::string enc_name(std::size_t level, const char* conv)
{
  return "enc" + std::to_string(level) + "." + conv;
}

std::string dec_name(std::size_t level, const char* conv)
{
  return "dec" + std::to_string(level) + "." + conv;
}

std::string head_layer_name(bool sigma, int head, std::size_t layer)
{
  return std::string("head.") + (sigma ? "sigma" : "value") + std::to_string(head) + ".l" +
         std::to_string(layer);
}

struct LayerSpec
{
  std::string name;
  int cin, cout, k;
};

std::vector<LayerSpec> trunk_layers(const NetworkConfig& c)
{
  std::vector<LayerSpec> out;
  const auto& ch = c.encoder_channels;
  const int d = c.decoder_feature_dim;
  out.push_back({enc_name(0, "a"), c.input_channels, ch[0], 3});
  out.push_back({enc_name(0, "b"), ch[0], ch[0], 3});
  for (std::size_t l = 1; l < ch.size(); ++l) {
    out.push_back({enc_name(l, "a"), ch[l - 1], ch[l], 3});
    out.push_back({enc_name(l, "b"), ch[l], ch[l], 3});
  }
  for (std::size_t l = ch.size() - 1; l-- > 0;) {
    const int prev = (l == ch.size() - 2) ? ch.back() : d;
    out.push_back({dec_name(l, "up"), prev, d, 2});
    out.push_back({dec_name(l, "a"), d + ch[l], d, 3});
    out.push_back({dec_name(l, "b"), d, d, 3});
  }
  return out;
}

std::vector<LayerSpec> head_layers(const NetworkConfig& c, bool sigma, int head)
{
  std::vector<LayerSpec> out;
  int cin = c.decoder_feature_dim;
  for (std::size_t j = 0; j < c.head_hidden_dims.size(); ++j) {
    out.push_back({head_layer_name(sigma, head, j), cin, c.head_hidden_dims[j], 1});
    cin = c.head_hidden_dims[j];
  }
  return out;
}

void add_layer(NetworkParams& p, const LayerSpec& s, std::mt19937_64& rng, float bias_init = 0.0f)
{
  const int fan_in = s.cin * s.k * s.k;
  const int fan_out = s.cout * s.k * s.k;
  p.tensors[s.name + ".w"] =
    glorot_uniform({static_cast<std::size_t>(s.cout), static_cast<std::size_t>(s.cin),
                    static_cast<std::size_t>(s.k), static_cast<std::size_t>(s.k)},
                   fan_in, fan_out, rng);
  p.tensors[s.name + ".b"] = Tensor({static_cast<std::size_t>(s.cout)}, bias_init);
  p.trainable[s.name + ".w"] = true;
  p.trainable[s.name + ".b"] = true;
}

void add_head(NetworkParams& p, bool sigma, int head, std::mt19937_64& rng)
{
  const auto layers = head_layers(p.config, sigma, head);
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const bool last = j + 1 == layers.size();
    add_layer(p, layers[j], rng, (last && !sigma) ? p.config.value_bias_init : 0.0f);
  }
}

template <typename T>
BasicTensor<T> conv_act_forward(const ParamMap<T>& params,
                                const std::string& name,
                                const BasicTensor<T>& x,
                                ConvGeometry g,
                                Activation act,
                                NetCache<T>* cache)
{
  BasicTensor<T> pre = conv2d(x, params.at(name + ".w"), params.at(name + ".b"), g);
  BasicTensor<T> out = act == Activation::Relu ? relu(pre) : softplus(pre);
  if (cache)
    cache->layers[name] = ConvRecord<T>{x, std::move(pre)};
  return out;
}

template <typename T>
void accumulate(ParamMap<T>& grads, const std::string& name, BasicTensor<T>&& g)
{
  auto it = grads.find(name);
  if (it == grads.end())
    grads.emplace(name, std::move(g));
  else
    it->second += g;
}

template <typename T>
BasicTensor<T> conv_act_backward(const ParamMap<T>& params,
                                 const std::string& name,
                                 ConvGeometry g,
                                 Activation act,
                                 const NetCache<T>& cache,
                                 const BasicTensor<T>& grad_out,
                                 ParamMap<T>& grads,
                                 bool want_input_grad)
{
  const auto it = cache.layers.find(name);
  if (it == cache.layers.end())
    throw std::logic_error("backward: layer " + name + " was not recorded in the forward pass");
  const ConvRecord<T>& rec = it->second;
  const BasicTensor<T> gpre = act == Activation::Relu ? relu_backward(rec.preact, grad_out)
                                                      : softplus_backward(rec.preact, grad_out);
  LayerGrad<T> lg = conv2d_backward(rec.input, params.at(name + ".w"), gpre, g, want_input_grad);
  accumulate(grads, name + ".w", std::move(lg.grad_kernel));
  accumulate(grads, name + ".b", std::move(lg.grad_bias));
  return std::move(lg.grad_input);
}

template <typename T>
BasicTensor<T> to_map(BasicTensor<T> t)
{
  t.reshape({t.height(), t.width()});
  return t;
}

template <typename T>
BasicTensor<T> to_plane(const BasicTensor<T>& t)
{
  BasicTensor<T> out = t;
  if (out.rank() == 2)
    out.reshape({1, t.extent(0), t.extent(1)});
  return out;
}

} // namespace

Stage parse_stage(const std::string& s)
{
  if (s == "1" || s == "stage1")
    return Stage::Stage1;
  if (s == "2" || s == "stage2")
    return Stage::Stage2;
  if (s == "3" || s == "stage3")
    return Stage::Stage3;
  if (s == "rh" || s == "finetune-rh")
    return Stage::FineTuneRH;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

std::string to_string(Stage stage)
{
  switch (stage) {
    case Stage::Stage1:
      return "stage1";
    case Stage::Stage2:
      return "stage2";
    case Stage::Stage3:
      return "stage3";
    case Stage::FineTuneRH:
      return "finetune-rh";
  }
  return "?";
}

void NetworkConfig::validate() const
{
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid network config: " + what);
  };
  if (input_channels <= 0)
    fail("input_channels must be positive");
  if (encoder_channels.size() < 2)
    fail("encoder needs at least 2 levels");
  for (int c : encoder_channels)
    if (c <= 0)
      fail("encoder channel counts must be positive");
  if (decoder_feature_dim <= 0)
    fail("decoder_feature_dim must be positive");
  if (head_hidden_dims.empty() || head_hidden_dims.back() != 1)
    fail("head_hidden_dims must end with 1");
  for (int h : head_hidden_dims)
    if (h <= 0)
      fail("head_hidden_dims must be positive");
  if (n_value_heads <= 0)
    fail("n_value_heads must be positive");
  if (n_sigma_heads < 0 || n_sigma_heads > n_value_heads)
    fail("n_sigma_heads must satisfy 0 <= n_sigma_heads <= n_value_heads");
  if (n_extended_heads < 0 || n_extended_heads > n_value_heads)
    fail("n_extended_heads out of range");
  if (head_names.size() != static_cast<std::size_t>(n_value_heads))
    fail("head_names must have n_value_heads entries");
  if (head_scales.size() != static_cast<std::size_t>(n_value_heads))
    fail("head_scales must have n_value_heads entries");
  for (float s : head_scales)
    if (!(s > 0.0f))
      fail("head_scales must be positive");
}

int NetworkConfig::receptive_radius() const
{
  // Each 3x3 conv reaches one pixel at its own resolution; stride-2 convs then
  // double the pixel pitch. Upsampling reaches one coarse pixel, the 2x2
  // up-projection one fine pixel.
  std::vector<int> enc_radius(levels());
  int r = 2;
  int pitch = 1;
  enc_radius[0] = r;
  for (std::size_t l = 1; l < levels(); ++l) {
    r += pitch;
    pitch *= 2;
    r += pitch;
    enc_radius[l] = r;
  }
  int prev_pitch = pitch;
  for (std::size_t l = levels() - 1; l-- > 0;) {
    const int p = 1 << l;
    r += prev_pitch;
    r += p;
    r = std::max(r, enc_radius[l]);
    r += 2 * p;
    prev_pitch = p;
  }
  return r;
}

int NetworkConfig::head_index(const std::string& name) const
{
  const auto it = std::find(head_names.begin(), head_names.end(), name);
  return it == head_names.end() ? -1 : static_cast<int>(it - head_names.begin());
}

void to_json(nlohmann::json& j, const NetworkConfig& c)
{
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_feature_dim", c.decoder_feature_dim},
                     {"head_hidden_dims", c.head_hidden_dims},
                     {"n_value_heads", c.n_value_heads},
                     {"n_sigma_heads", c.n_sigma_heads},
                     {"n_extended_heads", c.n_extended_heads},
                     {"head_names", c.head_names},
                     {"head_scales", c.head_scales},
                     {"value_bias_init", c.value_bias_init}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c)
{
  NetworkConfig d;
  c.input_channels = j.value("input_channels", d.input_channels);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.decoder_feature_dim = j.value("decoder_feature_dim", d.decoder_feature_dim);
  c.head_hidden_dims = j.value("head_hidden_dims", d.head_hidden_dims);
  c.n_value_heads = j.value("n_value_heads", d.n_value_heads);
  c.n_sigma_heads = j.value("n_sigma_heads", d.n_sigma_heads);
  c.n_extended_heads = j.value("n_extended_heads", d.n_extended_heads);
  c.head_names = j.value("head_names", d.head_names);
  c.head_scales = j.value("head_scales", d.head_scales);
  c.value_bias_init = j.value("value_bias_init", d.value_bias_init);
}

std::size_t NetworkParams::parameter_count() const
{
  std::size_t n = 0;
  for (const auto& [name, t] : tensors)
    n += t.size();
  return n;
}

std::set<std::string> NetworkParams::frozen_names() const
{
  std::set<std::string> out;
  for (const auto& [name, on] : trainable)
    if (!on)
      out.insert(name);
  return out;
}

ParamMap<float> NetworkParams::trunk_tensors() const
{
  ParamMap<float> out;
  for (const auto& [name, t] : tensors)
    if (name.rfind("head.", 0) != 0)
      out.emplace(name, t);
  return out;
}

std::size_t parameter_count(const NetworkConfig& config)
{
  config.validate();
  std::size_t n = 0;
  auto count = [&n](const LayerSpec& s) {
    n += static_cast<std::size_t>(s.cout) * s.cin * s.k * s.k + static_cast<std::size_t>(s.cout);
  };
  for (const auto& s : trunk_layers(config))
    count(s);
  for (int i = 0; i < config.n_value_heads; ++i)
    for (const auto& s : head_layers(config, false, i))
      count(s);
  for (int i = 0; i < config.n_sigma_heads; ++i)
    for (const auto& s : head_layers(config, true, i))
      count(s);
  return n;
}

std::vector<std::string> head_tensor_names(const NetworkConfig& config, bool sigma, int index)
{
  std::vector<std::string> out;
  for (const auto& s : head_layers(config, sigma, index)) {
    out.push_back(s.name + ".b");
    out.push_back(s.name + ".w");
  }
  return out;
}

NetworkParams build_network(const NetworkConfig& config, std::uint64_t seed)
{
  config.validate();
  NetworkParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  for (const auto& s : trunk_layers(config))
    add_layer(p, s, rng);
  for (int i = 0; i < config.n_value_heads; ++i)
    add_head(p, false, i, rng);
  for (int i = 0; i < config.n_sigma_heads; ++i)
    add_head(p, true, i, rng);
  return p;
}

NetworkParams extend_heads(const NetworkParams& params,
                           int n_new,
                           std::uint64_t seed,
                           const std::vector<std::string>& names,
                           const std::vector<float>& scales)
{
  if (n_new <= 0)
    throw std::invalid_argument("extend_heads: n_new must be positive, got " +
                                std::to_string(n_new));
  if (!names.empty() && names.size() != static_cast<std::size_t>(n_new))
    throw std::invalid_argument("extend_heads: expected " + std::to_string(n_new) + " names");
  if (!scales.empty() && scales.size() != static_cast<std::size_t>(n_new))
    throw std::invalid_argument("extend_heads: expected " + std::to_string(n_new) + " scales");
  NetworkParams out = params;
  std::mt19937_64 rng(seed);
  const int first = out.config.n_value_heads;
  out.config.n_value_heads += n_new;
  out.config.n_extended_heads += n_new;
  for (int i = 0; i < n_new; ++i) {
    out.config.head_names.push_back(names.empty() ? "extra" + std::to_string(first + i) : names[i]);
    out.config.head_scales.push_back(scales.empty() ? 1.0f : scales[i]);
    add_head(out, false, first + i, rng);
  }
  out.config.validate();
  return out;
}

NetworkParams set_freeze(NetworkParams params, Stage stage)
{
  const auto& c = params.config;
  const int n_base = c.n_value_heads - c.n_extended_heads;
  std::set<std::string> open;
  auto open_head = [&](bool sigma, int i) {
    for (const auto& n : head_tensor_names(c, sigma, i))
      open.insert(n);
  };
  switch (stage) {
    case Stage::Stage1:
      for (auto& [name, on] : params.trainable)
        on = true;
      return params;
    case Stage::Stage2:
      for (int i = 0; i < n_base; ++i)
        open_head(false, i);
      break;
    case Stage::Stage3:
      for (int i = 0; i < c.n_sigma_heads; ++i)
        open_head(true, i);
      break;
    case Stage::FineTuneRH:
      for (int i = n_base; i < c.n_value_heads; ++i)
        open_head(false, i);
      break;
  }
  for (auto& [name, on] : params.trainable)
    on = open.count(name) > 0;
  return params;
}

HeadSelection HeadSelection::all(const NetworkConfig& config)
{
  return {std::vector<bool>(static_cast<std::size_t>(config.n_value_heads), true),
          std::vector<bool>(static_cast<std::size_t>(config.n_sigma_heads), true)};
}

HeadSelection HeadSelection::none(const NetworkConfig& config)
{
  return {std::vector<bool>(static_cast<std::size_t>(config.n_value_heads), false),
          std::vector<bool>(static_cast<std::size_t>(config.n_sigma_heads), false)};
}

template <typename T>
BasicTensor<T> trunk_forward(const NetworkConfig& config,
                             const ParamMap<T>& params,
                             const BasicTensor<T>& input,
                             NetCache<T>* cache)
{
  if (input.rank() != 3 || input.channels() != static_cast<std::size_t>(config.input_channels))
    throw std::invalid_argument("forward: expected " + std::to_string(config.input_channels) +
                                " input channels, got shape " + shape_string(input.shape()));
  const std::size_t div = config.divisor();
  if (input.height() == 0 || input.width() == 0 || input.height() % div || input.width() % div)
    throw std::invalid_argument("forward: spatial extents of " + shape_string(input.shape()) +
                                " must be positive multiples of " + std::to_string(div));
  const std::size_t L = config.levels();
  std::vector<BasicTensor<T>> enc(L);
  enc[0] = conv_act_forward(params, enc_name(0, "a"), input, kSame3, Activation::Relu, cache);
  enc[0] = conv_act_forward(params, enc_name(0, "b"), enc[0], kSame3, Activation::Relu, cache);
  for (std::size_t l = 1; l < L; ++l) {
    enc[l] = conv_act_forward(params, enc_name(l, "a"), enc[l - 1], kDown3, Activation::Relu, cache);
    enc[l] = conv_act_forward(params, enc_name(l, "b"), enc[l], kSame3, Activation::Relu, cache);
  }
  BasicTensor<T> prev = enc[L - 1];
  for (std::size_t l = L - 1; l-- > 0;) {
    BasicTensor<T> up = bilinear_upsample2x(prev);
    up = conv_act_forward(params, dec_name(l, "up"), up, kSame2, Activation::Relu, cache);
    BasicTensor<T> cat = concat_channels(up, enc[l]);
    BasicTensor<T> a = conv_act_forward(params, dec_name(l, "a"), cat, kSame3, Activation::Relu, cache);
    prev = conv_act_forward(params, dec_name(l, "b"), a, kSame3, Activation::Relu, cache);
  }
  return prev;
}

template <typename T>
HeadOutputs<T> heads_forward(const NetworkConfig& config,
                             const ParamMap<T>& params,
                             const BasicTensor<T>& features,
                             const HeadSelection& selection,
                             NetCache<T>* cache)
{
  HeadOutputs<T> out;
  out.value.resize(static_cast<std::size_t>(config.n_value_heads));
  out.sigma.resize(static_cast<std::size_t>(config.n_sigma_heads));
  auto run = [&](bool sigma, int i) {
    const std::size_t n = config.head_hidden_dims.size();
    BasicTensor<T> h = features;
    for (std::size_t j = 0; j < n; ++j) {
      const Activation act = (sigma && j + 1 == n) ? Activation::Softplus : Activation::Relu;
      h = conv_act_forward(params, head_layer_name(sigma, i, j), h, kPoint, act, cache);
    }
    return to_map(std::move(h));
  };
  for (int i = 0; i < config.n_value_heads; ++i)
    if (i < static_cast<int>(selection.value.size()) && selection.value[i])
      out.value[i] = run(false, i);
  for (int i = 0; i < config.n_sigma_heads; ++i)
    if (i < static_cast<int>(selection.sigma.size()) && selection.sigma[i])
      out.sigma[i] = run(true, i);
  return out;
}

template <typename T>
BasicTensor<T> heads_backward(const NetworkConfig& config,
                              const ParamMap<T>& params,
                              const NetCache<T>& cache,
                              const HeadGrads<T>& head_grads,
                              ParamMap<T>& grads,
                              bool want_feature_grad)
{
  BasicTensor<T> gfeat;
  auto run = [&](bool sigma, int i, const BasicTensor<T>& g_out) {
    const std::size_t n = config.head_hidden_dims.size();
    BasicTensor<T> g = to_plane(g_out);
    for (std::size_t j = n; j-- > 0;) {
      const Activation act = (sigma && j + 1 == n) ? Activation::Softplus : Activation::Relu;
      const bool need_input = j > 0 || want_feature_grad;
      g = conv_act_backward(params, head_layer_name(sigma, i, j), kPoint, act, cache, g, grads,
                            need_input);
    }
    if (want_feature_grad) {
      if (gfeat.empty())
        gfeat = std::move(g);
      else
        gfeat += g;
    }
  };
  for (std::size_t i = 0; i < head_grads.value.size(); ++i)
    if (!head_grads.value[i].empty())
      run(false, static_cast<int>(i), head_grads.value[i]);
  for (std::size_t i = 0; i < head_grads.sigma.size(); ++i)
    if (!head_grads.sigma[i].empty())
      run(true, static_cast<int>(i), head_grads.sigma[i]);
  return gfeat;
}

template <typename T>
void trunk_backward(const NetworkConfig& config,
                    const ParamMap<T>& params,
                    const NetCache<T>& cache,
                    const BasicTensor<T>& grad_features,
                    ParamMap<T>& grads)
{
  const std::size_t L = config.levels();
  const auto d = static_cast<std::size_t>(config.decoder_feature_dim);
  std::vector<BasicTensor<T>> genc(L);
  auto add_to = [](BasicTensor<T>& dst, BasicTensor<T>&& g) {
    if (dst.empty())
      dst = std::move(g);
    else
      dst += g;
  };
  BasicTensor<T> g = grad_features;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    g = conv_act_backward(params, dec_name(l, "b"), kSame3, Activation::Relu, cache, g, grads, true);
    g = conv_act_backward(params, dec_name(l, "a"), kSame3, Activation::Relu, cache, g, grads, true);
    auto [gup, gskip] = split_channels(g, d);
    add_to(genc[l], std::move(gskip));
    g = conv_act_backward(params, dec_name(l, "up"), kSame2, Activation::Relu, cache, gup, grads, true);
    g = bilinear_upsample2x_backward(g);
  }
  add_to(genc[L - 1], std::move(g));
  for (std::size_t l = L; l-- > 0;) {
    const ConvGeometry first = l == 0 ? kSame3 : kDown3;
    BasicTensor<T> gl =
      conv_act_backward(params, enc_name(l, "b"), kSame3, Activation::Relu, cache, genc[l], grads, true);
    gl = conv_act_backward(params, enc_name(l, "a"), first, Activation::Relu, cache, gl, grads, l > 0);
    if (l > 0)
      add_to(genc[l - 1], std::move(gl));
  }
}

const Tensor& Prediction::value_of(const std::string& name) const
{
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end())
    throw std::invalid_argument("prediction has no variable '" + name + "'");
  return value[static_cast<std::size_t>(it - names.begin())];
}

Prediction forward_unprojected(const NetworkParams& params, const Tensor& input)
{
  const auto& c = params.config;
  const Tensor features = trunk_forward(c, params.tensors, input);
  HeadOutputs<float> raw = heads_forward(c, params.tensors, features, HeadSelection::all(c));
  Prediction p;
  p.names = c.head_names;
  for (int i = 0; i < c.n_value_heads; ++i) {
    Tensor v = std::move(raw.value[i]);
    v *= c.head_scales[i];
    p.value.push_back(std::move(v));
  }
  for (int i = 0; i < c.n_sigma_heads; ++i) {
    Tensor s = std::move(raw.sigma[i]);
    s *= c.head_scales[i];
    p.sigma.push_back(std::move(s));
  }
  return p;
}

Prediction forward(const NetworkParams& params, const Tensor& input)
{
  Prediction p = forward_unprojected(params, input);
  const auto& c = params.config;
  const int cc = c.head_index("cc");
  if (cc >= 0)
    for (auto& v : p.value[cc].values())
      v = std::clamp(v, 0.0f, 100.0f);
  std::vector<int> rh;
  for (int i = 0; i < c.n_value_heads; ++i)
    if (c.head_names[i].rfind("rh", 0) == 0)
      rh.push_back(i);
  if (rh.size() > 1) {
    std::vector<float> column(rh.size());
    const std::size_t n = p.value[rh[0]].size();
    for (std::size_t px = 0; px < n; ++px) {
      for (std::size_t k = 0; k < rh.size(); ++k)
        column[k] = p.value[rh[k]][px];
      std::sort(column.begin(), column.end());
      for (std::size_t k = 0; k < rh.size(); ++k)
        p.value[rh[k]][px] = column[k];
    }
  }
  return p;
}

#define CANOPY_INSTANTIATE_MODEL(T)                                                             \
  template BasicTensor<T> trunk_forward(const NetworkConfig&, const ParamMap<T>&,              \
                                        const BasicTensor<T>&, NetCache<T>*);                  \
  template HeadOutputs<T> heads_forward(const NetworkConfig&, const ParamMap<T>&,              \
                                        const BasicTensor<T>&, const HeadSelection&,           \
                                        NetCache<T>*);                                         \
  template BasicTensor<T> heads_backward(const NetworkConfig&, const ParamMap<T>&,             \
                                         const NetCache<T>&, const HeadGrads<T>&,              \
                                         ParamMap<T>&, bool);                                  \
  template void trunk_backward(const NetworkConfig&, const ParamMap<T>&, const NetCache<T>&,   \
                               const BasicTensor<T>&, ParamMap<T>&);

CANOPY_INSTANTIATE_MODEL(float)
CANOPY_INSTANTIATE_MODEL(double)

#undef CANOPY_INSTANTIATE_MODEL

} // namespace canopy
