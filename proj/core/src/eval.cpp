// SPDX-License-Identifier: Apache-2.0
#include <canopy/eval.hpp>
#include <canopy/gedi.hpp>
#include <canopy/weighting.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace canopy {

namespace {

// Sorted-data quantile with linear interpolation between order statistics.
double sorted_quantile(const std::vector<double>& s, double q)
{
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= s.size())
    return s.back();
  return s[i] + (pos - static_cast<double>(i)) * (s[i + 1] - s[i]);
}

std::vector<double> ranks(std::span<const double> v)
{
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]])
      ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

nlohmann::json nan_to_null(double v)
{
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::string csv_number(double v)
{
  if (!std::isfinite(v))
    return "";
  nlohmann::json j = v;
  return j.dump();
}

} // namespace

double pearson(std::span<const double> a, std::span<const double> b)
{
  if (a.size() != b.size() || a.size() < 2)
    return kNaN;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0)
    return kNaN;
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b)
{
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  return pearson(ra, rb);
}

GlobalMetrics global_metrics(std::span<const EvalPair> pairs)
{
  if (pairs.empty())
    throw std::invalid_argument("global_metrics: no pairs");
  GlobalMetrics m;
  m.n = pairs.size();
  const double n = static_cast<double>(m.n);
  std::vector<double> t, p;
  t.reserve(m.n);
  p.reserve(m.n);
  double se = 0.0, ae = 0.0, e = 0.0, ape = 0.0;
  std::size_t n_ape = 0;
  for (const auto& q : pairs) {
    const double err = q.y_pred - q.y_true;
    e += err;
    ae += std::abs(err);
    se += err * err;
    if (q.y_true != 0.0) {
      ape += std::abs(err / q.y_true);
      ++n_ape;
    }
    t.push_back(q.y_true);
    p.push_back(q.y_pred);
  }
  m.me = e / n;
  m.mae = ae / n;
  m.rmse = std::sqrt(se / n);
  m.mape_excluded = m.n - n_ape;
  if (n_ape > 0)
    m.mape = 100.0 * ape / static_cast<double>(n_ape);
  m.corr = pearson(t, p);
  const double mt = std::accumulate(t.begin(), t.end(), 0.0) / n;
  double sst = 0.0;
  for (double v : t)
    sst += (v - mt) * (v - mt);
  if (sst > 0.0)
    m.r2 = 1.0 - se / sst;
  return m;
}

std::vector<BinStats> binned_profile(std::span<const EvalPair> pairs,
                                     const BinSpec& spec,
                                     std::size_t min_count)
{
  spec.validate();
  std::vector<std::vector<double>> errs(spec.count());
  for (const auto& q : pairs) {
    const long k = spec.index(q.y_true);
    if (k >= 0)
      errs[static_cast<std::size_t>(k)].push_back(q.y_pred - q.y_true);
  }
  std::vector<BinStats> out(spec.count());
  for (std::size_t k = 0; k < out.size(); ++k) {
    BinStats& b = out[k];
    b.low = spec.edge(k);
    b.high = spec.edge(k + 1);
    b.count = errs[k].size();
    b.sparse = b.count < min_count;
    if (errs[k].empty())
      continue;
    auto s = errs[k];
    std::sort(s.begin(), s.end());
    b.median_error = sorted_quantile(s, 0.5);
    b.q25 = sorted_quantile(s, 0.25);
    b.q75 = sorted_quantile(s, 0.75);
    b.q05 = sorted_quantile(s, 0.05);
    b.q95 = sorted_quantile(s, 0.95);
    std::vector<double> a;
    for (double v : s)
      a.push_back(std::abs(v));
    std::sort(a.begin(), a.end());
    b.median_abs_error = sorted_quantile(a, 0.5);
  }
  return out;
}

CoverageProfile coverage_profile(std::span<const EvalPair> pairs, const BinSpec& spec)
{
  spec.validate();
  CoverageProfile c;
  c.per_bin.assign(spec.count(), kNaN);
  c.counts.assign(spec.count(), 0);
  std::vector<std::size_t> inside(spec.count(), 0);
  std::size_t covered = 0;
  for (const auto& q : pairs) {
    if (!q.has_sigma())
      throw std::invalid_argument("coverage_profile: pair without sigma");
    if (!(q.sigma > 0.0))
      throw std::invalid_argument("coverage_profile: non-positive sigma " + std::to_string(q.sigma));
    const bool ok = std::abs(q.y_true - q.y_pred) / q.sigma < 1.0;
    covered += ok;
    ++c.n;
    const long k = spec.index(q.y_true);
    if (k >= 0) {
      ++c.counts[static_cast<std::size_t>(k)];
      inside[static_cast<std::size_t>(k)] += ok;
    }
  }
  if (c.n > 0)
    c.global = static_cast<double>(covered) / static_cast<double>(c.n);
  for (std::size_t k = 0; k < c.counts.size(); ++k)
    if (c.counts[k] > 0)
      c.per_bin[k] = static_cast<double>(inside[k]) / static_cast<double>(c.counts[k]);
  return c;
}

PftTable pft_breakdown(const std::map<std::string, std::vector<EvalPair>>& pairs_by_variable)
{
  PftTable table;
  for (const auto& [variable, pairs] : pairs_by_variable) {
    std::map<Pft, std::vector<EvalPair>> groups;
    for (const auto& q : pairs) {
      if (static_cast<int>(q.pft) > static_cast<int>(Pft::GSW))
        throw std::invalid_argument("pft_breakdown: unknown PFT code " +
                                    std::to_string(static_cast<int>(q.pft)));
      groups[q.pft].push_back(q);
    }
    for (const auto& [pft, g] : groups)
      table[pft][variable] = global_metrics(g).rmse;
  }
  return table;
}

OrderedProfile uncertainty_ordered_profile(std::span<const EvalPair> pairs, double alpha, int n_model)
{
  if (pairs.empty())
    throw std::invalid_argument("uncertainty_ordered_profile: empty batch");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return pairs[a].y_true < pairs[b].y_true; });
  OrderedProfile o;
  std::vector<double> abs_err;
  for (std::size_t i : order) {
    const auto& q = pairs[i];
    o.y_true.push_back(q.y_true);
    o.y_pred.push_back(q.y_pred);
    o.sigma.push_back(q.sigma);
    o.se.push_back(q.se_true);
    if (q.has_se()) {
      const auto [lo, hi] = confidence_interval(q.y_true, q.se_true, alpha, n_model);
      o.ci_low.push_back(lo);
      o.ci_high.push_back(hi);
    } else {
      o.ci_low.push_back(kNaN);
      o.ci_high.push_back(kNaN);
    }
    abs_err.push_back(std::abs(q.y_pred - q.y_true));
  }
  if (std::all_of(o.se.begin(), o.se.end(), [](double v) { return v == v; }))
    o.rank_corr_abs_error_se = spearman(abs_err, o.se);
  return o;
}

std::vector<Prediction> predict_tiles(const NetworkParams& params, const std::vector<TileSample>& tiles)
{
  std::vector<Prediction> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles)
    out.push_back(forward(params, t.channels));
  return out;
}

std::vector<EvalPair> collect_pairs(const std::vector<Prediction>& predictions,
                                    const std::vector<TileSample>& tiles,
                                    const std::string& variable)
{
  if (predictions.size() != tiles.size())
    throw std::invalid_argument("collect_pairs: prediction/tile count mismatch");
  std::vector<EvalPair> out;
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const Prediction& pred = predictions[t];
    const auto it = std::find(pred.names.begin(), pred.names.end(), variable);
    if (it == pred.names.end())
      throw std::invalid_argument("collect_pairs: prediction has no variable '" + variable + "'");
    const auto v = static_cast<std::size_t>(it - pred.names.begin());
    const std::size_t w = tiles[t].width();
    for (const auto& p : tiles[t].points) {
      if (!p.quality)
        continue;
      const std::size_t px = static_cast<std::size_t>(p.row) * w + static_cast<std::size_t>(p.col);
      EvalPair q;
      q.y_true = p.value(variable);
      q.y_pred = pred.value[v][px];
      if (v < pred.sigma.size())
        q.sigma = pred.sigma[v][px];
      if (variable == "agbd")
        q.se_true = p.se;
      q.pft = p.pft;
      out.push_back(q);
    }
  }
  return out;
}

double uniform_validation_mae(const std::vector<Prediction>& predictions,
                              const std::vector<TileSample>& tiles,
                              const NetworkConfig& config,
                              const std::vector<std::string>& variables,
                              std::uint64_t seed)
{
  double total = 0.0;
  for (std::size_t k = 0; k < variables.size(); ++k) {
    const auto& v = variables[k];
    const auto pairs = collect_pairs(predictions, tiles, v);
    std::vector<double> values;
    for (const auto& q : pairs)
      values.push_back(q.y_true);
    const PdfTable pdf = fit_kde(values, bin_spec_for(v));
    const auto keep = uniform_test_sample(values, pdf, floor_reference_for(v), derive_seed(seed, k));
    double ae = 0.0;
    for (std::size_t i : keep)
      ae += std::abs(pairs[i].y_pred - pairs[i].y_true);
    const int head = config.head_index(v);
    const double scale = head >= 0 ? config.head_scales[static_cast<std::size_t>(head)] : 1.0;
    total += ae / static_cast<double>(std::max<std::size_t>(keep.size(), 1)) / scale;
  }
  return total / static_cast<double>(variables.size());
}

EvalReport evaluate(const NetworkParams& params,
                    const std::vector<TileSample>& tiles,
                    std::uint64_t seed,
                    std::size_t min_count)
{
  const auto predictions = predict_tiles(params, tiles);
  EvalReport r;
  std::map<std::string, std::vector<EvalPair>> by_var;
  const auto& c = params.config;
  for (int i = 0; i < c.n_value_heads; ++i) {
    const std::string& v = c.head_names[static_cast<std::size_t>(i)];
    VariableReport vr;
    vr.variable = v;
    auto pairs = collect_pairs(predictions, tiles, v);
    if (pairs.size() < 2)
      throw std::invalid_argument("evaluate: fewer than 2 footprints for '" + v + "'");
    vr.global = global_metrics(pairs);
    std::vector<double> values;
    for (const auto& q : pairs)
      values.push_back(q.y_true);
    const BinSpec spec = bin_spec_for(v);
    const PdfTable pdf = fit_kde(values, spec);
    const auto keep = uniform_test_sample(values, pdf, floor_reference_for(v), derive_seed(seed, i));
    std::vector<EvalPair> sampled;
    for (std::size_t k : keep)
      sampled.push_back(pairs[k]);
    if (sampled.size() >= 2)
      vr.uniform = global_metrics(sampled);
    vr.bins = binned_profile(pairs, spec, min_count);
    if (i < c.n_sigma_heads)
      vr.coverage = coverage_profile(pairs, spec);
    if (i < c.n_value_heads - c.n_extended_heads)
      by_var[v] = pairs;
    if (v == "agbd")
      r.agbd_ordered = uncertainty_ordered_profile(pairs);
    r.variables.push_back(std::move(vr));
  }
  r.pft_rmse = pft_breakdown(by_var);
  return r;
}

void to_json(nlohmann::json& j, const GlobalMetrics& m)
{
  j = nlohmann::json{{"n", m.n},
                     {"corr", nan_to_null(m.corr)},
                     {"me", nan_to_null(m.me)},
                     {"mae", nan_to_null(m.mae)},
                     {"mape", nan_to_null(m.mape)},
                     {"mape_excluded", m.mape_excluded},
                     {"rmse", nan_to_null(m.rmse)},
                     {"r2", nan_to_null(m.r2)}};
}

void to_json(nlohmann::json& j, const EvalReport& r)
{
  j = nlohmann::json::object();
  auto& vars = j["variables"] = nlohmann::json::array();
  for (const auto& v : r.variables) {
    nlohmann::json e{{"variable", v.variable}, {"global", v.global}, {"uniform", v.uniform}};
    auto& bins = e["bins"] = nlohmann::json::array();
    for (const auto& b : v.bins)
      bins.push_back({{"low", b.low},
                      {"high", b.high},
                      {"count", b.count},
                      {"sparse", b.sparse},
                      {"median_error", nan_to_null(b.median_error)},
                      {"median_abs_error", nan_to_null(b.median_abs_error)},
                      {"q25", nan_to_null(b.q25)},
                      {"q75", nan_to_null(b.q75)},
                      {"q05", nan_to_null(b.q05)},
                      {"q95", nan_to_null(b.q95)}});
    if (v.coverage) {
      nlohmann::json per_bin = nlohmann::json::array();
      for (double f : v.coverage->per_bin)
        per_bin.push_back(nan_to_null(f));
      e["coverage"] = {{"global", nan_to_null(v.coverage->global)},
                       {"n", v.coverage->n},
                       {"per_bin", per_bin},
                       {"counts", v.coverage->counts}};
    }
    vars.push_back(std::move(e));
  }
  auto& pft = j["pft_rmse"] = nlohmann::json::object();
  for (const auto& [cls, row] : r.pft_rmse)
    for (const auto& [var, rmse] : row)
      pft[to_string(cls)][var] = nan_to_null(rmse);
  if (r.agbd_ordered) {
    const auto& o = *r.agbd_ordered;
    auto arr = [](const std::vector<double>& v) {
      nlohmann::json a = nlohmann::json::array();
      for (double x : v)
        a.push_back(nan_to_null(x));
      return a;
    };
    j["agbd_ordered"] = {{"y_true", arr(o.y_true)},
                         {"y_pred", arr(o.y_pred)},
                         {"sigma", arr(o.sigma)},
                         {"se", arr(o.se)},
                         {"ci_low", arr(o.ci_low)},
                         {"ci_high", arr(o.ci_high)},
                         {"rank_corr_abs_error_se", nan_to_null(o.rank_corr_abs_error_se)}};
  }
}

void write_report(const EvalReport& report, const std::string& dir)
{
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  {
    std::ofstream os(base / "report.json");
    os << nlohmann::json(report).dump(2) << '\n';
  }
  {
    std::ofstream os(base / "metrics.csv");
    os << "variable,sample,n,corr,me,mae,mape,mape_excluded,rmse,r2,coverage\n";
    for (const auto& v : report.variables) {
      const std::string cov = v.coverage ? csv_number(v.coverage->global) : "";
      for (const auto& [label, m] : {std::pair{"all", v.global}, std::pair{"uniform", v.uniform}})
        os << v.variable << ',' << label << ',' << m.n << ',' << csv_number(m.corr) << ','
           << csv_number(m.me) << ',' << csv_number(m.mae) << ',' << csv_number(m.mape) << ','
           << m.mape_excluded << ',' << csv_number(m.rmse) << ',' << csv_number(m.r2) << ',' << cov
           << '\n';
    }
  }
  for (const auto& v : report.variables) {
    std::ofstream os(base / ("bins_" + v.variable + ".csv"));
    os << "low,high,count,sparse,median_error,median_abs_error,q25,q75,q05,q95,coverage\n";
    for (std::size_t k = 0; k < v.bins.size(); ++k) {
      const auto& b = v.bins[k];
      os << csv_number(b.low) << ',' << csv_number(b.high) << ',' << b.count << ','
         << (b.sparse ? 1 : 0) << ',' << csv_number(b.median_error) << ','
         << csv_number(b.median_abs_error) << ',' << csv_number(b.q25) << ',' << csv_number(b.q75)
         << ',' << csv_number(b.q05) << ',' << csv_number(b.q95) << ','
         << (v.coverage ? csv_number(v.coverage->per_bin[k]) : "") << '\n';
    }
  }
}

} // namespace canopy
