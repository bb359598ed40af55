#pragma once

// Whole-model compression: method selection per layer, rank search,
// parameter / FLOP accounting and speedup.
//
// FLOPs count one multiply-accumulate as 2 operations; there are no biases.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fnmatch.h>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "lwck/conv.hpp"
#include "lwck/cpd.hpp"
#include "lwck/epc.hpp"

namespace lwck {

using Count = std::uint64_t;

inline Count count_params(const ConvLayerSpec& s) {
  validate(s);
  return static_cast<Count>(s.out_channels) * (s.in_channels / s.groups) * s.kernel_size * s.kernel_size;
}

inline Count count_flops(const ConvLayerSpec& s) {
  validate(s);
  const auto hw = output_hw(s);
  return 2 * static_cast<Count>(hw[0]) * hw[1] * count_params(s);
}

inline double speedup(double flops_original, std::span<const double> flops_sublayers) {
  if (flops_sublayers.empty()) throw std::invalid_argument("speedup: no sub-layers");
  double sum = 0.0;
  for (double f : flops_sublayers) {
    if (!(f > 0.0)) throw std::invalid_argument("speedup: sub-layer FLOPs must be positive");
    sum += f;
  }
  if (!(flops_original > 0.0)) throw std::invalid_argument("speedup: original FLOPs must be positive");
  return flops_original / sum;
}

inline double speedup(double flops_original, std::initializer_list<double> flops_sublayers) {
  return speedup(flops_original, std::span<const double>(flops_sublayers.begin(), flops_sublayers.size()));
}

// ---------------------------------------------------------------------------
// Rank search

struct RankSearchConfig {
  double threshold = 0.0;                     // accept r when metric(r) <= threshold
  std::function<double(std::size_t)> metric;  // lower is better
  std::size_t min_rank = 1;
  std::size_t max_rank = 0;
};

struct RankSearchResult {
  bool feasible = false;
  std::size_t rank = 0;       // smallest acceptable rank found (max_rank when infeasible)
  double metric_value = 0.0;  // metric at `rank`
  std::size_t evaluations = 0;
};

/// Binary search for the smallest rank with metric(r) <= threshold, followed
/// by a downward sweep of up to 8 probes below the result to catch
/// non-monotone metrics. Each rank is evaluated at most once.
inline RankSearchResult rank_search(const RankSearchConfig& cfg) {
  if (!cfg.metric) throw std::invalid_argument("rank_search: no metric");
  if (cfg.min_rank < 1 || cfg.min_rank > cfg.max_rank)
    throw std::invalid_argument("rank_search: need 1 <= min_rank <= max_rank");

  std::map<std::size_t, double> seen;
  RankSearchResult out;
  auto metric = [&](std::size_t r) {
    auto it = seen.find(r);
    if (it != seen.end()) return it->second;
    ++out.evaluations;
    return seen[r] = cfg.metric(r);
  };
  auto ok = [&](std::size_t r) { return metric(r) <= cfg.threshold; };

  std::size_t lo = cfg.min_rank, hi = cfg.max_rank;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (ok(mid))
      hi = mid;
    else
      lo = mid + 1;
  }
  if (!ok(lo)) {
    out.feasible = false;
    out.rank = cfg.max_rank;
    out.metric_value = metric(cfg.max_rank);
    return out;
  }
  std::size_t best = lo;
  for (std::size_t k = 1; k <= 8 && lo >= cfg.min_rank + k; ++k)
    if (ok(lo - k)) best = lo - k;
  out.feasible = true;
  out.rank = best;
  out.metric_value = metric(best);
  return out;
}

/// Default bound for the search: min(S, T) for 1x1 kernels, max_cp_rank otherwise.
inline std::size_t max_search_rank(const ConvLayerSpec& s) {
  return s.kernel_size == 1 ? max_svd_rank(s) : max_cp_rank(s);
}

inline RankSearchResult rank_search(const ConvLayerSpec& layer, RankSearchConfig cfg) {
  if (cfg.max_rank == 0) cfg.max_rank = max_search_rank(layer);
  return rank_search(cfg);
}

// ---------------------------------------------------------------------------
// Model compression

struct ManifestEntry {
  ConvLayerSpec spec;
  std::string weights;  // path, relative to the manifest file

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct ModelManifest {
  std::vector<ManifestEntry> layers;

  friend bool operator==(const ModelManifest&, const ModelManifest&) = default;
};

inline void validate(const ModelManifest& m) {
  std::map<std::string, int> names;
  for (const auto& l : m.layers) {
    validate(l.spec);
    if (l.spec.name.empty()) throw std::invalid_argument("manifest layer with empty name");
    if (++names[l.spec.name] > 1) throw std::invalid_argument("duplicate layer name '" + l.spec.name + "'");
    if (l.weights.empty()) throw std::invalid_argument("layer '" + l.spec.name + "' has no weight reference");
  }
}

enum class Method { cpd_epc, svd, skip };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::cpd_epc: return "cpd-epc";
    case Method::svd: return "svd";
    default: return "skip";
  }
}

inline Method method_from_string(const std::string& s) {
  if (s == "cpd-epc") return Method::cpd_epc;
  if (s == "svd") return Method::svd;
  if (s == "skip") return Method::skip;
  throw std::invalid_argument("unknown method '" + s + "'");
}

enum class SkipReason { none, user, no_gain, infeasible, error };

inline const char* to_string(SkipReason r) {
  switch (r) {
    case SkipReason::none: return "";
    case SkipReason::user: return "user";
    case SkipReason::no_gain: return "no-gain";
    case SkipReason::infeasible: return "infeasible";
    default: return "error";
  }
}

inline SkipReason skip_reason_from_string(const std::string& s) {
  if (s.empty()) return SkipReason::none;
  if (s == "user") return SkipReason::user;
  if (s == "no-gain") return SkipReason::no_gain;
  if (s == "infeasible") return SkipReason::infeasible;
  if (s == "error") return SkipReason::error;
  throw std::invalid_argument("unknown skip reason '" + s + "'");
}

struct SublayerRecord {
  LayerKind kind = LayerKind::standard;
  ConvLayerSpec spec;
  Count params = 0;
  Count flops = 0;
  std::string weights;  // file reference, filled when the plan is written

  friend bool operator==(const SublayerRecord&, const SublayerRecord&) = default;
};

struct LayerRecord {
  std::string name;
  Method method = Method::skip;
  std::size_t rank = 0;
  Count params_before = 0;
  Count params_after = 0;
  Count flops_before = 0;
  Count flops_after = 0;
  double speedup = 1.0;
  double kernel_rel_error = 0.0;
  SkipReason skip_reason = SkipReason::none;
  std::string detail;  // human-readable context for skips
  std::vector<SublayerRecord> sublayers;

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct PlanTotals {
  Count params_before = 0;
  Count params_after = 0;
  Count flops_before = 0;
  Count flops_after = 0;
  double speedup = 1.0;

  friend bool operator==(const PlanTotals&, const PlanTotals&) = default;
};

struct CompressionPlan {
  std::vector<LayerRecord> records;
  PlanTotals totals;

  friend bool operator==(const CompressionPlan&, const CompressionPlan&) = default;
};

inline PlanTotals compute_totals(const std::vector<LayerRecord>& records) {
  PlanTotals t;
  for (const auto& r : records) {
    t.params_before += r.params_before;
    t.params_after += r.params_after;
    t.flops_before += r.flops_before;
    t.flops_after += r.flops_after;
  }
  t.speedup = t.flops_after > 0 ? static_cast<double>(t.flops_before) / static_cast<double>(t.flops_after) : 1.0;
  return t;
}

/// Per-layer quality score for a candidate factorization; lower is better.
using LayerMetric = std::function<double(const ConvLayer&, const FactorizedConv&)>;

struct CompressConfig {
  // EPC budget per CP layer, relative to the kernel norm: delta = value * ||K||_F.
  double epc_relative_delta = 0.0;
  bool use_epc = true;
  double trigger_factor = 10.0;  // EPC trigger: trigger_factor * ||K||_F^2
  int epc_outer_iters = 10;
  double rank_threshold = 0.05;  // default metric: kernel relative error
  LayerMetric metric;            // overrides the default metric when set
  std::size_t min_rank = 1;
  std::size_t max_rank = 0;  // 0: per-layer maximum
  std::vector<std::string> skip;  // glob patterns on layer names
  bool force = false;             // keep factorizations that add parameters
  AlsOptions als{};
  unsigned threads = 0;  // 0: LWCK_THREADS, then hardware concurrency
};

struct LayerOutcome {
  LayerRecord record;
  std::vector<FactorizedLayer> layers;  // empty for skips
};

struct CompressionResult {
  CompressionPlan plan;
  std::vector<std::vector<FactorizedLayer>> layers;  // parallel to plan.records
};

inline bool matches_any(const std::string& name, const std::vector<std::string>& patterns) {
  for (const auto& p : patterns)
    if (::fnmatch(p.c_str(), name.c_str(), 0) == 0) return true;
  return false;
}

inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("LWCK_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline LayerRecord skip_record(const ConvLayerSpec& spec, SkipReason why, std::string detail) {
  LayerRecord r;
  r.name = spec.name;
  r.method = Method::skip;
  r.skip_reason = why;
  r.detail = std::move(detail);
  try {
    r.params_before = r.params_after = count_params(spec);
    r.flops_before = r.flops_after = count_flops(spec);
  } catch (const std::exception&) {
    // Accounting unavailable (e.g. malformed spec); leave zeros.
  }
  r.speedup = 1.0;
  return r;
}

/// Fills the accounting fields of a record from its factorized sub-layers.
inline void account(LayerRecord& r, const ConvLayerSpec& spec, const std::vector<FactorizedLayer>& layers) {
  r.params_before = count_params(spec);
  r.flops_before = count_flops(spec);
  r.params_after = 0;
  r.flops_after = 0;
  r.sublayers.clear();
  for (const auto& l : layers) {
    SublayerRecord s{l.kind, l.spec, count_params(l.spec), count_flops(l.spec), {}};
    r.params_after += s.params;
    r.flops_after += s.flops;
    r.sublayers.push_back(std::move(s));
  }
  r.speedup = static_cast<double>(r.flops_before) / static_cast<double>(r.flops_after);
}

inline LayerOutcome compress_layer(const ConvLayer& layer, const CompressConfig& cfg) {
  const auto& spec = layer.spec;
  if (matches_any(spec.name, cfg.skip)) return {skip_record(spec, SkipReason::user, "matched skip list"), {}};
  try {
    validate(spec);
    if (spec.groups != 1) return {skip_record(spec, SkipReason::user, "grouped convolution"), {}};
    count_flops(spec);  // requires input_hw

    const bool use_cp = spec.kernel_size > 1;
    const Tensor k3 = use_cp ? reshape_kernel(kernel_from_weights(layer.weights)) : Tensor{};
    std::optional<EpcConfig> epc;
    if (use_cp && cfg.use_epc) {
      EpcConfig e;
      const double n = frobenius_norm(k3);
      e.delta = cfg.epc_relative_delta * n;
      e.norm_threshold = cfg.trigger_factor * n * n;
      e.max_outer_iters = cfg.epc_outer_iters;
      epc = e;
    }

    std::map<std::size_t, FactorizedConv> cache;
    auto factorize = [&](std::size_t r) -> const FactorizedConv& {
      auto it = cache.find(r);
      if (it != cache.end()) return it->second;
      FactorizedConv f = use_cp ? static_cast<FactorizedConv>(cp_factorize_conv(layer, r, epc, cfg.als))
                                : svd_factorize_conv(layer, r);
      return cache.emplace(r, std::move(f)).first->second;
    };

    RankSearchConfig rs;
    rs.threshold = cfg.rank_threshold;
    rs.min_rank = cfg.min_rank;
    rs.max_rank = cfg.max_rank ? std::min(cfg.max_rank, max_search_rank(spec)) : max_search_rank(spec);
    rs.min_rank = std::min(rs.min_rank, rs.max_rank);
    rs.metric = [&](std::size_t r) {
      const auto& f = factorize(r);
      return cfg.metric ? cfg.metric(layer, f) : f.kernel_rel_error;
    };
    const auto found = rank_search(rs);
    if (!found.feasible)
      return {skip_record(spec, SkipReason::infeasible,
                          "no rank in [" + std::to_string(rs.min_rank) + ", " + std::to_string(rs.max_rank) +
                              "] meets threshold; metric at max rank = " + std::to_string(found.metric_value)),
              {}};

    const auto& f = factorize(found.rank);
    LayerRecord rec;
    rec.name = spec.name;
    rec.method = use_cp ? Method::cpd_epc : Method::svd;
    rec.rank = found.rank;
    rec.kernel_rel_error = f.kernel_rel_error;
    account(rec, spec, f.layers);
    if (rec.params_after > rec.params_before && !cfg.force)
      return {skip_record(spec, SkipReason::no_gain,
                          "factorized form has " + std::to_string(rec.params_after) + " params vs " +
                              std::to_string(rec.params_before)),
              {}};
    return {std::move(rec), f.layers};
  } catch (const std::exception& e) {
    return {skip_record(spec, SkipReason::error, e.what()), {}};
  }
}

/// Compresses every layer independently (possibly in parallel) and assembles
/// the plan in input order. Per-layer failures become skip records.
inline CompressionResult compress_model(const std::vector<ConvLayer>& layers, const CompressConfig& cfg) {
  std::vector<LayerOutcome> outcomes(layers.size());
  const unsigned n_threads = std::min<unsigned>(resolve_threads(cfg.threads), std::max<std::size_t>(layers.size(), 1));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < layers.size(); i = next++) outcomes[i] = compress_layer(layers[i], cfg);
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  CompressionResult out;
  for (auto& o : outcomes) {
    out.plan.records.push_back(std::move(o.record));
    out.layers.push_back(std::move(o.layers));
  }
  out.plan.totals = compute_totals(out.plan.records);
  return out;
}

}  // namespace lwck
