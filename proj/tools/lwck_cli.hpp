#pragma once

// Command implementations behind the `lwck` executable. Each command writes
// to the given streams and returns the process exit code:
//   0 success, 1 hard error, 2 partial (skipped layers / failed checks).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lwck/lwck.hpp"

namespace lwck::cli {

enum ExitCode : int { kOk = 0, kHardError = 1, kPartial = 2 };

/// Scientific notation with 4 significant digits and a bare exponent: 2.118e-2.
inline std::string format_sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  std::string s = buf;
  const auto e = s.find('e');
  if (e == std::string::npos) return s;
  std::string mant = s.substr(0, e);
  std::string exp = s.substr(e + 1);
  std::string sign;
  if (!exp.empty() && (exp[0] == '+' || exp[0] == '-')) {
    if (exp[0] == '-') sign = "-";
    exp.erase(0, 1);
  }
  exp.erase(0, std::min(exp.find_first_not_of('0'), exp.size() - 1));
  return mant + "e" + sign + exp;
}

/// Four significant digits, truncated: 1.82994 -> 1.829, 15.1423 -> 15.14.
inline std::string format_speedup(double v) {
  if (!std::isfinite(v) || v <= 0.0) return "-";
  const int mag = static_cast<int>(std::floor(std::log10(v)));
  const int decimals = std::max(0, 3 - mag);
  const double scale = std::pow(10.0, 3 - mag);
  const double t = std::floor(v * scale * (1.0 + 1e-12)) / scale;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, t);
  return buf;
}

inline std::string format_percent(double fraction) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * fraction);
  return buf;
}

inline double gflops(Count flops) { return static_cast<double>(flops) / 1e9; }

inline Tensor random_tensor(const Dims& dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return Tensor::generate(dims, [&](std::size_t) { return u(rng); });
}

// ---------------------------------------------------------------------------
// compress

struct CompressArgs {
  std::string manifest;
  std::string out = "lwck-out";
  double epc_delta = 0.0;
  double rank_threshold = 0.05;
  int max_iters = 500;
  std::vector<std::string> skip;
  bool force = false;
  std::uint64_t seed = 0;
  bool strict = false;
  bool no_epc = false;
};

inline int cmd_compress(const CompressArgs& a, std::ostream& out, std::ostream& err) {
  CompressionResult result;
  try {
    ParseContext ctx{a.strict, {}};
    const auto manifest = read_manifest(a.manifest, ctx);
    for (const auto& w : ctx.warnings) err << "warning: " << w << "\n";
    const auto layers = load_layers(manifest, fs::path(a.manifest).parent_path());

    CompressConfig cfg;
    cfg.epc_relative_delta = a.epc_delta;
    cfg.use_epc = !a.no_epc;
    cfg.rank_threshold = a.rank_threshold;
    cfg.skip = a.skip;
    cfg.force = a.force;
    cfg.als.max_iters = a.max_iters;
    cfg.als.seed = a.seed;
    result = compress_model(layers, cfg);
    save_compression(result, a.out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kHardError;
  }

  bool partial = false;
  for (const auto& r : result.plan.records) {
    if (r.method == Method::skip) {
      err << "skipped " << r.name << " (" << to_string(r.skip_reason) << ")";
      if (!r.detail.empty()) err << ": " << r.detail;
      err << "\n";
      partial = partial || r.skip_reason == SkipReason::infeasible || r.skip_reason == SkipReason::error;
    } else {
      out << r.name << ": " << to_string(r.method) << " rank " << r.rank << ", kernel error "
          << format_sci(r.kernel_rel_error) << ", speedup " << format_speedup(r.speedup) << "\n";
    }
  }
  out << "plan written to " << (fs::path(a.out) / "plan.json").string() << " (total speedup "
      << format_speedup(result.plan.totals.speedup) << ")\n";
  return partial ? kPartial : kOk;
}

// ---------------------------------------------------------------------------
// speedup-report

inline void print_speedup_table(const CompressionPlan& plan, std::ostream& out) {
  std::size_t name_w = 5;
  for (const auto& r : plan.records) name_w = std::max(name_w, r.name.size());
  auto row = [&](const std::string& name, const std::string& method, const std::string& rank,
                 const std::string& before, const std::array<std::string, 3>& subs, const std::string& after,
                 const std::string& sp) {
    out << std::left << std::setw(static_cast<int>(name_w)) << name << "  " << std::setw(8) << method << "  "
        << std::right << std::setw(5) << rank << "  " << std::setw(10) << before;
    for (const auto& s : subs) out << "  " << std::setw(10) << s;
    out << "  " << std::setw(10) << after << "  " << std::setw(8) << sp << "\n";
  };
  row("layer", "method", "rank", "GFLOPs", {"layer 0", "layer 1", "layer 2"}, "LW GFLOPs", "speedup");
  for (const auto& r : plan.records) {
    std::array<std::string, 3> subs{"-", "-", "-"};
    for (std::size_t k = 0; k < std::min<std::size_t>(3, r.sublayers.size()); ++k)
      subs[k] = format_sci(gflops(r.sublayers[k].flops));
    row(r.name, to_string(r.method), r.method == Method::skip ? "-" : std::to_string(r.rank),
        format_sci(gflops(r.flops_before)), subs, format_sci(gflops(r.flops_after)), format_speedup(r.speedup));
  }
  if (!plan.records.empty()) {
    const auto t = compute_totals(plan.records);
    row("TOTAL", "", "", format_sci(gflops(t.flops_before)), {"", "", ""}, format_sci(gflops(t.flops_after)),
        format_speedup(t.speedup));
  }
}

inline int cmd_speedup_report(const std::string& plan_path, bool strict, std::ostream& out, std::ostream& err) {
  try {
    ParseContext ctx{strict, {}};
    const auto plan = read_plan(plan_path, ctx);
    for (const auto& w : ctx.warnings) err << "warning: " << w << "\n";
    print_speedup_table(plan, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kHardError;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  std::string predictions;
  std::size_t bins = 10;
  bool fit_temperature = false;
  std::string out;
};

inline int cmd_calibrate(const CalibrateArgs& a, std::ostream& out, std::ostream& err) {
  try {
    const auto preds = read_predictions(a.predictions);
    const auto stats = bin_stats(preds, a.bins);
    out << "ECE: " << format_percent(ece(stats, preds.size())) << "\n";
    if (!a.out.empty()) write_file_atomic(a.out, format_reliability_csv(reliability_data(stats)));
    if (a.fit_temperature) {
      if (!preds.logits) throw std::invalid_argument("--fit-temperature needs a logit column");
      const double t = fit_temperature(preds);
      PredictionSet scaled = preds;
      scaled.p_hat = apply_temperature(*preds.logits, t);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f", t);
      out << "Temperature: " << buf << "\n";
      out << "ECE after scaling: " << format_percent(ece(scaled, a.bins)) << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kHardError;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string manifest;
  std::string plan;
  std::uint64_t input_seed = 0;
  double tol = 1e-6;
  int samples = 3;
};

struct LayerDeviation {
  std::string name;
  bool skipped = false;
  double max_abs = 0.0;
  double relative = 0.0;
};

inline void check_chain(const ConvLayerSpec& spec, const LayerRecord& rec) {
  if (rec.sublayers.empty()) throw std::runtime_error("record '" + rec.name + "' has no sub-layers");
  if (rec.sublayers.front().spec.in_channels != spec.in_channels ||
      rec.sublayers.back().spec.out_channels != spec.out_channels)
    throw std::runtime_error("record '" + rec.name + "': sub-layer chain does not match the manifest channels");
  for (std::size_t k = 1; k < rec.sublayers.size(); ++k)
    if (rec.sublayers[k - 1].spec.out_channels != rec.sublayers[k].spec.in_channels)
      throw std::runtime_error("record '" + rec.name + "': broken sub-layer chain at index " + std::to_string(k));
}

inline std::vector<LayerDeviation> measure_deviations(const std::vector<ConvLayer>& layers,
                                                      const CompressionPlan& plan, const fs::path& plan_dir,
                                                      std::uint64_t seed, int samples) {
  std::map<std::string, const LayerRecord*> by_name;
  for (const auto& r : plan.records)
    if (!by_name.emplace(r.name, &r).second) throw std::runtime_error("plan lists '" + r.name + "' twice");
  if (by_name.size() != layers.size())
    throw std::runtime_error("plan has " + std::to_string(by_name.size()) + " records, manifest has " +
                             std::to_string(layers.size()) + " layers");

  std::mt19937_64 rng(seed);
  std::vector<LayerDeviation> out;
  for (const auto& layer : layers) {
    const auto it = by_name.find(layer.spec.name);
    if (it == by_name.end()) throw std::runtime_error("layer '" + layer.spec.name + "' is missing from the plan");
    const LayerRecord& rec = *it->second;
    LayerDeviation dev{layer.spec.name};
    if (rec.method == Method::skip) {
      dev.skipped = true;
      out.push_back(dev);
      continue;
    }
    check_chain(layer.spec, rec);
    const auto seq = load_sublayers(rec, plan_dir);
    const std::size_t fallback = 2 * layer.spec.kernel_size + 1;
    const auto hw = layer.spec.input_hw.value_or(std::array<std::size_t, 2>{fallback, fallback});
    double diff_sq = 0.0, ref_sq = 0.0;
    for (int s = 0; s < samples; ++s) {
      const Tensor x = random_tensor({layer.spec.in_channels, hw[0], hw[1]}, rng);
      const Tensor y = conv2d_forward(x, layer);
      const Tensor z = forward_sequence(x, seq);
      if (y.dims() != z.dims())
        throw std::runtime_error("layer '" + layer.spec.name + "': output shape " + dims_to_string(z.dims()) +
                                 " differs from " + dims_to_string(y.dims()));
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - z[i];
        dev.max_abs = std::max(dev.max_abs, std::abs(d));
        diff_sq += d * d;
        ref_sq += y[i] * y[i];
      }
    }
    dev.relative = ref_sq > 0.0 ? std::sqrt(diff_sq / ref_sq) : std::sqrt(diff_sq);
    out.push_back(dev);
  }
  return out;
}

inline int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<LayerDeviation> devs;
  try {
    if (a.samples < 1) throw std::invalid_argument("--samples must be at least 1");
    ParseContext ctx;
    const auto manifest = read_manifest(a.manifest, ctx);
    const auto plan = read_plan(a.plan, ctx);
    for (const auto& w : ctx.warnings) err << "warning: " << w << "\n";
    const auto layers = load_layers(manifest, fs::path(a.manifest).parent_path());
    devs = measure_deviations(layers, plan, fs::path(a.plan).parent_path(), a.input_seed, a.samples);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kHardError;
  }
  bool ok = true;
  for (const auto& d : devs) {
    out << d.name << ": ";
    if (d.skipped) {
      out << "skipped (original layer kept)\n";
      continue;
    }
    const bool pass = d.max_abs <= a.tol;
    ok = ok && pass;
    out << "max_abs " << format_sci(d.max_abs) << ", relative " << format_sci(d.relative) << "  "
        << (pass ? "ok" : "FAIL") << "\n";
  }
  return ok ? kOk : kPartial;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out = "lwck-demo";
  std::uint64_t seed = 0;
  bool full_rank = false;
};

struct SynthLayer {
  ConvLayerSpec spec;
  std::size_t rank;
};

/// Three layers shaped like a 3x3 conv, a 1x1 reduction and a strided 7x7 stem.
inline std::vector<SynthLayer> synth_layers() {
  std::vector<SynthLayer> v(3);
  v[0].spec = {"conv2_3x3", 8, 12, 3, 1, 1, 1, std::array<std::size_t, 2>{12, 12}};
  v[0].rank = 4;
  v[1].spec = {"3a_3x3_reduce", 16, 8, 1, 1, 0, 1, std::array<std::size_t, 2>{12, 12}};
  v[1].rank = 3;
  v[2].spec = {"conv1_7x7", 3, 8, 7, 2, 3, 1, std::array<std::size_t, 2>{24, 24}};
  v[2].rank = 4;
  return v;
}

/// Weights of exact CP rank (D > 1) or exact matrix rank (D = 1).
inline Tensor rank_exact_weights(const ConvLayerSpec& s, std::size_t rank, std::uint64_t seed) {
  const std::size_t D = s.kernel_size, S = s.in_channels, T = s.out_channels;
  if (D > 1) return weights_from_kernel(unreshape_kernel(reconstruct(random_cpd({D * D, S, T}, rank, seed))));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Matrix a = Matrix::generate(S, rank, [&](std::size_t, std::size_t) { return u(rng); });
  const Matrix b = Matrix::generate(rank, T, [&](std::size_t, std::size_t) { return u(rng); });
  const Matrix m = matmul(a, b);
  return Tensor::generate({T, S, 1, 1}, [&](std::size_t k) { return m(k % S, k / S); });
}

inline int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  try {
    fs::create_directories(a.out);
    std::mt19937_64 rng(a.seed);
    ModelManifest m;
    std::uint64_t k = 0;
    for (const auto& l : synth_layers()) {
      const Tensor w = a.full_rank ? random_tensor(weight_dims(l.spec), rng)
                                   : rank_exact_weights(l.spec, l.rank, a.seed * 1000003u + k);
      ++k;
      const std::string file = l.spec.name + ".lwt";
      write_tensor(w, fs::path(a.out) / file);
      m.layers.push_back({l.spec, file});
    }
    write_manifest(m, fs::path(a.out) / "manifest.json");
    out << "manifest written to " << (fs::path(a.out) / "manifest.json").string() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kHardError;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// argument parsing

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-wise compression of convolutional networks and confidence calibration", "lwck"};
  app.require_subcommand(1);

  CompressArgs ca;
  auto* compress = app.add_subcommand("compress", "factorize the layers of a manifest");
  compress->add_option("manifest", ca.manifest, "model manifest (JSON)")->required();
  compress->add_option("--out", ca.out, "output directory for plan.json and weights")->capture_default_str();
  compress->add_option("--epc-delta", ca.epc_delta, "EPC error budget relative to each kernel norm")
      ->capture_default_str();
  compress->add_option("--rank-threshold", ca.rank_threshold, "max kernel relative error accepted by rank search")
      ->capture_default_str();
  compress->add_option("--max-iters", ca.max_iters, "ALS sweep limit")->capture_default_str();
  compress->add_option("--skip", ca.skip, "glob of layer names to leave untouched (repeatable)");
  compress->add_flag("--force", ca.force, "keep factorizations that add parameters");
  compress->add_option("--seed", ca.seed, "ALS initialization seed")->capture_default_str();
  compress->add_flag("--strict", ca.strict, "reject unknown manifest fields");
  compress->add_flag("--no-epc", ca.no_epc, "plain CP-ALS without correction");

  std::string plan_path;
  bool report_strict = false;
  auto* report = app.add_subcommand("speedup-report", "print per-layer GFLOPs and speedup of a plan");
  report->add_option("plan", plan_path, "plan file (JSON)")->required();
  report->add_flag("--strict", report_strict, "reject unknown plan fields");

  CalibrateArgs cal;
  auto* calibrate = app.add_subcommand("calibrate", "ECE and reliability data of binary predictions");
  calibrate->add_option("predictions", cal.predictions, "CSV with header p_hat,label[,logit]")->required();
  calibrate->add_option("--bins", cal.bins, "number of equal-width bins")->capture_default_str()->check(
      CLI::PositiveNumber);
  calibrate->add_flag("--fit-temperature", cal.fit_temperature, "fit a temperature on the logits");
  calibrate->add_option("--out", cal.out, "reliability CSV output");

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "compare original and factorized layers on random inputs");
  verify->add_option("manifest", va.manifest, "model manifest (JSON)")->required();
  verify->add_option("plan", va.plan, "plan file (JSON)")->required();
  verify->add_option("--input-seed", va.input_seed, "seed for the random inputs")->capture_default_str();
  verify->add_option("--tol", va.tol, "max-abs output deviation allowed")->capture_default_str();
  verify->add_option("--samples", va.samples, "random inputs per layer")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a small synthetic manifest with weights");
  synth->add_option("--out", sa.out, "output directory")->capture_default_str();
  synth->add_option("--seed", sa.seed, "weight seed")->capture_default_str();
  synth->add_flag("--full-rank", sa.full_rank, "dense random weights instead of rank-exact ones");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kHardError;
  }

  if (compress->parsed()) return cmd_compress(ca, out, err);
  if (report->parsed()) return cmd_speedup_report(plan_path, report_strict, out, err);
  if (calibrate->parsed()) return cmd_calibrate(cal, out, err);
  if (verify->parsed()) return cmd_verify(va, out, err);
  if (synth->parsed()) return cmd_synth(sa, out, err);
  return kHardError;
}

}  // namespace lwck::cli
