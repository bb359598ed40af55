#pragma once

// On-disk formats.
//
// Tensor file (little-endian):
//   bytes 0-3   magic "LWTN"
//   byte  4     version (1)
//   byte  5     dtype: 0 = float32, 1 = float64
//   byte  6     ndim
//   byte  7     reserved, 0
//   ndim x u64  dims
//   payload     row-major scalars
//
// Manifest and plan are JSON documents (see manifest_to_json / plan_to_json
// for field names). Predictions are CSV with header "p_hat,label[,logit]".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

#include "json.hpp"
#include "lwck/calibration.hpp"
#include "lwck/conv.hpp"
#include "lwck/planner.hpp"
#include "lwck/tensor.hpp"

namespace lwck {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Atomic writes

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("cannot rename onto '" + path.string() + "': " + ec.message());
  }
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Tensor files

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

class TensorFileError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, bad_dtype, bad_header, truncated, dim_overflow, trailing_data };

  TensorFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 4> kTensorMagic{'L', 'W', 'T', 'N'};
inline constexpr std::uint8_t kTensorVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t, DType dtype = DType::f64) {
  if (t.order() > 255) throw std::invalid_argument("tensor order exceeds the file format limit");
  std::string out;
  out.append(kTensorMagic.data(), kTensorMagic.size());
  out.push_back(static_cast<char>(kTensorVersion));
  out.push_back(static_cast<char>(dtype));
  out.push_back(static_cast<char>(t.order()));
  out.push_back('\0');
  for (auto d : t.dims()) detail::put_le<std::uint64_t>(out, d);
  for (double v : t.data()) {
    if (dtype == DType::f64)
      detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    else
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Tensor decode_tensor(std::string_view bytes, const std::string& source = "<memory>") {
  using K = TensorFileError::Kind;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kTensorMagic.data(), 4) != 0)
    throw TensorFileError(K::bad_magic, source + ": bad magic");
  if (bytes.size() < 8) throw TensorFileError(K::truncated, source + ": truncated header");
  if (p[4] != kTensorVersion)
    throw TensorFileError(K::version_mismatch, source + ": unsupported version " + std::to_string(p[4]));
  if (p[5] > 1) throw TensorFileError(K::bad_dtype, source + ": unknown dtype " + std::to_string(p[5]));
  const auto dtype = static_cast<DType>(p[5]);
  const std::size_t ndim = p[6];
  if (ndim == 0) throw TensorFileError(K::bad_header, source + ": ndim is 0");
  if (p[7] != 0) throw TensorFileError(K::bad_header, source + ": reserved byte is not 0");
  if (bytes.size() < 8 + 8 * ndim) throw TensorFileError(K::truncated, source + ": truncated dims");

  Dims dims(ndim);
  std::uint64_t count = 1;
  for (std::size_t k = 0; k < ndim; ++k) {
    const auto d = detail::get_le<std::uint64_t>(p + 8 + 8 * k);
    if (d == 0) throw TensorFileError(K::bad_header, source + ": zero extent in dim " + std::to_string(k));
    if (count > std::numeric_limits<std::uint64_t>::max() / d || d > std::numeric_limits<std::size_t>::max())
      throw TensorFileError(K::dim_overflow, source + ": element count overflows");
    count *= d;
    dims[k] = static_cast<std::size_t>(d);
  }
  const std::uint64_t elem = dtype == DType::f64 ? 8 : 4;
  if (count > (std::numeric_limits<std::uint64_t>::max() - 8 - 8 * ndim) / elem)
    throw TensorFileError(K::dim_overflow, source + ": payload size overflows");
  const std::uint64_t need = 8 + 8 * ndim + count * elem;
  if (bytes.size() < need)
    throw TensorFileError(K::truncated, source + ": truncated payload (" + std::to_string(bytes.size()) + " of " +
                                            std::to_string(need) + " bytes)");
  if (bytes.size() > need) throw TensorFileError(K::trailing_data, source + ": trailing bytes after payload");

  std::vector<double> data(static_cast<std::size_t>(count));
  const unsigned char* q = p + 8 + 8 * ndim;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (dtype == DType::f64)
      data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(q + 8 * i));
    else
      data[i] = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(q + 4 * i)));
  }
  return Tensor(std::move(dims), std::move(data));
}

inline void write_tensor(const Tensor& t, const fs::path& path, DType dtype = DType::f64) {
  write_file_atomic(path, encode_tensor(t, dtype));
}

inline Tensor read_tensor(const fs::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw TensorFileError(TensorFileError::Kind::io, e.what());
  }
  return decode_tensor(bytes, path.string());
}

// ---------------------------------------------------------------------------
// JSON helpers

/// Collects complaints about unknown fields. In strict mode they are errors.
struct ParseContext {
  bool strict = false;
  std::vector<std::string> warnings;

  void check_fields(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
    for (const auto& [key, _] : obj.items()) {
      bool known = false;
      for (const char* a : allowed) known = known || key == a;
      if (known) continue;
      const std::string msg = where + ": unknown field '" + key + "'";
      if (strict) throw std::invalid_argument(msg);
      warnings.push_back(msg);
    }
  }
};

namespace detail {

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw std::invalid_argument(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(where + ": field '" + key + "': " + e.what());
  }
}

template <typename T>
T optional_field(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  return required<T>(obj, key, where);
}

}  // namespace detail

inline json spec_to_json(const ConvLayerSpec& s) {
  json j{{"name", s.name},
         {"in_channels", s.in_channels},
         {"out_channels", s.out_channels},
         {"kernel_size", s.kernel_size},
         {"stride", s.stride},
         {"padding", s.padding},
         {"groups", s.groups}};
  j["input_hw"] = s.input_hw ? json::array({(*s.input_hw)[0], (*s.input_hw)[1]}) : json(nullptr);
  return j;
}

inline ConvLayerSpec spec_from_json(const json& j, const std::string& where) {
  ConvLayerSpec s;
  s.name = detail::required<std::string>(j, "name", where);
  s.in_channels = detail::required<std::size_t>(j, "in_channels", where);
  s.out_channels = detail::required<std::size_t>(j, "out_channels", where);
  s.kernel_size = detail::required<std::size_t>(j, "kernel_size", where);
  s.stride = detail::optional_field<std::size_t>(j, "stride", 1, where);
  s.padding = detail::optional_field<std::size_t>(j, "padding", 0, where);
  s.groups = detail::optional_field<std::size_t>(j, "groups", 1, where);
  if (j.contains("input_hw") && !j.at("input_hw").is_null()) {
    const auto hw = detail::required<std::vector<std::size_t>>(j, "input_hw", where);
    if (hw.size() != 2) throw std::invalid_argument(where + ": input_hw must have two entries");
    s.input_hw = std::array<std::size_t, 2>{hw[0], hw[1]};
  }
  return s;
}

#define LWCK_SPEC_FIELDS "name", "in_channels", "out_channels", "kernel_size", "stride", "padding", "groups", "input_hw"

// ---------------------------------------------------------------------------
// Manifest

inline json manifest_to_json(const ModelManifest& m) {
  json layers = json::array();
  for (const auto& l : m.layers) {
    json j = spec_to_json(l.spec);
    j["weights"] = l.weights;
    layers.push_back(std::move(j));
  }
  return json{{"layers", std::move(layers)}};
}

inline ModelManifest manifest_from_json(const json& doc, ParseContext& ctx) {
  ctx.check_fields(doc, {"layers"}, "manifest");
  if (!doc.contains("layers") || !doc.at("layers").is_array())
    throw std::invalid_argument("manifest: 'layers' must be an array");
  ModelManifest m;
  std::size_t i = 0;
  for (const auto& j : doc.at("layers")) {
    const std::string where = "manifest layer " + std::to_string(i++);
    ctx.check_fields(j, {LWCK_SPEC_FIELDS, "weights"}, where);
    m.layers.push_back({spec_from_json(j, where), detail::required<std::string>(j, "weights", where)});
  }
  validate(m);
  return m;
}

inline ModelManifest read_manifest(const fs::path& path, ParseContext& ctx) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return manifest_from_json(doc, ctx);
}

inline void write_manifest(const ModelManifest& m, const fs::path& path) {
  write_file_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

/// Loads every layer's weights, resolving references against `base_dir`.
/// The error names the first layer whose weights cannot be read.
inline std::vector<ConvLayer> load_layers(const ModelManifest& m, const fs::path& base_dir) {
  std::vector<ConvLayer> out;
  for (const auto& l : m.layers) {
    Tensor w;
    try {
      w = read_tensor(base_dir / l.weights);
    } catch (const std::exception& e) {
      throw std::runtime_error("layer '" + l.spec.name + "': cannot load weights: " + e.what());
    }
    if (w.dims() != weight_dims(l.spec))
      throw std::runtime_error("layer '" + l.spec.name + "': weights " + dims_to_string(w.dims()) +
                               " do not match expected " + dims_to_string(weight_dims(l.spec)));
    out.push_back({l.spec, std::move(w)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan

inline json plan_to_json(const CompressionPlan& plan) {
  json records = json::array();
  for (const auto& r : plan.records) {
    json subs = json::array();
    for (const auto& s : r.sublayers) {
      json j = spec_to_json(s.spec);
      j["kind"] = to_string(s.kind);
      j["params"] = s.params;
      j["flops"] = s.flops;
      j["weights"] = s.weights;
      subs.push_back(std::move(j));
    }
    records.push_back(json{{"name", r.name},
                           {"method", to_string(r.method)},
                           {"rank", r.rank},
                           {"params_before", r.params_before},
                           {"params_after", r.params_after},
                           {"flops_before", r.flops_before},
                           {"flops_after", r.flops_after},
                           {"speedup", r.speedup},
                           {"kernel_rel_error", r.kernel_rel_error},
                           {"skip_reason", to_string(r.skip_reason)},
                           {"detail", r.detail},
                           {"sublayers", std::move(subs)}});
  }
  const auto& t = plan.totals;
  return json{{"records", std::move(records)},
              {"totals",
               {{"params_before", t.params_before},
                {"params_after", t.params_after},
                {"flops_before", t.flops_before},
                {"flops_after", t.flops_after},
                {"speedup", t.speedup}}}};
}

inline CompressionPlan plan_from_json(const json& doc, ParseContext& ctx) {
  ctx.check_fields(doc, {"records", "totals"}, "plan");
  if (!doc.contains("records") || !doc.at("records").is_array())
    throw std::invalid_argument("plan: 'records' must be an array");
  CompressionPlan plan;
  std::size_t i = 0;
  for (const auto& j : doc.at("records")) {
    const std::string where = "plan record " + std::to_string(i++);
    ctx.check_fields(j,
                     {"name", "method", "rank", "params_before", "params_after", "flops_before", "flops_after",
                      "speedup", "kernel_rel_error", "skip_reason", "detail", "sublayers"},
                     where);
    LayerRecord r;
    r.name = detail::required<std::string>(j, "name", where);
    r.method = method_from_string(detail::required<std::string>(j, "method", where));
    r.rank = detail::optional_field<std::size_t>(j, "rank", 0, where);
    r.params_before = detail::required<Count>(j, "params_before", where);
    r.params_after = detail::required<Count>(j, "params_after", where);
    r.flops_before = detail::required<Count>(j, "flops_before", where);
    r.flops_after = detail::required<Count>(j, "flops_after", where);
    r.speedup = detail::required<double>(j, "speedup", where);
    r.kernel_rel_error = detail::optional_field<double>(j, "kernel_rel_error", 0.0, where);
    r.skip_reason = skip_reason_from_string(detail::optional_field<std::string>(j, "skip_reason", "", where));
    r.detail = detail::optional_field<std::string>(j, "detail", "", where);
    if (j.contains("sublayers")) {
      if (!j.at("sublayers").is_array()) throw std::invalid_argument(where + ": 'sublayers' must be an array");
      std::size_t k = 0;
      for (const auto& sj : j.at("sublayers")) {
        const std::string swhere = where + " sublayer " + std::to_string(k++);
        ctx.check_fields(sj, {LWCK_SPEC_FIELDS, "kind", "params", "flops", "weights"}, swhere);
        SublayerRecord s;
        s.spec = spec_from_json(sj, swhere);
        s.kind = layer_kind_from_string(detail::required<std::string>(sj, "kind", swhere));
        s.params = detail::required<Count>(sj, "params", swhere);
        s.flops = detail::required<Count>(sj, "flops", swhere);
        s.weights = detail::optional_field<std::string>(sj, "weights", "", swhere);
        r.sublayers.push_back(std::move(s));
      }
    }
    plan.records.push_back(std::move(r));
  }
  if (doc.contains("totals")) {
    const auto& t = doc.at("totals");
    ctx.check_fields(t, {"params_before", "params_after", "flops_before", "flops_after", "speedup"}, "plan totals");
    plan.totals.params_before = detail::required<Count>(t, "params_before", "plan totals");
    plan.totals.params_after = detail::required<Count>(t, "params_after", "plan totals");
    plan.totals.flops_before = detail::required<Count>(t, "flops_before", "plan totals");
    plan.totals.flops_after = detail::required<Count>(t, "flops_after", "plan totals");
    plan.totals.speedup = detail::required<double>(t, "speedup", "plan totals");
  } else {
    plan.totals = compute_totals(plan.records);
  }
  return plan;
}

inline CompressionPlan read_plan(const fs::path& path, ParseContext& ctx) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return plan_from_json(doc, ctx);
}

inline void write_plan(const CompressionPlan& plan, const fs::path& path) {
  write_file_atomic(path, plan_to_json(plan).dump(2) + "\n");
}

inline std::string sanitize_file_stem(const std::string& name) {
  std::string s = name;
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')) c = '_';
  return s.empty() ? std::string("layer") : s;
}

/// Writes factorized weights next to `plan.json` in `out_dir` and fills the
/// sub-layer weight references. Tensors are written first, the plan last.
inline CompressionPlan save_compression(const CompressionResult& result, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  CompressionPlan plan = result.plan;
  std::set<std::string> used;
  for (std::size_t i = 0; i < plan.records.size(); ++i) {
    auto& rec = plan.records[i];
    const auto& layers = result.layers.at(i);
    if (layers.size() != rec.sublayers.size())
      throw std::logic_error("record '" + rec.name + "' and its factorized layers disagree");
    std::string stem = sanitize_file_stem(rec.name);
    while (!used.insert(stem).second) stem += "_";
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const std::string file = stem + "." + std::to_string(k) + ".lwt";
      write_tensor(layers[k].weights, out_dir / file);
      rec.sublayers[k].weights = file;
    }
  }
  write_plan(plan, out_dir / "plan.json");
  return plan;
}

/// Reloads the factorized sequence of one plan record.
inline std::vector<FactorizedLayer> load_sublayers(const LayerRecord& rec, const fs::path& base_dir) {
  std::vector<FactorizedLayer> out;
  for (const auto& s : rec.sublayers) {
    if (s.weights.empty()) throw std::runtime_error("record '" + rec.name + "': sub-layer without weights");
    FactorizedLayer l{s.kind, s.spec, read_tensor(base_dir / s.weights)};
    validate(l);
    out.push_back(std::move(l));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predictions CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out) {
    const auto b = c.find_first_not_of(" \t\r");
    const auto e = c.find_last_not_of(" \t\r");
    c = b == std::string::npos ? std::string() : c.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_double(const std::string& s, std::size_t line, const char* what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size())
    throw std::invalid_argument("line " + std::to_string(line) + ": invalid " + what + " '" + s + "'");
  return v;
}

}  // namespace detail

inline PredictionSet parse_predictions(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  bool with_logits = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto head = detail::split_csv_line(line);
    if (head.size() == 2 && head[0] == "p_hat" && head[1] == "label") break;
    if (head.size() == 3 && head[0] == "p_hat" && head[1] == "label" && head[2] == "logit") {
      with_logits = true;
      break;
    }
    throw std::invalid_argument("line " + std::to_string(lineno) + ": expected header 'p_hat,label[,logit]'");
  }
  if (lineno == 0) throw std::invalid_argument("predictions file is empty");

  PredictionSet p;
  if (with_logits) p.logits.emplace();
  const std::size_t ncols = with_logits ? 3 : 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != ncols)
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected " + std::to_string(ncols) +
                                  " fields, got " + std::to_string(cells.size()));
    const double ph = detail::parse_double(cells[0], lineno, "p_hat");
    if (!(ph >= 0.0 && ph <= 1.0))
      throw std::invalid_argument("line " + std::to_string(lineno) + ": p_hat outside [0, 1]");
    int label = -1;
    if (cells[1] == "0") label = 0;
    if (cells[1] == "1") label = 1;
    if (label < 0) throw std::invalid_argument("line " + std::to_string(lineno) + ": label must be 0 or 1");
    p.p_hat.push_back(ph);
    p.labels.push_back(label);
    if (with_logits) p.logits->push_back(detail::parse_double(cells[2], lineno, "logit"));
  }
  return p;
}

inline PredictionSet read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return parse_predictions(in);
}

inline std::string format_predictions(const PredictionSet& p) {
  validate(p);
  std::ostringstream out;
  out << std::setprecision(17);
  out << (p.logits ? "p_hat,label,logit\n" : "p_hat,label\n");
  for (std::size_t i = 0; i < p.size(); ++i) {
    out << p.p_hat[i] << ',' << p.labels[i];
    if (p.logits) out << ',' << (*p.logits)[i];
    out << '\n';
  }
  return out.str();
}

inline void write_predictions(const PredictionSet& p, const fs::path& path) {
  write_file_atomic(path, format_predictions(p));
}

inline std::string format_reliability_csv(const std::vector<ReliabilityRecord>& recs) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "bin_midpoint,acc,conf,gap,count\n";
  for (const auto& r : recs) out << r.midpoint << ',' << r.acc << ',' << r.conf << ',' << r.gap << ',' << r.count << '\n';
  return out.str();
}

}  // namespace lwck
