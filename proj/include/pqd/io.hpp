// SPDX-License-Identifier: Apache-2.0
//
// Binary file formats. All integers and floats are little-endian.
//
// Checkpoint ("DQCKPT1"):
//   magic[7] | u32 D | u32 L | L x (u32 out, u32 in) | u32 time_embed_dim |
//   u32 num_classes | f32 params (per layer: row-major weight, bias; then the
//   num_classes x class_embed_dim table). class_embed_dim = in_0 - D - E.
//
// Calibration set ("DQCALIB1"):
//   magic[8] | u32 count | u32 D | u32 T | u8 conditional | config echo
//   (u32 N, f64 mu, f64 sigma, u32 sampler, u32 inference steps, u64 seed,
//   f64 drop_prob, u32 grid_size, u32 time law) | count x (u32 t,
//   i32 condition, D x f32 x). Condition -1 is unconditional.
//
// Quantized model ("DQQMOD1"):
//   magic[7] | u32 version | u32 weight bits | u32 act bits |
//   u8 weight strategy | u8 calibration strategy (255 = none) |
//   u64 checkpoint byte length | embedded checkpoint |
//   per layer: u32 channel count (0 when weights are full precision),
//   channel count x record, u8 has activation params, [record]
//   where record = f64 scale | i32 zero point | u8 bits | u8 signed.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pqd/calibration.hpp"
#include "pqd/common.hpp"
#include "pqd/denoiser.hpp"
#include "pqd/quantizer.hpp"

namespace pqd {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.append(s); }

  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf_.append(bytes, sizeof(T));
  }

  void u8(std::uint8_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void i32(std::int32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(double v) { put(static_cast<float>(v)); }
  void f64(double v) { put(v); }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    if (data_.substr(pos_, magic.size()) != magic)
      throw FormatError(what_ + ": bad magic (expected \"" + std::string(magic) + "\")");
    pos_ += magic.size();
  }

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw FormatError(what_ + ": unexpected end of file");
    char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f32() { return static_cast<double>(get<float>()); }
  double f64() { return get<double>(); }

  std::string_view take(std::size_t n) {
    if (pos_ + n > data_.size()) throw FormatError(what_ + ": unexpected end of file");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_end() const {
    if (pos_ != data_.size()) throw FormatError(what_ + ": trailing bytes after payload");
  }

  const std::string& what() const { return what_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr std::string_view kCheckpointMagic = "DQCKPT1";

inline std::string encode_checkpoint(const Denoiser& m) {
  m.validate();
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(m.dim));
  w.u32(static_cast<std::uint32_t>(m.num_layers()));
  for (const auto& L : m.layers) {
    w.u32(static_cast<std::uint32_t>(L.out_features()));
    w.u32(static_cast<std::uint32_t>(L.in_features()));
  }
  w.u32(static_cast<std::uint32_t>(m.time_embed_dim));
  w.u32(static_cast<std::uint32_t>(m.num_classes));
  for (double v : flatten_parameters(m)) w.f32(v);
  return w.bytes();
}

inline Denoiser decode_checkpoint(ByteReader& r) {
  r.expect_magic(kCheckpointMagic);
  constexpr std::uint32_t kMaxDim = 1u << 20;
  Denoiser m;
  const auto D = r.u32();
  const auto L = r.u32();
  if (D == 0 || D > kMaxDim || L == 0 || L > 1024) throw FormatError(r.what() + ": implausible header");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(L);
  for (auto& s : shapes) {
    s.first = r.u32();
    s.second = r.u32();
    if (s.first == 0 || s.second == 0 || s.first > kMaxDim || s.second > kMaxDim)
      throw FormatError(r.what() + ": implausible layer shape");
  }
  m.dim = static_cast<int>(D);
  m.time_embed_dim = static_cast<int>(r.u32());
  m.num_classes = static_cast<int>(r.u32());
  const auto in0 = static_cast<int>(shapes.front().second);
  const int C = in0 - m.dim - m.time_embed_dim;
  if (C < 0 || (m.num_classes == 0 && C != 0) || m.num_classes > static_cast<int>(kMaxDim))
    throw FormatError(r.what() + ": inconsistent embedding widths");
  m.class_table = Matrix(m.num_classes, C);
  for (std::uint32_t l = 0; l < L; ++l) {
    AffineLayer layer;
    layer.weight = Matrix(shapes[l].first, shapes[l].second);
    layer.bias = Vector(shapes[l].first);
    layer.act = l + 1 == L ? Activation::kIdentity : Activation::kSiLU;
    m.layers.push_back(std::move(layer));
  }
  std::vector<double> params(flatten_parameters(m).size());
  for (double& v : params) v = r.f32();
  assign_parameters(m, params);
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw FormatError(r.what() + ": " + e.what());
  }
  return m;
}

inline Denoiser decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  Denoiser m = decode_checkpoint(r);
  r.expect_end();
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Denoiser& m) {
  write_file(path, encode_checkpoint(m));
}

inline Denoiser load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Calibration set

inline constexpr std::string_view kCalibrationMagic = "DQCALIB1";

inline std::string encode_calibration_set(const CalibrationSet& s) {
  ByteWriter w;
  w.raw(kCalibrationMagic);
  w.u32(static_cast<std::uint32_t>(s.samples.size()));
  w.u32(static_cast<std::uint32_t>(s.dim));
  w.u32(static_cast<std::uint32_t>(s.config.num_steps));
  w.u8(s.conditional ? 1 : 0);
  const auto& c = s.config;
  w.u32(static_cast<std::uint32_t>(c.num_samples));
  w.f64(c.mu);
  w.f64(c.sigma);
  w.u32(static_cast<std::uint32_t>(c.sampler));
  w.u32(static_cast<std::uint32_t>(c.num_inference_steps));
  w.u64(c.seed);
  w.f64(c.drop_prob);
  w.u32(static_cast<std::uint32_t>(c.grid_size));
  w.u32(static_cast<std::uint32_t>(c.law));
  for (const auto& smp : s.samples) {
    if (smp.x.size() != s.dim) throw std::invalid_argument("calibration sample width mismatch");
    w.u32(static_cast<std::uint32_t>(smp.t));
    w.i32(smp.condition);
    for (Eigen::Index j = 0; j < smp.x.size(); ++j) w.f32(smp.x[j]);
  }
  return w.bytes();
}

inline CalibrationSet decode_calibration_set(std::string_view bytes, const std::string& what = "calibration set") {
  ByteReader r(bytes, what);
  r.expect_magic(kCalibrationMagic);
  CalibrationSet s;
  const auto count = r.u32();
  s.dim = static_cast<int>(r.u32());
  const auto T = r.u32();
  s.conditional = r.u8() != 0;
  auto& c = s.config;
  c.num_samples = static_cast<int>(r.u32());
  c.mu = r.f64();
  c.sigma = r.f64();
  const auto sampler = r.u32();
  if (sampler > 1) throw FormatError(what + ": unknown sampler code");
  c.sampler = static_cast<SamplerKind>(sampler);
  c.num_inference_steps = static_cast<int>(r.u32());
  c.seed = r.u64();
  c.drop_prob = r.f64();
  c.grid_size = static_cast<int>(r.u32());
  const auto law = r.u32();
  if (law > 2) throw FormatError(what + ": unknown time law code");
  c.law = static_cast<TimeLaw>(law);
  c.num_steps = static_cast<int>(T);
  if (s.dim <= 0 || T == 0) throw FormatError(what + ": invalid header");
  const std::size_t expected = static_cast<std::size_t>(c.num_samples) * (s.conditional ? 2 : 1);
  if (count != expected) throw FormatError(what + ": record count does not match the config echo");
  const std::size_t record = 8 + 4 * static_cast<std::size_t>(s.dim);
  if (bytes.size() < record * count) throw FormatError(what + ": unexpected end of file");
  s.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CalibrationSample smp;
    smp.t = static_cast<int>(r.u32());
    if (smp.t < 0 || static_cast<std::uint32_t>(smp.t) >= T) throw FormatError(what + ": time step out of range");
    smp.condition = r.i32();
    if (smp.condition < kUnconditional) throw FormatError(what + ": invalid condition id");
    smp.x = Vector(s.dim);
    for (int j = 0; j < s.dim; ++j) smp.x[j] = r.f32();
    if (!smp.x.allFinite()) throw FormatError(what + ": non-finite sample");
    s.samples.push_back(std::move(smp));
  }
  r.expect_end();
  return s;
}

inline void save_calibration_set(const std::filesystem::path& path, const CalibrationSet& s) {
  write_file(path, encode_calibration_set(s));
}

inline CalibrationSet load_calibration_set(const std::filesystem::path& path) {
  return decode_calibration_set(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Quantized model

inline constexpr std::string_view kQuantizedMagic = "DQQMOD1";
inline constexpr std::uint32_t kQuantizedVersion = 1;
inline constexpr std::uint8_t kNoStrategy = 255;

struct QuantizedModelFile {
  QuantizedModel model;
  std::optional<CalibrationStrategy> strategy;
};

namespace detail {
inline void put_params(ByteWriter& w, const QuantParams& p) {
  w.f64(p.scale);
  w.i32(p.zero_point);
  w.u8(static_cast<std::uint8_t>(p.bits));
  w.u8(p.is_signed ? 1 : 0);
}

inline QuantParams get_params(ByteReader& r) {
  const double scale = r.f64();
  const auto z = r.i32();
  const int bits = r.u8();
  const bool is_signed = r.u8() != 0;
  try {
    return QuantParams::make(scale, z, bits, is_signed);
  } catch (const std::exception& e) {
    throw FormatError(r.what() + ": invalid quantization parameters (" + e.what() + ")");
  }
}
}  // namespace detail

inline std::string encode_quantized_model(const QuantizedModel& q, std::optional<CalibrationStrategy> strategy) {
  ByteWriter w;
  w.raw(kQuantizedMagic);
  w.u32(kQuantizedVersion);
  w.u32(static_cast<std::uint32_t>(q.bits.weight_bits));
  w.u32(static_cast<std::uint32_t>(q.bits.act_bits));
  w.u8(static_cast<std::uint8_t>(q.weight_strategy));
  w.u8(strategy ? static_cast<std::uint8_t>(*strategy) : kNoStrategy);
  const std::string ckpt = encode_checkpoint(q.base);
  w.u64(ckpt.size());
  w.raw(ckpt);
  for (int l = 0; l < q.num_layers(); ++l) {
    const auto lu = static_cast<std::size_t>(l);
    if (q.bits.weights_quantized()) {
      w.u32(static_cast<std::uint32_t>(q.weight_params[lu].size()));
      for (const auto& p : q.weight_params[lu]) detail::put_params(w, p);
    } else {
      w.u32(0);
    }
    w.u8(q.act_params[lu] ? 1 : 0);
    if (q.act_params[lu]) detail::put_params(w, *q.act_params[lu]);
  }
  return w.bytes();
}

inline QuantizedModelFile decode_quantized_model(std::string_view bytes, const std::string& what = "quantized model") {
  ByteReader r(bytes, what);
  r.expect_magic(kQuantizedMagic);
  if (r.u32() != kQuantizedVersion) throw FormatError(what + ": unsupported version");
  BitConfig bits{static_cast<int>(r.u32()), static_cast<int>(r.u32())};
  try {
    bits.validate();
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const auto ws = r.u8();
  const auto cs = r.u8();
  if (ws > 1 || (cs > 3 && cs != kNoStrategy)) throw FormatError(what + ": unknown strategy code");
  const auto ckpt_len = r.u64();
  if (ckpt_len > bytes.size()) throw FormatError(what + ": embedded checkpoint length exceeds file size");
  Denoiser base = decode_checkpoint(r.take(static_cast<std::size_t>(ckpt_len)), what + " (embedded checkpoint)");
  std::vector<std::vector<QuantParams>> wp;
  std::vector<std::optional<QuantParams>> ap;
  for (int l = 0; l < base.num_layers(); ++l) {
    const auto n = r.u32();
    if (n > 0) {
      std::vector<QuantParams> per;
      for (std::uint32_t c = 0; c < n; ++c) per.push_back(detail::get_params(r));
      wp.push_back(std::move(per));
    }
    if (r.u8() != 0) {
      ap.push_back(detail::get_params(r));
    } else {
      ap.push_back(std::nullopt);
    }
  }
  r.expect_end();
  QuantizedModelFile f{{}, cs == kNoStrategy ? std::nullopt : std::optional(static_cast<CalibrationStrategy>(cs))};
  try {
    f.model = assemble_quantized_model(std::move(base), bits, static_cast<WeightStrategy>(ws), std::move(wp),
                                       std::move(ap));
  } catch (const std::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  return f;
}

inline void save_quantized_model(const std::filesystem::path& path, const QuantizedModel& q,
                                 std::optional<CalibrationStrategy> strategy) {
  write_file(path, encode_quantized_model(q, strategy));
}

inline QuantizedModelFile load_quantized_model(const std::filesystem::path& path) {
  return decode_quantized_model(read_file(path), path.string());
}

/// Loads either a quantized model or a plain checkpoint (as W32A32).
inline QuantizedModelFile load_any_model(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.starts_with(kCheckpointMagic)) {
    return {build_quantized_model(decode_checkpoint(bytes, path.string()), BitConfig{}, WeightStrategy::kMinMax,
                                  std::nullopt),
            std::nullopt};
  }
  return decode_quantized_model(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Text formats

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string encode_points_csv(const Matrix& x) {
  std::ostringstream ss;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) ss << (j ? "," : "") << format_double(x(i, j));
    ss << '\n';
  }
  return ss.str();
}

inline Matrix decode_points_csv(const std::string& text, const std::string& what = "points") {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw FormatError(what + ": malformed number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw FormatError(what + ": ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.front().empty()) throw FormatError(what + ": no data");
  Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return x;
}

}  // namespace pqd
