// SPDX-License-Identifier: Apache-2.0
//
// Uniform affine fake quantization:
//
//   x_sim = s * (clamp(round(x / s) + z, q_min, q_max) - z)
//
// Rounding is half-away-from-zero (std::round) so results are identical on
// every platform. Weights use per-output-channel symmetric parameters
// (z = 0); activations use per-tensor asymmetric parameters.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "pqd/common.hpp"
#include "pqd/denoiser.hpp"

namespace pqd {

struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;
  bool is_signed = false;
  std::int32_t q_min = 0;
  std::int32_t q_max = 255;

  static QuantParams make(double scale, std::int32_t zero_point, int bits, bool is_signed) {
    require(bits >= 2 && bits <= 16, "bitwidth must lie in [2, 16]");
    require(std::isfinite(scale) && scale > 0.0, "scale must be positive and finite");
    QuantParams p;
    p.scale = scale;
    p.zero_point = zero_point;
    p.bits = bits;
    p.is_signed = is_signed;
    p.q_min = is_signed ? -(1 << (bits - 1)) : 0;
    p.q_max = is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
    require(zero_point >= p.q_min && zero_point <= p.q_max, "zero point outside [q_min, q_max]");
    return p;
  }

  double lowest() const { return scale * (q_min - zero_point); }
  double highest() const { return scale * (q_max - zero_point); }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline double fake_quant(double x, const QuantParams& qp) {
  double q = std::round(x / qp.scale) + qp.zero_point;
  q = std::clamp(q, static_cast<double>(qp.q_min), static_cast<double>(qp.q_max));
  return qp.scale * (q - qp.zero_point);
}

inline Matrix quant_dequant(const Matrix& x, const QuantParams& qp) {
  if (!x.allFinite()) throw std::invalid_argument("quant_dequant: non-finite input");
  return x.unaryExpr([&](double v) { return fake_quant(v, qp); });
}

inline std::vector<double> quant_dequant(std::span<const double> x, const QuantParams& qp) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw std::invalid_argument("quant_dequant: non-finite input");
    out[i] = fake_quant(x[i], qp);
  }
  return out;
}

/// Sum of squared reconstruction errors.
inline double l2_error(std::span<const double> x, const QuantParams& qp) {
  double acc = 0.0;
  for (double v : x) {
    const double d = v - fake_quant(v, qp);
    acc += d * d;
  }
  return acc;
}

namespace detail {

inline std::int32_t center_code(int bits, bool is_signed) { return is_signed ? 0 : (1 << (bits - 1)); }

/// Constant tensors: unit scale when the constant fits on the integer grid
/// at that scale, with the zero point placing it at the centre code.
inline QuantParams constant_params(double c, int bits, bool is_signed) {
  const double half = static_cast<double>((1 << (bits - 1)) - 1);
  const double s = std::abs(c) <= half ? 1.0 : std::abs(c) / half;
  const auto q_min = is_signed ? -(1 << (bits - 1)) : 0;
  const auto q_max = is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
  const auto z = std::clamp(center_code(bits, is_signed) - static_cast<std::int32_t>(std::round(c / s)), q_min, q_max);
  return QuantParams::make(s, z, bits, is_signed);
}

/// Asymmetric parameters mapping lo to q_min; [lo, hi] must contain zero.
inline QuantParams range_params(double lo, double hi, int bits, bool is_signed) {
  const double levels = static_cast<double>((1 << bits) - 1);
  const double s = (hi - lo) / levels;
  const auto q_min = is_signed ? -(1 << (bits - 1)) : 0;
  return QuantParams::make(s, q_min - static_cast<std::int32_t>(std::round(lo / s)), bits, is_signed);
}

struct Extent {
  double min = 0.0;
  double max = 0.0;
};

inline Extent extent(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("empty tensor");
  Extent e{x[0], x[0]};
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite tensor entry");
    e.min = std::min(e.min, v);
    e.max = std::max(e.max, v);
  }
  return e;
}

inline void check_grid(int bits, int grid_size) {
  require(bits >= 2 && bits <= 16, "bitwidth must lie in [2, 16]");
  require(grid_size >= 1, "grid_size must be >= 1");
}

/// Upper bound on breakpoints (elements x levels x zero points) for the
/// exact scale search.
inline constexpr std::size_t kExactSearchBudget = std::size_t{1} << 20;

struct ScaleCandidate {
  double scale = 0.0;
  double error = 0.0;
};

/// Global minimum over s > 0 of the squared error at a fixed zero point.
/// Each code changes by one at s = |x| / (j + 0.5); between breakpoints the
/// error is A - 2 s B + s^2 C, and it is continuous across them.
inline std::optional<ScaleCandidate> exact_scale_search(std::span<const double> x, int bits, bool is_signed,
                                                        std::int32_t z) {
  const std::int32_t q_min = is_signed ? -(1 << (bits - 1)) : 0;
  const std::int32_t q_max = is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
  struct Event {
    double s;
    std::size_t i;
  };
  std::vector<Event> events;
  std::vector<double> m(x.size(), 0.0);
  double A = 0.0, B = 0.0, C = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    A += v * v;
    if (v == 0.0) continue;
    const std::int32_t top = v > 0.0 ? q_max - z : z - q_min;  // |m| as s -> 0
    m[i] = v > 0.0 ? top : -top;
    B += v * m[i];
    C += m[i] * m[i];
    for (std::int32_t j = top - 1; j >= 0; --j) events.push_back({std::abs(v) / (j + 0.5), i});
  }
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.s < b.s; });
  std::optional<ScaleCandidate> best;
  double lo = 0.0;
  for (std::size_t k = 0; k <= events.size(); ++k) {
    const double hi = k < events.size() ? events[k].s : std::numeric_limits<double>::infinity();
    if (C > 0.0 && hi > lo) {
      double s = std::clamp(B / C, lo, hi);
      if (!(s > 0.0) || !std::isfinite(s)) s = std::isfinite(hi) ? hi : 2.0 * lo;
      const double err = A - 2.0 * s * B + s * s * C;
      if (s > 0.0 && std::isfinite(s) && (!best || err < best->error)) best = ScaleCandidate{s, err};
    }
    if (k == events.size()) break;
    const std::size_t i = events[k].i;
    const double step = x[i] > 0.0 ? -1.0 : 1.0;  // |m| shrinks by one
    B += x[i] * step;
    C += 2.0 * m[i] * step + 1.0;
    m[i] += step;
    lo = hi;
  }
  return best;
}

}  // namespace detail

/// Naive linear quantization range. The range is widened to include zero
/// so the zero point is always a valid code; constant tensors fall back to
/// the degenerate rule above.
inline QuantParams minmax_params(std::span<const double> x, int bits, bool is_signed) {
  require(bits >= 2 && bits <= 16, "bitwidth must lie in [2, 16]");
  const auto e = detail::extent(x);
  if (e.min == e.max) return detail::constant_params(e.min, bits, is_signed);
  return detail::range_params(std::min(e.min, 0.0), std::max(e.max, 0.0), bits, is_signed);
}

/// Grid search over clipping ratios rho in {1/G, ..., 1}: candidate ranges
/// are [rho * lo, rho * hi] of the zero-including min/max range. For
/// bitwidths with at most 16 levels every zero point is also tried. The
/// candidate with the smallest summed squared error wins; ties go to the
/// smallest rho, then to the rule-derived zero point. rho = 1 reproduces
/// minmax_params, so the result never has larger error. Small tensors (see
/// kExactSearchBudget) additionally get the exact per-zero-point scale
/// search, kept only when strictly better than the grid.
inline QuantParams l2_optimal_params(std::span<const double> x, int bits, bool is_signed, int grid_size) {
  detail::check_grid(bits, grid_size);
  const auto e = detail::extent(x);
  std::optional<QuantParams> best;
  double best_err = 0.0;
  const std::size_t levels = std::size_t{1} << bits;
  auto search_exact = [&](std::span<const double> v, auto&& consider) {
    for (std::int32_t z = best->q_min; z <= best->q_max; ++z)
      if (const auto c = detail::exact_scale_search(v, bits, is_signed, z))
        consider(QuantParams::make(c->scale, z, bits, is_signed));
  };
  if (e.min == e.max) {
    // error of a constant tensor is the count times the error of one element
    const double c = e.min;
    const std::span<const double> one(&c, 1);
    best = detail::constant_params(c, bits, is_signed);
    best_err = l2_error(one, *best);
    if (best_err > 0.0)
      search_exact(one, [&](const QuantParams& qp) {
        const double err = l2_error(one, qp);
        if (err < best_err) {
          best = qp;
          best_err = err;
        }
      });
    return *best;
  }
  const double lo = std::min(e.min, 0.0);
  const double hi = std::max(e.max, 0.0);
  const bool all_zero_points = bits <= 4;
  auto consider = [&](const QuantParams& qp) {
    const double err = l2_error(x, qp);
    if (!best || err < best_err) {
      best = qp;
      best_err = err;
    }
  };
  for (int k = 1; k <= grid_size; ++k) {
    const double rho = static_cast<double>(k) / grid_size;
    const QuantParams nominal = detail::range_params(rho * lo, rho * hi, bits, is_signed);
    consider(nominal);
    if (!all_zero_points) continue;
    for (std::int32_t z = nominal.q_min; z <= nominal.q_max; ++z)
      if (z != nominal.zero_point) consider(QuantParams::make(nominal.scale, z, bits, is_signed));
  }
  if (x.size() * levels * levels <= detail::kExactSearchBudget) search_exact(x, consider);
  return *best;
}

/// Concatenates a list of tensors and searches them jointly.
inline QuantParams l2_optimal_params(const std::vector<std::vector<double>>& samples, int bits, bool is_signed,
                                     int grid_size) {
  require(!samples.empty(), "l2_optimal_params: empty sample list");
  std::vector<double> all;
  for (const auto& s : samples) all.insert(all.end(), s.begin(), s.end());
  return l2_optimal_params(std::span<const double>(all), bits, is_signed, grid_size);
}

/// Symmetric signed parameters (z = 0) covering [-max_abs, max_abs].
inline QuantParams symmetric_params(double max_abs, int bits) {
  require(bits >= 2 && bits <= 16, "bitwidth must lie in [2, 16]");
  if (!(max_abs > 0.0)) return QuantParams::make(1.0, 0, bits, true);
  return QuantParams::make(max_abs / ((1 << (bits - 1)) - 1), 0, bits, true);
}

/// Symmetric clipping search used for weight channels.
inline QuantParams symmetric_l2_params(std::span<const double> x, int bits, int grid_size) {
  detail::check_grid(bits, grid_size);
  const auto e = detail::extent(x);
  const double m = std::max(std::abs(e.min), std::abs(e.max));
  if (!(m > 0.0)) return symmetric_params(0.0, bits);
  QuantParams best = symmetric_params(m, bits);
  double best_err = l2_error(x, best);
  for (int k = 1; k < grid_size; ++k) {
    const QuantParams qp = symmetric_params(m * k / grid_size, bits);
    const double err = l2_error(x, qp);
    if (err < best_err || (err == best_err && qp.scale < best.scale)) {
      best = qp;
      best_err = err;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Quantized model

inline constexpr int kFullPrecisionBits = 32;

struct BitConfig {
  int weight_bits = kFullPrecisionBits;
  int act_bits = kFullPrecisionBits;

  bool weights_quantized() const { return weight_bits < kFullPrecisionBits; }
  bool acts_quantized() const { return act_bits < kFullPrecisionBits; }

  std::string label() const { return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits); }

  void validate() const {
    auto ok = [](int b) { return b == kFullPrecisionBits || (b >= 2 && b <= 16); };
    if (!ok(weight_bits) || !ok(act_bits))
      throw ConfigError("bitwidths must be 32 or lie in [2, 16], got " + label());
  }

  static BitConfig parse(const std::string& s) {
    static const std::regex re(R"([Ww](\d+)[Aa](\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ConfigError("bit config '" + s + "' is not of the form WxAy");
    BitConfig b{std::stoi(m[1]), std::stoi(m[2])};
    b.validate();
    return b;
  }

  friend bool operator==(const BitConfig&, const BitConfig&) = default;
};

enum class WeightStrategy : std::uint8_t { kMinMax = 0, kL2 = 1 };

inline constexpr int kDefaultGridSize = 100;

/// A denoiser with fake-quantized weights and (optionally) fake-quantized
/// layer-input activations. Embeddings and nonlinearities stay in full
/// precision; biases are kept in full precision.
struct QuantizedModel {
  Denoiser base;
  BitConfig bits;
  WeightStrategy weight_strategy = WeightStrategy::kMinMax;
  std::vector<std::vector<QuantParams>> weight_params;  // per layer, per output channel
  std::vector<std::optional<QuantParams>> act_params;  // per layer input
  std::vector<Matrix> weights;                          // dequantized weights used by forward

  int input_dim() const { return base.input_dim(); }
  int num_layers() const { return base.num_layers(); }

  bool act_active(int layer) const {
    return bits.acts_quantized() && act_params[static_cast<std::size_t>(layer)].has_value();
  }

  /// Forward over the affine stack. `dropped(row, layer)` bypasses
  /// activation quantization for that row at that layer. Stops before
  /// `stop_layer` (returning that layer's un-quantized input) when given.
  template <class DropFn, class Hook>
  Matrix run_layers(Matrix a, DropFn&& dropped, Hook&& hook, int stop_layer = -1) const {
    for (int l = 0; l < num_layers(); ++l) {
      if (l == stop_layer) return a;
      hook(l, a);
      if (act_active(l)) {
        const QuantParams& qp = *act_params[static_cast<std::size_t>(l)];
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          if (dropped(i, l)) continue;
          for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = fake_quant(a(i, j), qp);
        }
      }
      const auto& L = base.layers[static_cast<std::size_t>(l)];
      Matrix z = a * weights[static_cast<std::size_t>(l)].transpose();
      z.rowwise() += L.bias.transpose();
      apply_activation(z, L.act);
      a = std::move(z);
    }
    return a;
  }

  Matrix predict(const Matrix& x, std::span<const int> steps, std::span<const ClassId> conds) const {
    return run_layers(base.build_input(x, steps, conds), [](Eigen::Index, int) { return false; },
                      [](int, const Matrix&) {});
  }
};

/// Quantizes every output channel of every affine layer.
inline std::vector<std::vector<QuantParams>> quantize_weight_channels(const Denoiser& m, int bits,
                                                                      WeightStrategy strategy,
                                                                      int grid_size = kDefaultGridSize) {
  std::vector<std::vector<QuantParams>> out;
  for (const auto& L : m.layers) {
    std::vector<QuantParams> per;
    for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
      std::span<const double> row(L.weight.data() + r * L.weight.cols(), static_cast<std::size_t>(L.weight.cols()));
      if (strategy == WeightStrategy::kL2) {
        per.push_back(symmetric_l2_params(row, bits, grid_size));
      } else {
        const auto e = detail::extent(row);
        per.push_back(symmetric_params(std::max(std::abs(e.min), std::abs(e.max)), bits));
      }
    }
    out.push_back(std::move(per));
  }
  return out;
}

/// Assembles a quantized model from already-fitted parameters, validating
/// their shapes and recomputing the dequantized weights.
inline QuantizedModel assemble_quantized_model(Denoiser base, BitConfig bits, WeightStrategy strategy,
                                               std::vector<std::vector<QuantParams>> weight_params,
                                               std::vector<std::optional<QuantParams>> act_params) {
  bits.validate();
  base.validate();
  const auto L = static_cast<std::size_t>(base.num_layers());
  require(weight_params.size() == (bits.weights_quantized() ? L : 0), "weight parameter count must match layers");
  if (act_params.empty()) act_params.resize(L);
  require(act_params.size() == L, "activation parameter count must match layers");
  QuantizedModel q{std::move(base), bits, strategy, std::move(weight_params), std::move(act_params), {}};
  for (std::size_t l = 0; l < L; ++l) {
    Matrix w = q.base.layers[l].weight;
    if (bits.weights_quantized()) {
      require(q.weight_params[l].size() == static_cast<std::size_t>(w.rows()), "one weight parameter per channel");
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const auto& qp = q.weight_params[l][static_cast<std::size_t>(r)];
        require(qp.bits == bits.weight_bits, "weight parameter bitwidth mismatch");
        w.row(r) = w.row(r).unaryExpr([&](double v) { return fake_quant(v, qp); });
      }
    }
    q.weights.push_back(std::move(w));
    if (q.act_params[l]) require(q.act_params[l]->bits == bits.act_bits, "activation parameter bitwidth mismatch");
  }
  return q;
}

/// Fixes weight parameters per output channel. Activation parameters must
/// be supplied (one per layer) exactly when activations are quantized.
inline QuantizedModel build_quantized_model(const Denoiser& model, BitConfig bits, WeightStrategy strategy,
                                            std::optional<std::vector<QuantParams>> act_params,
                                            int grid_size = kDefaultGridSize) {
  bits.validate();
  if (bits.acts_quantized() && !act_params)
    throw std::invalid_argument("activation quantization requested (" + bits.label() +
                                ") but no calibrated activation parameters were supplied");
  std::vector<std::vector<QuantParams>> wp;
  if (bits.weights_quantized()) wp = quantize_weight_channels(model, bits.weight_bits, strategy, grid_size);
  std::vector<std::optional<QuantParams>> ap(static_cast<std::size_t>(model.num_layers()));
  if (bits.acts_quantized()) {
    require(act_params->size() == ap.size(), "one activation parameter set per layer is required");
    for (std::size_t l = 0; l < ap.size(); ++l) ap[l] = (*act_params)[l];
  }
  return assemble_quantized_model(model, bits, strategy, std::move(wp), std::move(ap));
}

/// Deployment forward, optionally bypassing activation quantization on
/// whole layers (`mask[l] == true`).
inline Matrix quantized_forward(const QuantizedModel& q, const Matrix& x, int t, std::optional<ClassId> cond,
                                const std::optional<std::vector<bool>>& act_drop_mask = std::nullopt) {
  if (act_drop_mask && act_drop_mask->size() != static_cast<std::size_t>(q.num_layers()))
    throw std::invalid_argument("drop mask length must equal the layer count");
  const int step[1] = {t};
  const ClassId c[1] = {cond.value_or(kUnconditional)};
  Matrix in = q.base.build_input(x, std::span<const int>(step, 1), std::span<const ClassId>(c, 1));
  return q.run_layers(
      std::move(in),
      [&](Eigen::Index, int l) { return act_drop_mask && (*act_drop_mask)[static_cast<std::size_t>(l)]; },
      [](int, const Matrix&) {});
}

}  // namespace pqd
