// SPDX-License-Identifier: Apache-2.0
//
// Time-aware calibration: calibration inputs are intermediate states of
// full-precision reverse runs stopped at time steps drawn from a normal law
// over normalized time, and activation ranges are then fitted layer by
// layer with randomly dropped activation quantization.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pqd/common.hpp"
#include "pqd/denoiser.hpp"
#include "pqd/diffusion.hpp"
#include "pqd/quantizer.hpp"

namespace pqd {

/// How calibration time steps are chosen.
enum class TimeLaw : std::uint8_t {
  kNormal = 0,    // floor(Normal(mu, sigma) * T), clamped to [0, T-1]
  kUniform = 1,   // uniform over [0, T-1]
  kLastStep = 2,  // always T-1 (pure noise inputs)
};

inline std::string to_string(TimeLaw l) {
  switch (l) {
    case TimeLaw::kNormal: return "normal";
    case TimeLaw::kUniform: return "uniform";
    case TimeLaw::kLastStep: return "last-step";
  }
  return "unknown";
}

struct CalibrationConfig {
  int num_samples = 5120;
  double mu = 0.4;
  double sigma = 0.4;
  int num_steps = 250;
  SamplerKind sampler = SamplerKind::kDdim;
  int num_inference_steps = 250;
  std::uint64_t seed = 1;
  double drop_prob = 0.5;
  int grid_size = kDefaultGridSize;
  TimeLaw law = TimeLaw::kNormal;

  void validate() const {
    if (num_samples < 1) throw ConfigError("calibration.num_samples must be >= 1");
    if (!std::isfinite(mu)) throw ConfigError("calibration.mu must be finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("calibration.sigma must be positive");
    if (num_steps < 1) throw ConfigError("calibration.num_steps must be >= 1");
    if (num_inference_steps < 1 || num_inference_steps > num_steps)
      throw ConfigError("calibration.num_inference_steps must lie in [1, T]");
    if (sampler == SamplerKind::kDdpm && num_inference_steps != num_steps)
      throw ConfigError("calibration.num_inference_steps must equal T for the ddpm sampler");
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("calibration.drop_prob must lie in [0, 1]");
    if (grid_size < 1) throw ConfigError("calibration.grid_size must be >= 1");
  }
};

/// Raw normalized-time draw mu + sigma * z, before flooring and clamping.
inline double draw_normalized_time(Rng& rng, double mu, double sigma) { return mu + sigma * standard_normal(rng); }

inline int timestep_from_normalized(double n, int num_steps) {
  const double scaled = std::floor(n * num_steps);
  return static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(num_steps - 1)));
}

inline int sample_timestep(Rng& rng, double mu, double sigma, int num_steps) {
  require(sigma > 0.0, "sigma must be positive");
  require(num_steps >= 1, "T must be >= 1");
  return timestep_from_normalized(draw_normalized_time(rng, mu, sigma), num_steps);
}

/// Probability of each step under the floored, clamped normal law.
inline std::vector<double> timestep_pmf(double mu, double sigma, int num_steps) {
  auto cdf = [&](double n) { return 0.5 * std::erfc(-(n - mu) / (sigma * std::sqrt(2.0))); };
  std::vector<double> p(static_cast<std::size_t>(num_steps));
  for (int k = 0; k < num_steps; ++k) {
    const double lo = k == 0 ? 0.0 : cdf(static_cast<double>(k) / num_steps);
    const double hi = k == num_steps - 1 ? 1.0 : cdf(static_cast<double>(k + 1) / num_steps);
    p[static_cast<std::size_t>(k)] = hi - lo;
  }
  return p;
}

struct CalibrationSample {
  Vector x;
  int t = 0;
  ClassId condition = kUnconditional;
};

struct CalibrationSet {
  std::vector<CalibrationSample> samples;
  CalibrationConfig config;
  bool conditional = false;
  int dim = 0;

  std::size_t size() const { return samples.size(); }
};

/// Counts of calibration time steps in `bins` equal-width bins over [0, T).
inline std::vector<std::int64_t> timestep_histogram(const CalibrationSet& set, int bins) {
  require(bins >= 1, "bins must be >= 1");
  const int T = set.config.num_steps;
  std::vector<std::int64_t> h(static_cast<std::size_t>(bins), 0);
  const std::size_t stride = set.conditional ? 2 : 1;
  for (std::size_t i = 0; i < set.samples.size(); i += stride) {
    const auto b = static_cast<std::size_t>(static_cast<std::int64_t>(set.samples[i].t) * bins / T);
    ++h[b];
  }
  return h;
}

/// Draws the target step for every calibration index from the time law.
inline std::vector<int> draw_calibration_steps(const CalibrationConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<int> steps(static_cast<std::size_t>(cfg.num_samples));
  std::uniform_int_distribution<int> uni(0, cfg.num_steps - 1);
  for (auto& t : steps) {
    switch (cfg.law) {
      case TimeLaw::kNormal: t = sample_timestep(rng, cfg.mu, cfg.sigma, cfg.num_steps); break;
      case TimeLaw::kUniform: t = uni(rng); break;
      case TimeLaw::kLastStep: t = cfg.num_steps - 1; break;
    }
  }
  return steps;
}

/// Builds the calibration set. Index i starts from a Gaussian draw seeded by
/// derive_seed(cfg.seed, i), runs the full-precision sampler down to its
/// target step and records the state there. All indices advance together as
/// one batch; each row only depends on its own stream. With `conditions`,
/// index i is conditioned on conditions[i % size] and contributes the pair
/// (x, c, t), (x, unconditional, t).
template <NoisePredictor Model>
CalibrationSet build_calibration_set(const Model& model, const NoiseSchedule& sched, const CalibrationConfig& cfg,
                                     const std::vector<ClassId>& conditions = {}) {
  cfg.validate();
  if (cfg.num_steps != sched.num_steps()) throw ConfigError("calibration.num_steps must equal the schedule length");
  const int D = model.input_dim();
  const auto N = static_cast<std::size_t>(cfg.num_samples);
  const std::vector<int> targets = draw_calibration_steps(cfg);
  const std::vector<int> grid = sampler_timesteps(cfg.sampler, cfg.num_steps, cfg.num_inference_steps);

  std::vector<Rng> streams;
  streams.reserve(N);
  Matrix x(static_cast<Eigen::Index>(N), D);
  std::vector<ClassId> row_cond(N, kUnconditional);
  for (std::size_t i = 0; i < N; ++i) {
    streams.emplace_back(derive_seed(cfg.seed, i));
    x.row(static_cast<Eigen::Index>(i)) = gaussian_matrix(1, D, streams.back());
    if (!conditions.empty()) row_cond[i] = conditions[i % conditions.size()];
  }

  std::vector<Vector> recorded(N);
  std::vector<std::size_t> active(N);
  for (std::size_t i = 0; i < N; ++i) active[i] = i;

  for (std::size_t k = 0; k < grid.size() && !active.empty(); ++k) {
    const int t = grid[k];
    std::erase_if(active, [&](std::size_t i) {
      if (targets[i] < t) return false;
      recorded[i] = x.row(static_cast<Eigen::Index>(i)).transpose();
      return true;
    });
    if (active.empty()) break;
    const int t_grid_next = k + 1 < grid.size() ? grid[k + 1] : -1;

    Matrix xa(static_cast<Eigen::Index>(active.size()), D);
    std::vector<ClassId> ca(active.size());
    for (std::size_t r = 0; r < active.size(); ++r) {
      xa.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(active[r]));
      ca[r] = row_cond[active[r]];
    }
    const int step[1] = {t};
    const Matrix eps = model.predict(xa, std::span<const int>(step, 1), ca);
    for (std::size_t r = 0; r < active.size(); ++r) {
      const std::size_t i = active[r];
      const auto ri = static_cast<Eigen::Index>(r);
      if (!eps.row(ri).allFinite())
        throw NumericalError("calibration rollout " + std::to_string(i) + " produced a non-finite prediction at step " +
                             std::to_string(t));
      const Matrix xr = xa.row(ri);
      const Matrix er = eps.row(ri);
      Matrix next;
      if (cfg.sampler == SamplerKind::kDdim) {
        const int t_prev = std::max(t_grid_next, targets[i]);
        next = ddim_update(xr, er, sched.alpha_bar(t), sched.alpha_bar(t_prev));
      } else {
        next = ddpm_mean(xr, er, t, sched);
        next += std::sqrt(sched.beta(t)) * gaussian_matrix(1, D, streams[i]);
      }
      x.row(static_cast<Eigen::Index>(i)) = next;
    }
  }

  CalibrationSet set;
  set.config = cfg;
  set.conditional = !conditions.empty();
  set.dim = D;
  set.samples.reserve(set.conditional ? 2 * N : N);
  for (std::size_t i = 0; i < N; ++i) {
    Vector xi = recorded[i];
    round_to_float(xi);
    set.samples.push_back({xi, targets[i], row_cond[i]});
    if (set.conditional) set.samples.push_back({xi, targets[i], kUnconditional});
  }
  return set;
}

/// How each layer's activation range is fitted from the collected inputs.
enum class RangeMethod : std::uint8_t { kL2 = 0, kMinMax = 1 };

/// Layer-sequential activation calibration. For layer l every calibration
/// input is pushed through the weight-quantized model with the already
/// fitted activation quantizers of layers < l, each bypassed independently
/// per sample with probability `drop_prob`; layer l's inputs are then
/// fitted with the chosen range method.
inline std::vector<QuantParams> calibrate_activations(const QuantizedModel& weight_quantized, const CalibrationSet& calib,
                                                      int act_bits, double drop_prob, int grid_size, Rng& rng,
                                                      RangeMethod method = RangeMethod::kL2) {
  require(!calib.samples.empty(), "calibration set is empty");
  if (act_bits >= kFullPrecisionBits) throw std::invalid_argument("act_bits = 32 leaves nothing to calibrate");
  require(act_bits >= 2 && act_bits <= 16, "act_bits must lie in [2, 16]");
  require(drop_prob >= 0.0 && drop_prob <= 1.0, "drop_prob must lie in [0, 1]");
  const auto M = static_cast<Eigen::Index>(calib.samples.size());
  const int D = weight_quantized.input_dim();
  Matrix x(M, D);
  std::vector<int> steps(calib.samples.size());
  std::vector<ClassId> conds(calib.samples.size());
  for (Eigen::Index i = 0; i < M; ++i) {
    const auto& s = calib.samples[static_cast<std::size_t>(i)];
    require(s.x.size() == D, "calibration sample width differs from model input dim");
    x.row(i) = s.x.transpose();
    steps[static_cast<std::size_t>(i)] = s.t;
    conds[static_cast<std::size_t>(i)] = s.condition;
  }
  const Matrix input = weight_quantized.base.build_input(x, steps, conds);

  QuantizedModel work = weight_quantized;
  work.bits.act_bits = act_bits;
  const int L = work.num_layers();
  work.act_params.assign(static_cast<std::size_t>(L), std::nullopt);
  std::bernoulli_distribution drop(drop_prob);
  std::vector<QuantParams> fitted;
  std::vector<char> mask;
  for (int l = 0; l < L; ++l) {
    mask.assign(static_cast<std::size_t>(M * std::max(l, 1)), 0);
    for (Eigen::Index i = 0; i < M; ++i)
      for (int j = 0; j < l; ++j) mask[static_cast<std::size_t>(i * l + j)] = drop(rng) ? 1 : 0;
    const Matrix a = work.run_layers(
        input, [&](Eigen::Index i, int j) { return mask[static_cast<std::size_t>(i * l + j)] != 0; },
        [](int, const Matrix&) {}, l);
    std::span<const double> values(a.data(), static_cast<std::size_t>(a.size()));
    const QuantParams qp = method == RangeMethod::kL2 ? l2_optimal_params(values, act_bits, false, grid_size)
                                                      : minmax_params(values, act_bits, false);
    work.act_params[static_cast<std::size_t>(l)] = qp;
    fitted.push_back(qp);
  }
  return fitted;
}

/// Named calibration recipes compared by the experiment harness.
enum class CalibrationStrategy : std::uint8_t {
  kPqdNormal = 0,     // normal time law, L2 ranges, randomized dropping
  kUniformT = 1,      // uniform time law, L2 ranges, randomized dropping
  kLastStepOnly = 2,  // pure-noise inputs only, L2 ranges, randomized dropping
  kMinMaxNaive = 3,   // uniform time law, min/max ranges of full-precision activations
};

inline std::string to_string(CalibrationStrategy s) {
  switch (s) {
    case CalibrationStrategy::kPqdNormal: return "pqd-normal";
    case CalibrationStrategy::kUniformT: return "uniform-t";
    case CalibrationStrategy::kLastStepOnly: return "last-step-only";
    case CalibrationStrategy::kMinMaxNaive: return "minmax-naive";
  }
  return "unknown";
}

inline CalibrationStrategy strategy_from_string(const std::string& s) {
  for (auto c : {CalibrationStrategy::kPqdNormal, CalibrationStrategy::kUniformT, CalibrationStrategy::kLastStepOnly,
                 CalibrationStrategy::kMinMaxNaive})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown calibration strategy '" + s + "'");
}

inline TimeLaw time_law(CalibrationStrategy s) {
  switch (s) {
    case CalibrationStrategy::kPqdNormal: return TimeLaw::kNormal;
    case CalibrationStrategy::kLastStepOnly: return TimeLaw::kLastStep;
    default: return TimeLaw::kUniform;
  }
}

inline WeightStrategy weight_strategy(CalibrationStrategy s) {
  return s == CalibrationStrategy::kMinMaxNaive ? WeightStrategy::kMinMax : WeightStrategy::kL2;
}

/// Calibration config with the strategy's time law applied.
inline CalibrationConfig config_for(CalibrationConfig cfg, CalibrationStrategy s) {
  cfg.law = time_law(s);
  return cfg;
}

/// Quantizes weights per the strategy and, when activations are quantized,
/// fits their ranges on `calib`. The activation-fitting stream is seeded
/// from the calibration seed.
inline QuantizedModel quantize_with_calibration(const Denoiser& model, BitConfig bits, CalibrationStrategy strategy,
                                                const CalibrationSet* calib) {
  bits.validate();
  const int grid = calib ? calib->config.grid_size : kDefaultGridSize;
  QuantizedModel wq = build_quantized_model(model, BitConfig{bits.weight_bits, kFullPrecisionBits},
                                            weight_strategy(strategy), std::nullopt, grid);
  if (!bits.acts_quantized()) {
    wq.bits = bits;
    return wq;
  }
  if (calib == nullptr || calib->samples.empty())
    throw std::invalid_argument("activation quantization (" + bits.label() + ") needs a calibration set");
  Rng rng(derive_seed(calib->config.seed, 0xA11CEull));
  const bool naive = strategy == CalibrationStrategy::kMinMaxNaive;
  const auto acts = calibrate_activations(wq, *calib, bits.act_bits, naive ? 1.0 : calib->config.drop_prob, grid, rng,
                                          naive ? RangeMethod::kMinMax : RangeMethod::kL2);
  std::vector<std::optional<QuantParams>> ap(acts.begin(), acts.end());
  return assemble_quantized_model(model, bits, wq.weight_strategy, std::move(wq.weight_params), std::move(ap));
}

struct PqdResult {
  QuantizedModel model;
  std::optional<CalibrationSet> calibration;
};

/// End-to-end time-aware quantization: build the calibration set from
/// full-precision rollouts, quantize weights, then fit activation ranges.
inline PqdResult pqd_quantize(const Denoiser& model, const NoiseSchedule& sched, const CalibrationConfig& cfg,
                              BitConfig bits, const std::vector<ClassId>& conditions = {},
                              CalibrationStrategy strategy = CalibrationStrategy::kPqdNormal) {
  bits.validate();
  PqdResult out{build_quantized_model(model, BitConfig{}, WeightStrategy::kMinMax, std::nullopt), std::nullopt};
  if (bits.acts_quantized())
    out.calibration = with_stage("calibration set", [&] {
      return build_calibration_set(model, sched, config_for(cfg, strategy), conditions);
    });
  out.model = with_stage("quantization", [&] {
    return quantize_with_calibration(model, bits, strategy, out.calibration ? &*out.calibration : nullptr);
  });
  return out;
}

}  // namespace pqd
