// SPDX-License-Identifier: Apache-2.0
//
// Noise schedules, the closed-form forward process and the DDPM / DDIM
// reverse samplers. Step indices run from 0 (cleanest) to T-1 (noisiest).
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pqd/common.hpp"

namespace pqd {

class NoiseSchedule {
 public:
  /// Builds a schedule from explicit betas; every beta must lie in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas) {
    require(!betas.empty(), "noise schedule needs at least one step");
    NoiseSchedule s;
    s.betas_ = std::move(betas);
    s.alphas_.reserve(s.betas_.size());
    s.alpha_bars_.reserve(s.betas_.size());
    double prod = 1.0;
    for (double b : s.betas_) {
      require(std::isfinite(b) && b > 0.0 && b < 1.0, "beta must lie in (0, 1)");
      const double a = 1.0 - b;
      prod *= a;
      s.alphas_.push_back(a);
      s.alpha_bars_.push_back(prod);
    }
    return s;
  }

  int num_steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(check(t)); }
  double alpha(int t) const { return alphas_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(check(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  int check(int t) const {
    if (t < 0 || t >= num_steps())
      throw std::out_of_range("step index " + std::to_string(t) + " outside [0, " +
                              std::to_string(num_steps()) + ")");
    return t;
  }

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Linear beta schedule, inclusive of both endpoints.
inline NoiseSchedule make_linear_schedule(int num_steps, double beta_start, double beta_end) {
  require(num_steps >= 1, "num_steps must be >= 1");
  require(std::isfinite(beta_start) && std::isfinite(beta_end), "beta endpoints must be finite");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "beta endpoints must satisfy 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(num_steps));
  if (num_steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < num_steps; ++i) {
      const double w = static_cast<double>(i) / static_cast<double>(num_steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + w * (beta_end - beta_start);
    }
    betas.back() = beta_end;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

/// sqrt(abar) * x0 + sqrt(1 - abar) * eps for an explicit cumulative alpha.
inline Matrix diffuse_with(const Matrix& x0, const Matrix& eps, double alpha_bar) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "x0 and eps shapes differ");
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

inline Matrix forward_diffuse(const Matrix& x0, int t, const Matrix& eps, const NoiseSchedule& sched) {
  return diffuse_with(x0, eps, sched.alpha_bar(t));
}

enum class SamplerKind { kDdpm, kDdim };

inline std::string to_string(SamplerKind k) { return k == SamplerKind::kDdpm ? "ddpm" : "ddim"; }

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "ddpm") return SamplerKind::kDdpm;
  if (s == "ddim") return SamplerKind::kDdim;
  throw ConfigError("unknown sampler '" + s + "' (expected ddpm or ddim)");
}

namespace detail {
inline void check_eps(const Matrix& eps, const Matrix& x_t, int t) {
  if (eps.rows() != x_t.rows() || eps.cols() != x_t.cols())
    throw std::invalid_argument("noise prediction shape differs from x_t");
  if (!eps.allFinite())
    throw NumericalError("non-finite noise prediction at step " + std::to_string(t));
}
}  // namespace detail

/// Mean of the ancestral reverse step given a noise prediction.
inline Matrix ddpm_mean(const Matrix& x_t, const Matrix& eps, int t, const NoiseSchedule& sched) {
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  return (x_t - coef * eps) / std::sqrt(sched.alpha(t));
}

/// One stochastic ancestral step x_t -> x_{t-1} with posterior variance beta_t.
/// At t = 0 no noise is added. `predict_eps(x, t)` returns the noise estimate.
template <class EpsFn>
Matrix ddpm_step(EpsFn&& predict_eps, const Matrix& x_t, int t, const NoiseSchedule& sched, Rng& rng) {
  sched.alpha_bar(t);
  const Matrix eps = predict_eps(x_t, t);
  detail::check_eps(eps, x_t, t);
  Matrix out = ddpm_mean(x_t, eps, t, sched);
  if (t > 0) out += std::sqrt(sched.beta(t)) * gaussian_matrix(x_t.rows(), x_t.cols(), rng);
  return out;
}

/// Deterministic implicit update between explicit cumulative alphas.
/// `alpha_bar_prev` of 1 yields the clean-data estimate.
inline Matrix ddim_update(const Matrix& x_t, const Matrix& eps, double alpha_bar_t, double alpha_bar_prev) {
  const Matrix x0_hat = (x_t - std::sqrt(1.0 - alpha_bar_t) * eps) / std::sqrt(alpha_bar_t);
  if (alpha_bar_prev >= 1.0) return x0_hat;
  return std::sqrt(alpha_bar_prev) * x0_hat + std::sqrt(1.0 - alpha_bar_prev) * eps;
}

/// DDIM step with eta = 0. `t_prev == -1` returns the clean-data estimate.
template <class EpsFn>
Matrix ddim_step(EpsFn&& predict_eps, const Matrix& x_t, int t, int t_prev, const NoiseSchedule& sched) {
  sched.alpha_bar(t);
  if (t_prev >= t) throw std::invalid_argument("ddim_step requires t_prev < t");
  if (t_prev < -1) throw std::out_of_range("t_prev must be >= -1");
  const Matrix eps = predict_eps(x_t, t);
  detail::check_eps(eps, x_t, t);
  const double ab_prev = t_prev < 0 ? 1.0 : sched.alpha_bar(t_prev);
  return ddim_update(x_t, eps, sched.alpha_bar(t), ab_prev);
}

/// Evenly spaced descending subsequence of [0, T) that always contains
/// T-1 and 0 (for more than one step).
inline std::vector<int> ddim_timesteps(int num_steps, int num_inference_steps) {
  require(num_inference_steps >= 1 && num_inference_steps <= num_steps,
          "num_inference_steps must lie in [1, T]");
  std::vector<int> steps;
  steps.reserve(static_cast<std::size_t>(num_inference_steps));
  if (num_inference_steps == 1) {
    steps.push_back(num_steps - 1);
    return steps;
  }
  const double stride = static_cast<double>(num_steps - 1) / (num_inference_steps - 1);
  for (int k = num_inference_steps - 1; k >= 0; --k)
    steps.push_back(static_cast<int>(std::round(k * stride)));
  return steps;
}

/// Steps visited by a sampler, noisiest first. DDPM always walks every step.
inline std::vector<int> sampler_timesteps(SamplerKind kind, int num_steps, int num_inference_steps) {
  if (kind == SamplerKind::kDdim) return ddim_timesteps(num_steps, num_inference_steps);
  require(num_inference_steps == num_steps, "the DDPM sampler visits every step; num_inference_steps must equal T");
  std::vector<int> steps(static_cast<std::size_t>(num_steps));
  for (int i = 0; i < num_steps; ++i) steps[static_cast<std::size_t>(i)] = num_steps - 1 - i;
  return steps;
}

struct TrajectoryState {
  Matrix x;
  int t = 0;
};

/// States visited by a reverse run, in descending step order. `sample`
/// holds the clean output after the final denoising step and is only set
/// when the run was not stopped early.
struct Trajectory {
  std::vector<TrajectoryState> states;
  std::optional<Matrix> sample;
};

/// Any network that predicts noise for a batch with per-row (or broadcast)
/// steps and conditions.
template <class M>
concept NoisePredictor = requires(const M& m, const Matrix& x, std::span<const int> steps,
                                  std::span<const ClassId> conds) {
  { m.predict(x, steps, conds) } -> std::convertible_to<Matrix>;
  { m.input_dim() } -> std::convertible_to<int>;
};

struct TrajectoryOptions {
  SamplerKind sampler = SamplerKind::kDdim;
  int num_inference_steps = 250;
  int num_samples = 1;
  std::optional<ClassId> condition;
  std::optional<int> record_until;
};

/// Runs the reverse process from a standard Gaussian draw at step T-1,
/// recording every visited state. With `record_until` the run stops once
/// that step is reached (jumping onto it when it falls between DDIM steps).
template <NoisePredictor Model>
Trajectory sample_trajectory(const Model& model, const NoiseSchedule& sched, const TrajectoryOptions& opt, Rng& rng) {
  const int T = sched.num_steps();
  require(opt.num_samples >= 1, "num_samples must be >= 1");
  if (opt.record_until && (*opt.record_until < 0 || *opt.record_until >= T))
    throw std::out_of_range("record_until outside [0, T)");
  const std::vector<int> steps = sampler_timesteps(opt.sampler, T, opt.num_inference_steps);
  const std::vector<ClassId> cond = opt.condition ? std::vector<ClassId>{*opt.condition} : std::vector<ClassId>{};
  auto eps_fn = [&](const Matrix& x, int t) {
    const int step[1] = {t};
    return Matrix(model.predict(x, std::span<const int>(step, 1), cond));
  };

  Trajectory traj;
  Matrix x = gaussian_matrix(opt.num_samples, model.input_dim(), rng);
  const int stop = opt.record_until.value_or(0);
  int t = steps.front();
  for (std::size_t k = 0;; ++k) {
    traj.states.push_back({x, t});
    if (t == stop) break;
    const int t_next = std::max(k + 1 < steps.size() ? steps[k + 1] : -1, stop);
    x = opt.sampler == SamplerKind::kDdim ? ddim_step(eps_fn, x, t, t_next, sched)
                                          : ddpm_step(eps_fn, x, t, sched, rng);
    t = t_next;
  }
  if (opt.record_until) return traj;
  // Final denoising step from t = 0 to the clean estimate.
  traj.sample = opt.sampler == SamplerKind::kDdim ? ddim_step(eps_fn, x, 0, -1, sched)
                                                  : ddpm_step(eps_fn, x, 0, sched, rng);
  return traj;
}

/// Convenience wrapper returning only the clean samples.
template <NoisePredictor Model>
Matrix generate(const Model& model, const NoiseSchedule& sched, TrajectoryOptions opt, Rng& rng) {
  opt.record_until.reset();
  return *sample_trajectory(model, sched, opt, rng).sample;
}

}  // namespace pqd
