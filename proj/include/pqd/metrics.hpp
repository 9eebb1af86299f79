// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pqd/common.hpp"
#include "pqd/diffusion.hpp"
#include "pqd/quantizer.hpp"

namespace pqd {

/// 2-Wasserstein distance between two 1-D empirical distributions,
/// integrating the squared quantile-function difference over the merged
/// breakpoints {i/n} and {j/m}.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "empirical distributions must be nonempty");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const auto n = static_cast<double>(a.size());
  const auto m = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / n;
    const double next_b = static_cast<double>(j + 1) / m;
    const double next = std::min(next_a, next_b);
    const double d = a[i] - b[j];
    acc += (next - u) * d * d;
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return std::sqrt(std::max(acc, 0.0));
}

/// Unit directions drawn from a normalized Gaussian.
inline Matrix random_directions(int count, int dim, Rng& rng) {
  require(count >= 1 && dim >= 1, "need at least one direction of positive dimension");
  Matrix dirs = gaussian_matrix(count, dim, rng);
  for (Eigen::Index k = 0; k < dirs.rows(); ++k) {
    const double n = dirs.row(k).norm();
    dirs.row(k) /= n > 0.0 ? n : 1.0;
  }
  return dirs;
}

inline std::vector<double> project(const Matrix& x, const Eigen::Ref<const Eigen::RowVectorXd>& dir) {
  const Vector p = x * dir.transpose();
  return {p.data(), p.data() + p.size()};
}

/// Mean over the given directions of the 1-D 2-Wasserstein distance.
inline double sliced_wasserstein(const Matrix& a, const Matrix& b, const Matrix& directions) {
  require(a.rows() > 0 && b.rows() > 0, "sample sets must be nonempty");
  if (a.cols() != b.cols() || a.cols() != directions.cols())
    throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  double acc = 0.0;
  for (Eigen::Index k = 0; k < directions.rows(); ++k)
    acc += wasserstein_1d(project(a, directions.row(k)), project(b, directions.row(k)));
  return acc / static_cast<double>(directions.rows());
}

inline double sliced_wasserstein(const Matrix& a, const Matrix& b, int n_projections, Rng& rng) {
  if (a.cols() != b.cols()) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  return sliced_wasserstein(a, b, random_directions(n_projections, static_cast<int>(a.cols()), rng));
}

/// Unbiased squared MMD with the Gaussian kernel exp(-|x-y|^2 / (2 h^2)),
/// clipped at zero.
inline double mmd_rbf(const Matrix& a, const Matrix& b, double bandwidth) {
  if (a.cols() != b.cols()) throw std::invalid_argument("mmd_rbf: dimension mismatch");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw std::invalid_argument("mmd_rbf: bandwidth must be positive");
  require(a.rows() >= 2 && b.rows() >= 2, "mmd_rbf needs at least two samples per set");
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel_sum = [&](const Matrix& x, const Matrix& y, bool skip_diag) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double row = 0.0;
      for (Eigen::Index j = 0; j < y.rows(); ++j) {
        if (skip_diag && i == j) continue;
        row += std::exp(-gamma * (x.row(i) - y.row(j)).squaredNorm());
      }
      total += row;
    }
    return total;
  };
  const auto n = static_cast<double>(a.rows());
  const auto m = static_cast<double>(b.rows());
  const double kaa = kernel_sum(a, a, true) / (n * (n - 1.0));
  const double kbb = kernel_sum(b, b, true) / (m * (m - 1.0));
  const double kab = kernel_sum(a, b, false) / (n * m);
  return std::max(kaa + kbb - 2.0 * kab, 0.0);
}

/// Median of all pairwise Euclidean distances (bandwidth heuristic).
inline double median_pairwise_distance(const Matrix& x) {
  require(x.rows() >= 2, "need at least two points");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(x.rows() * (x.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) d.push_back((x.row(i) - x.row(j)).norm());
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

// ---------------------------------------------------------------------------
// Cost accounting (one denoising step, one sample)

inline constexpr std::int64_t kScaleBits = 32;
inline constexpr std::int64_t kZeroPointBits = 16;
inline constexpr std::int64_t kBiasBits = 32;

/// Bits spent on weights alone.
inline std::int64_t weight_term_bits(const QuantizedModel& q) {
  std::int64_t bits = 0;
  for (const auto& L : q.base.layers) bits += static_cast<std::int64_t>(L.weight.size()) * q.bits.weight_bits;
  return bits;
}

/// Weights at their bitwidth, biases at 32 bits, plus a scale and zero point
/// per output channel when weights are quantized.
inline std::int64_t model_size_bits(const QuantizedModel& q) {
  std::int64_t bits = weight_term_bits(q);
  for (const auto& L : q.base.layers) {
    bits += static_cast<std::int64_t>(L.bias.size()) * kBiasBits;
    if (q.bits.weights_quantized()) bits += static_cast<std::int64_t>(L.out_features()) * (kScaleBits + kZeroPointBits);
  }
  return bits;
}

inline std::int64_t macs_per_step(const Denoiser& m) {
  std::int64_t macs = 0;
  for (const auto& L : m.layers) macs += static_cast<std::int64_t>(L.in_features()) * L.out_features();
  return macs;
}

/// MACs weighted by weight bits times activation bits.
inline std::int64_t bops_per_step(const QuantizedModel& q) {
  return macs_per_step(q.base) * q.bits.weight_bits * q.bits.act_bits;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalParams {
  int num_samples = 2000;
  int n_projections = 128;
  int num_inference_steps = 250;
  std::uint64_t seed = 7;
  /// Non-positive selects the median pairwise distance of the reference.
  double mmd_bandwidth = 0.0;
};

struct EvalReport {
  BitConfig bits;
  std::string strategy;
  std::int64_t size_bits = 0;
  std::int64_t bops_per_step = 0;
  double sliced_wasserstein = 0.0;
  double mmd = 0.0;
  double mmd_bandwidth = 0.0;
  int num_samples = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Generates samples with deterministic DDIM and scores them against the
/// reference. Sample noise uses `seed`; projections use a stream derived
/// from it, so equal seeds compare models on identical noise.
inline EvalReport evaluate(const QuantizedModel& q, const NoiseSchedule& sched, const Matrix& reference,
                           const EvalParams& p, const std::string& strategy = "",
                           std::optional<ClassId> condition = std::nullopt) {
  require(reference.rows() >= 2, "reference set needs at least two samples");
  require(p.num_samples >= 2, "evaluation needs at least two generated samples");
  Rng rng(p.seed);
  TrajectoryOptions opt;
  opt.sampler = SamplerKind::kDdim;
  opt.num_inference_steps = p.num_inference_steps;
  opt.num_samples = p.num_samples;
  opt.condition = condition;
  const Matrix generated = generate(q, sched, opt, rng);
  if (!generated.allFinite()) throw NumericalError("generated samples are not finite");

  EvalReport r;
  r.bits = q.bits;
  r.strategy = strategy;
  r.size_bits = model_size_bits(q);
  r.bops_per_step = bops_per_step(q);
  Rng proj(derive_seed(p.seed, 1));
  r.sliced_wasserstein = sliced_wasserstein(generated, reference, p.n_projections, proj);
  r.mmd_bandwidth = p.mmd_bandwidth > 0.0 ? p.mmd_bandwidth : median_pairwise_distance(reference);
  r.mmd = mmd_rbf(generated, reference, r.mmd_bandwidth);
  r.num_samples = p.num_samples;
  r.seed = p.seed;
  return r;
}

}  // namespace pqd
