// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_support.hpp"

namespace pqd {
namespace {

// Replicates both samples to a common size so the optimal coupling is the
// sorted one-to-one matching.
double brute_w2(std::vector<double> a, std::vector<double> b) {
  const std::size_t L = std::lcm(a.size(), b.size());
  std::vector<double> ra, rb;
  for (double v : a) ra.insert(ra.end(), L / a.size(), v);
  for (double v : b) rb.insert(rb.end(), L / b.size(), v);
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < L; ++i) acc += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return std::sqrt(acc / static_cast<double>(L));
}

TEST(Wasserstein1d, Examples) {
  EXPECT_DOUBLE_EQ(wasserstein_1d({0.0}, {1.0}), 1.0);
  EXPECT_DOUBLE_EQ(wasserstein_1d({3.0, 1.0, 2.0}, {1.0, 2.0, 3.0}), 0.0);
  EXPECT_NEAR(wasserstein_1d({0.0, 1.0}, {0.0}), std::sqrt(0.5), 1e-15);
  EXPECT_THROW(wasserstein_1d({}, {1.0}), std::invalid_argument);
}

TEST(Wasserstein1d, MatchesReplicationOracle) {
  Rng rng(31);
  std::uniform_int_distribution<int> len(1, 12);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng) + 1.0;
    EXPECT_NEAR(wasserstein_1d(a, b), brute_w2(a, b), 1e-9);
  }
}

TEST(SlicedWasserstein, IdenticalSetsGiveZero) {
  Rng rng(1);
  const Matrix a = gaussian_matrix(50, 2, rng);
  Matrix shuffled = a.colwise().reverse();
  EXPECT_NEAR(sliced_wasserstein(a, shuffled, 64, rng), 0.0, 1e-12);
}

TEST(SlicedWasserstein, OneDimensionalExample) {
  Matrix a(1, 1), b(1, 1);
  a << 0.0;
  b << 1.0;
  Rng rng(2);
  EXPECT_DOUBLE_EQ(sliced_wasserstein(a, b, 8, rng), 1.0);
}

TEST(SlicedWasserstein, TranslatedCloudsMatchPerProjectionOracle) {
  Rng rng(3);
  const Matrix a = gaussian_matrix(24, 2, rng);
  const double delta = 5.0;
  Matrix b = gaussian_matrix(36, 2, rng);
  b.col(0).array() += delta;
  const Matrix dirs = random_directions(40, 2, rng);
  double oracle = 0.0, lower = 0.0;
  for (Eigen::Index k = 0; k < dirs.rows(); ++k) {
    oracle += brute_w2(project(a, dirs.row(k)), project(b, dirs.row(k)));
    lower += std::abs(dirs(k, 0)) * delta;
  }
  oracle /= dirs.rows();
  lower /= dirs.rows();
  const double sw = sliced_wasserstein(a, b, dirs);
  EXPECT_NEAR(sw, oracle, 1e-9);
  // The mean shift along u is a lower bound up to sampling noise of the cloud means.
  EXPECT_GT(sw, 0.8 * lower);
  for (Eigen::Index k = 0; k < dirs.rows(); ++k) EXPECT_NEAR(dirs.row(k).norm(), 1.0, 1e-12);
}

TEST(SlicedWasserstein, DimensionMismatch) {
  Rng rng(4);
  EXPECT_THROW(sliced_wasserstein(Matrix::Zero(3, 2), Matrix::Zero(3, 3), 4, rng), std::invalid_argument);
}

TEST(Mmd, IdenticalSetsNearZero) {
  Rng rng(5);
  const Matrix a = gaussian_matrix(200, 2, rng);
  EXPECT_LT(mmd_rbf(a, a, 1.0), 1e-6);
  EXPECT_GE(mmd_rbf(a, a, 1.0), 0.0);
}

TEST(Mmd, SeparatedClustersApproachTwo) {
  Rng rng(6);
  Matrix a = 0.01 * gaussian_matrix(30, 2, rng);
  Matrix b = 0.01 * gaussian_matrix(40, 2, rng);
  b.col(0).array() += 100.0;
  EXPECT_NEAR(mmd_rbf(a, b, 1.0), 2.0, 1e-3);
}

TEST(Mmd, PermutationInvariant) {
  Rng rng(7);
  const Matrix a = gaussian_matrix(60, 2, rng);
  Matrix b = gaussian_matrix(50, 2, rng);
  b.array() += 0.5;
  const Matrix rev = a.colwise().reverse();
  EXPECT_NEAR(mmd_rbf(a, b, 0.8), mmd_rbf(rev, b, 0.8), 1e-12);
  EXPECT_GT(mmd_rbf(a, b, 0.8), 0.0);
  EXPECT_THROW(mmd_rbf(a, b, 0.0), std::invalid_argument);
  EXPECT_THROW(mmd_rbf(a.topRows(1), b, 1.0), std::invalid_argument);
}

TEST(Mmd, MedianDistance) {
  Matrix x(3, 1);
  x << 0.0, 1.0, 3.0;
  EXPECT_DOUBLE_EQ(median_pairwise_distance(x), 2.0);
  EXPECT_DOUBLE_EQ(median_pairwise_distance(Matrix::Zero(4, 2)), 1.0);
}

Denoiser single_layer_1000_macs() {
  DenoiserShape s;
  s.time_embed_dim = 498;
  s.hidden_layers = 0;
  return initialize_denoiser(s, 1);
}

QuantizedModel with_bits(const Denoiser& m, BitConfig b) {
  std::optional<std::vector<QuantParams>> acts;
  if (b.acts_quantized())
    acts = std::vector<QuantParams>(static_cast<std::size_t>(m.num_layers()), QuantParams::make(0.1, 0, b.act_bits, false));
  return build_quantized_model(m, b, WeightStrategy::kMinMax, acts);
}

TEST(Cost, BopsExample) {
  const auto m = single_layer_1000_macs();
  EXPECT_EQ(macs_per_step(m), 1000);
  EXPECT_EQ(bops_per_step(with_bits(m, {8, 8})), 64000);
  EXPECT_EQ(bops_per_step(with_bits(m, {32, 32})), 1024000);
}

TEST(Cost, SizeAccounting) {
  const auto m = single_layer_1000_macs();
  const auto fp = with_bits(m, {});
  EXPECT_EQ(weight_term_bits(fp), 32 * 1000);
  EXPECT_EQ(model_size_bits(fp), 32 * 1000 + 32 * 2);
  const auto w8 = with_bits(m, {8, 32});
  EXPECT_EQ(model_size_bits(w8), 8 * 1000 + 32 * 2 + 2 * 48);
}

TEST(Cost, RatiosOnDefaultNetwork) {
  const auto m = initialize_denoiser({}, 0);
  const auto w32 = with_bits(m, {});
  const auto w8 = with_bits(m, {8, 8});
  const auto w4 = with_bits(m, {4, 8});
  EXPECT_EQ(weight_term_bits(w32), 4 * weight_term_bits(w8));
  EXPECT_EQ(weight_term_bits(w8), 2 * weight_term_bits(w4));
  EXPECT_EQ(bops_per_step(w32), 16 * bops_per_step(w8));
  EXPECT_EQ(bops_per_step(w8), 2 * bops_per_step(w4));
  EXPECT_EQ(macs_per_step(m), 34 * 128 + 128 * 128 * 2 + 128 * 2);
}

TEST(Evaluate, SameSeedSameReport) {
  const auto& m = testing::small_trained_model();
  const auto s = testing::default_schedule();
  const auto q = build_quantized_model(m, BitConfig{}, WeightStrategy::kMinMax, std::nullopt);
  const Matrix ref = testing::ring_data(300, 50).data;
  EvalParams p;
  p.num_samples = 200;
  p.n_projections = 16;
  p.num_inference_steps = 50;
  const auto a = evaluate(q, s, ref, p, "x");
  EXPECT_EQ(a, evaluate(q, s, ref, p, "x"));
  EXPECT_TRUE(std::isfinite(a.sliced_wasserstein));
  EXPECT_DOUBLE_EQ(a.mmd_bandwidth, median_pairwise_distance(ref));
  // Direct recomputation of the sliced distance.
  Rng rng(p.seed);
  TrajectoryOptions o;
  o.num_inference_steps = 50;
  o.num_samples = 200;
  const Matrix gen = generate(q, s, o, rng);
  Rng proj(derive_seed(p.seed, 1));
  EXPECT_EQ(a.sliced_wasserstein, sliced_wasserstein(gen, ref, 16, proj));
}

}  // namespace
}  // namespace pqd
