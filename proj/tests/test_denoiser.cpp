// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_support.hpp"

namespace pqd {
namespace {

TEST(TimeEmbedding, ZeroStep) {
  const Vector e = time_embedding(0, 32);
  for (int i = 0; i < 16; ++i) {
    EXPECT_EQ(e[2 * i], 0.0);
    EXPECT_EQ(e[2 * i + 1], 1.0);
  }
}

TEST(TimeEmbedding, BoundedAndCollisionFree) {
  std::vector<Vector> all;
  for (int t = 0; t < 250; ++t) {
    all.push_back(time_embedding(t, 32, 250));
    EXPECT_LE(all.back().cwiseAbs().maxCoeff(), 1.0);
  }
  for (int a = 0; a < 250; ++a)
    for (int b = a + 1; b < 250; ++b) EXPECT_GT((all[a] - all[b]).cwiseAbs().maxCoeff(), 1e-6) << a << "," << b;
}

TEST(TimeEmbedding, Errors) {
  EXPECT_THROW(time_embedding(0, 3), std::invalid_argument);
  EXPECT_THROW(time_embedding(0, 0), std::invalid_argument);
  EXPECT_THROW(time_embedding(250, 32, 250), std::out_of_range);
  EXPECT_THROW(time_embedding(-1, 32, 250), std::out_of_range);
}

TEST(Denoiser, DefaultShape) {
  const auto m = initialize_denoiser({}, 0);
  EXPECT_NO_THROW(m.validate());
  ASSERT_EQ(m.num_layers(), 4);
  EXPECT_EQ(m.layers[0].in_features(), 2 + 32);
  EXPECT_EQ(m.layers[3].out_features(), 2);
  EXPECT_EQ(m.layers[3].act, Activation::kIdentity);
  EXPECT_EQ(m.layers[2].act, Activation::kSiLU);
  EXPECT_EQ(last_hidden_layer(m), 2);
  DenoiserShape c;
  c.num_classes = 8;
  EXPECT_EQ(initialize_denoiser(c, 0).layers[0].in_features(), 2 + 32 + 16);
}

TEST(Denoiser, ZeroModelOutputsZero) {
  const auto m = zero_denoiser({});
  Rng rng(1);
  const Matrix x = gaussian_matrix(10, 2, rng);
  EXPECT_EQ(m.predict(x, 7), Matrix::Zero(10, 2));
}

TEST(Denoiser, PureAndInputChecked) {
  const auto m = initialize_denoiser({}, 5);
  Rng rng(1);
  const Matrix x = gaussian_matrix(10, 2, rng);
  EXPECT_EQ(m.predict(x, 7), m.predict(x, 7));
  EXPECT_THROW(m.predict(Matrix::Zero(3, 3), 7), std::invalid_argument);
  EXPECT_THROW(m.predict(x, 7, ClassId{0}), std::invalid_argument);
  const std::vector<int> steps(3, 1);
  EXPECT_THROW(m.predict(x, steps, {}), std::invalid_argument);
}

TEST(Denoiser, PerRowStepsMatchBroadcast) {
  const auto& m = testing::small_trained_model();
  Rng rng(2);
  const Matrix x = gaussian_matrix(6, 2, rng);
  const std::vector<int> steps{0, 10, 100, 200, 249, 3};
  const Matrix batch = m.predict(x, steps, {});
  for (Eigen::Index i = 0; i < 6; ++i) {
    const Matrix row = m.predict(Matrix(x.row(i)), steps[static_cast<std::size_t>(i)]);
    EXPECT_LT((batch.row(i) - row).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Denoiser, ParameterRoundTrip) {
  auto m = testing::tiny_model(3, 9);
  const auto p = flatten_parameters(m);
  auto other = testing::tiny_model(3, 10);
  assign_parameters(other, p);
  EXPECT_EQ(flatten_parameters(other), p);
  std::vector<double> short_p(p.begin(), p.end() - 1);
  EXPECT_THROW(assign_parameters(other, short_p), std::invalid_argument);
}

TEST(Gradient, MatchesCentralDifferences) {
  for (int classes : {0, 3}) {
    const auto m = testing::tiny_model(classes, 11);
    Rng rng(4);
    const Matrix x = gaussian_matrix(5, 2, rng);
    const Matrix target = gaussian_matrix(5, 2, rng);
    const std::vector<int> steps{0, 3, 50, 120, 249};
    std::vector<ClassId> conds;
    if (classes) conds = {0, 2, kUnconditional, 1, 2};
    std::vector<double> grad;
    detail::loss_and_gradient(m, x, steps, conds, target, &grad);
    auto p = flatten_parameters(m);
    ASSERT_EQ(grad.size(), p.size());
    ASSERT_LE(p.size(), 200u);
    const double h = 1e-5;
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto probe = m;
      auto q = p;
      q[k] = p[k] + h;
      assign_parameters(probe, q);
      const double up = detail::loss_and_gradient(probe, x, steps, conds, target, nullptr);
      q[k] = p[k] - h;
      assign_parameters(probe, q);
      const double down = detail::loss_and_gradient(probe, x, steps, conds, target, nullptr);
      const double fd = (up - down) / (2 * h);
      EXPECT_LE(std::abs(fd - grad[k]), 1e-4 * std::max(1.0, std::abs(fd))) << "param " << k;
    }
  }
}

TEST(Training, ZeroIterationsReturnsInitialization) {
  const auto init = initialize_denoiser({}, 3);
  TrainConfig cfg;
  cfg.num_iterations = 0;
  const auto r = train_denoiser(testing::ring_data(64, 1), testing::default_schedule(), cfg, init);
  EXPECT_EQ(flatten_parameters(r.model), flatten_parameters(init));
  EXPECT_TRUE(r.batch_losses.empty());
}

TEST(Training, SameSeedIsBitIdentical) {
  TrainConfig cfg;
  cfg.num_iterations = 50;
  cfg.batch_size = 32;
  const auto data = testing::ring_data(256, 1);
  const auto s = testing::default_schedule();
  const auto a = train_denoiser(data, s, cfg, initialize_denoiser({}, 3));
  const auto b = train_denoiser(data, s, cfg, initialize_denoiser({}, 3));
  EXPECT_EQ(flatten_parameters(a.model), flatten_parameters(b.model));
  EXPECT_EQ(a.batch_losses, b.batch_losses);
  cfg.seed = 1;
  const auto c = train_denoiser(data, s, cfg, initialize_denoiser({}, 3));
  EXPECT_NE(flatten_parameters(a.model), flatten_parameters(c.model));
}

TEST(Training, ParametersAreFloatRepresentable) {
  for (double v : flatten_parameters(testing::small_trained_model())) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(Training, RejectsBadConfigAndDivergence) {
  const auto data = testing::ring_data(64, 1);
  const auto s = testing::default_schedule();
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(train_denoiser(data, s, bad, initialize_denoiser({}, 0)), ConfigError);
  TrainConfig hot;
  hot.learning_rate = 1e6;
  hot.num_iterations = 200;
  EXPECT_THROW(train_denoiser(data, s, hot, initialize_denoiser({}, 0)), NumericalError);
}

TEST(Training, HeldOutLossDrops) {
  const auto s = testing::default_schedule();
  const auto probe = make_epsilon_probe(testing::ring_data(2048, 99), s, 5);
  const double initial = epsilon_loss(initialize_denoiser({}, 3), probe);
  const double trained = epsilon_loss(testing::small_trained_model(), probe);
  EXPECT_LT(trained, 0.7 * initial);
}

TEST(Training, ConditionalModelSeparatesClasses) {
  const auto& m = testing::small_conditional_model();
  const auto s = testing::default_schedule();
  // Deterministic samples per class should land near their own mixture component.
  MixtureSpec spec;
  for (ClassId c = 0; c < 8; ++c) {
    TrajectoryOptions o;
    o.num_samples = 64;
    o.condition = c;
    Rng rng(100 + c);
    const Matrix x = generate(m, s, o, rng);
    const double ang = 2.0 * std::numbers::pi * c / spec.num_components;
    Eigen::RowVector2d centre(spec.radius * std::cos(ang), spec.radius * std::sin(ang));
    const double mean_dist = (x.rowwise() - centre).rowwise().norm().mean();
    EXPECT_LT(mean_dist, 1.5) << "class " << c;
  }
}

TEST(ActivationStats, ZeroModelGivesZeroRows) {
  const auto m = zero_denoiser({});
  std::vector<TrajectoryState> states{{Matrix::Ones(4, 2), 10}, {Matrix::Ones(4, 2), 3}};
  for (const auto& r : record_activation_stats(m, states, 2)) {
    EXPECT_EQ(r.min, 0.0);
    EXPECT_EQ(r.max, 0.0);
    EXPECT_EQ(r.mean, 0.0);
    EXPECT_EQ(r.stddev, 0.0);
  }
}

TEST(ActivationStats, SingleStepOneRowAndLayerChecked) {
  const auto& m = testing::small_trained_model();
  std::vector<TrajectoryState> states{{Matrix::Ones(4, 2), 10}};
  const auto rows = record_activation_stats(m, states, last_hidden_layer(m));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].t, 10);
  EXPECT_LE(rows[0].min, rows[0].mean);
  EXPECT_LE(rows[0].mean, rows[0].max);
  EXPECT_THROW(record_activation_stats(m, states, 4), std::out_of_range);
}

}  // namespace
}  // namespace pqd
