// SPDX-License-Identifier: Apache-2.0
//
// A small time-conditioned noise-prediction MLP with optional class
// conditioning, its SGD trainer, and per-layer activation instrumentation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pqd/common.hpp"
#include "pqd/diffusion.hpp"

namespace pqd {

/// Sinusoidal embedding: entry 2i is sin(t * f_i), entry 2i+1 is cos(t * f_i)
/// with geometric frequencies f_i = 10000^(-i / (dim / 2)).
inline Vector time_embedding(int t, int dim) {
  require(dim > 0 && dim % 2 == 0, "time embedding dim must be even and positive");
  const int half = dim / 2;
  Vector e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[2 * i] = std::sin(t * freq);
    e[2 * i + 1] = std::cos(t * freq);
  }
  return e;
}

inline Vector time_embedding(int t, int dim, int num_steps) {
  if (t < 0 || t >= num_steps) throw std::out_of_range("time step outside [0, T)");
  return time_embedding(t, dim);
}

enum class Activation : std::uint8_t { kIdentity = 0, kSiLU = 1 };

struct AffineLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation act = Activation::kIdentity;

  int in_features() const { return static_cast<int>(weight.cols()); }
  int out_features() const { return static_cast<int>(weight.rows()); }
};

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

inline double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

inline void apply_activation(Matrix& z, Activation act) {
  if (act == Activation::kSiLU) z = z.unaryExpr([](double v) { return silu(v); });
}

struct DenoiserShape {
  int input_dim = 2;
  int time_embed_dim = 32;
  int num_classes = 0;
  int class_embed_dim = 16;
  int hidden_width = 128;
  int hidden_layers = 3;
};

/// Parameters of the noise-prediction network. The first layer sees
/// [x, time embedding, class embedding]; every layer but the last applies
/// SiLU. With zero classes the class embedding has zero width.
struct Denoiser {
  int dim = 0;
  int time_embed_dim = 0;
  int num_classes = 0;
  Matrix class_table;  // num_classes x class_embed_dim
  std::vector<AffineLayer> layers;

  int input_dim() const { return dim; }
  int class_embed_dim() const { return static_cast<int>(class_table.cols()); }
  int num_layers() const { return static_cast<int>(layers.size()); }

  void validate() const {
    require(dim > 0, "input dim must be positive");
    require(time_embed_dim > 0 && time_embed_dim % 2 == 0, "time_embed_dim must be even and positive");
    require(num_classes >= 0, "num_classes must be nonnegative");
    require(class_table.rows() == num_classes, "class table rows must equal num_classes");
    require(!layers.empty(), "denoiser needs at least one layer");
    int width = dim + time_embed_dim + class_embed_dim();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      require(L.in_features() == width, "layer " + std::to_string(l) + " input width does not chain");
      require(L.bias.size() == L.out_features(), "layer " + std::to_string(l) + " bias size mismatch");
      require(L.weight.allFinite() && L.bias.allFinite(), "layer " + std::to_string(l) + " has non-finite parameters");
      width = L.out_features();
    }
    require(width == dim, "final layer width must equal input dim");
    require(class_table.allFinite(), "class table has non-finite entries");
  }

  /// Assembles the first-layer input. `steps` and `conds` hold either one
  /// entry (broadcast) or one per row; an empty `conds` means unconditional.
  Matrix build_input(const Matrix& x, std::span<const int> steps, std::span<const ClassId> conds) const {
    const Eigen::Index B = x.rows();
    if (x.cols() != dim) throw std::invalid_argument("x width does not match denoiser input dim");
    if (steps.size() != 1 && static_cast<Eigen::Index>(steps.size()) != B)
      throw std::invalid_argument("steps must be broadcast or per-row");
    if (!conds.empty() && conds.size() != 1 && static_cast<Eigen::Index>(conds.size()) != B)
      throw std::invalid_argument("conditions must be empty, broadcast or per-row");
    const int E = time_embed_dim;
    const int C = class_embed_dim();
    Matrix in = Matrix::Zero(B, dim + E + C);
    in.leftCols(dim) = x;
    std::optional<Vector> shared;
    if (steps.size() == 1) shared = time_embedding(steps[0], E);
    for (Eigen::Index i = 0; i < B; ++i) {
      in.row(i).segment(dim, E) =
          shared ? shared->transpose() : time_embedding(steps[static_cast<std::size_t>(i)], E).transpose();
      if (conds.empty()) continue;
      const ClassId c = conds.size() == 1 ? conds[0] : conds[static_cast<std::size_t>(i)];
      if (c == kUnconditional) continue;
      if (c < 0 || c >= num_classes)
        throw std::invalid_argument("unknown class id " + std::to_string(c));
      in.row(i).segment(dim + E, C) = class_table.row(c);
    }
    return in;
  }

  /// Runs the affine stack. `hook(layer, input, output)` observes each
  /// layer's input and post-nonlinearity output.
  template <class Hook>
  Matrix run_layers(Matrix a, Hook&& hook) const {
    for (int l = 0; l < num_layers(); ++l) {
      const auto& L = layers[static_cast<std::size_t>(l)];
      Matrix z = a * L.weight.transpose();
      z.rowwise() += L.bias.transpose();
      apply_activation(z, L.act);
      hook(l, a, z);
      a = std::move(z);
    }
    return a;
  }

  Matrix predict(const Matrix& x, std::span<const int> steps, std::span<const ClassId> conds) const {
    return run_layers(build_input(x, steps, conds), [](int, const Matrix&, const Matrix&) {});
  }

  Matrix predict(const Matrix& x, int t, std::optional<ClassId> cond = std::nullopt) const {
    const int step[1] = {t};
    const ClassId c[1] = {cond.value_or(kUnconditional)};
    return predict(x, std::span<const int>(step, 1), std::span<const ClassId>(c, 1));
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization; class
/// embeddings are standard normal.
inline Denoiser initialize_denoiser(const DenoiserShape& shape, std::uint64_t seed) {
  require(shape.hidden_layers >= 0 && shape.hidden_width > 0, "invalid hidden layout");
  Rng rng(seed);
  Denoiser m;
  m.dim = shape.input_dim;
  m.time_embed_dim = shape.time_embed_dim;
  m.num_classes = shape.num_classes;
  const int C = shape.num_classes > 0 ? shape.class_embed_dim : 0;
  m.class_table = Matrix(shape.num_classes, C);
  for (Eigen::Index i = 0; i < m.class_table.size(); ++i) m.class_table.data()[i] = standard_normal(rng);
  int width = shape.input_dim + shape.time_embed_dim + C;
  for (int l = 0; l <= shape.hidden_layers; ++l) {
    const bool last = l == shape.hidden_layers;
    const int out = last ? shape.input_dim : shape.hidden_width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    std::uniform_real_distribution<double> u(-bound, bound);
    AffineLayer L;
    L.weight = Matrix(out, width);
    for (Eigen::Index i = 0; i < L.weight.size(); ++i) L.weight.data()[i] = u(rng);
    L.bias = Vector(out);
    for (Eigen::Index i = 0; i < out; ++i) L.bias[i] = u(rng);
    L.act = last ? Activation::kIdentity : Activation::kSiLU;
    m.layers.push_back(std::move(L));
    width = out;
  }
  round_to_float(m.class_table);
  for (auto& L : m.layers) {
    round_to_float(L.weight);
    round_to_float(L.bias);
  }
  m.validate();
  return m;
}

inline Denoiser zero_denoiser(const DenoiserShape& shape) {
  Denoiser m = initialize_denoiser(shape, 0);
  m.class_table.setZero();
  for (auto& L : m.layers) {
    L.weight.setZero();
    L.bias.setZero();
  }
  return m;
}

/// All parameters flattened in declaration order: per layer the row-major
/// weight then the bias, followed by the class embedding table.
inline std::vector<double> flatten_parameters(const Denoiser& m) {
  std::vector<double> p;
  for (const auto& L : m.layers) {
    p.insert(p.end(), L.weight.data(), L.weight.data() + L.weight.size());
    p.insert(p.end(), L.bias.data(), L.bias.data() + L.bias.size());
  }
  p.insert(p.end(), m.class_table.data(), m.class_table.data() + m.class_table.size());
  return p;
}

inline void assign_parameters(Denoiser& m, std::span<const double> p) {
  std::size_t k = 0;
  auto take = [&](double* dst, Eigen::Index n) {
    if (k + static_cast<std::size_t>(n) > p.size()) throw std::invalid_argument("parameter vector too short");
    std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(k), n, dst);
    k += static_cast<std::size_t>(n);
  };
  for (auto& L : m.layers) {
    take(L.weight.data(), L.weight.size());
    take(L.bias.data(), L.bias.size());
  }
  take(m.class_table.data(), m.class_table.size());
  if (k != p.size()) throw std::invalid_argument("parameter vector too long");
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.3;
  int batch_size = 256;
  int num_iterations = 6000;
  std::uint64_t seed = 0;
  /// Probability of replacing a label by the unconditional token (only
  /// used for conditional models).
  double label_drop_prob = 0.2;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (num_iterations < 0) throw ConfigError("train.num_iterations must be nonnegative");
    if (!(label_drop_prob >= 0.0 && label_drop_prob <= 1.0)) throw ConfigError("train.label_drop_prob must lie in [0, 1]");
  }
};

namespace detail {

/// Mean squared error of the network output against `target` and its
/// gradient with respect to every parameter, laid out like
/// flatten_parameters().
inline double loss_and_gradient(const Denoiser& m, const Matrix& x, std::span<const int> steps,
                                std::span<const ClassId> conds, const Matrix& target, std::vector<double>* grad) {
  const Matrix input = m.build_input(x, steps, conds);
  const int L = m.num_layers();
  std::vector<Matrix> inputs(static_cast<std::size_t>(L));
  std::vector<Matrix> pre(static_cast<std::size_t>(L));
  Matrix a = input;
  for (int l = 0; l < L; ++l) {
    const auto& layer = m.layers[static_cast<std::size_t>(l)];
    inputs[static_cast<std::size_t>(l)] = a;
    Matrix z = a * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    pre[static_cast<std::size_t>(l)] = z;
    apply_activation(z, layer.act);
    a = std::move(z);
  }
  const Matrix diff = a - target;
  const double n = static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() / n;
  if (grad == nullptr) return loss;

  std::vector<Matrix> dW(static_cast<std::size_t>(L));
  std::vector<Vector> db(static_cast<std::size_t>(L));
  Matrix d = (2.0 / n) * diff;
  for (int l = L - 1; l >= 0; --l) {
    const auto& layer = m.layers[static_cast<std::size_t>(l)];
    if (layer.act == Activation::kSiLU)
      d = d.cwiseProduct(pre[static_cast<std::size_t>(l)].unaryExpr([](double v) { return silu_grad(v); }));
    dW[static_cast<std::size_t>(l)] = d.transpose() * inputs[static_cast<std::size_t>(l)];
    db[static_cast<std::size_t>(l)] = d.colwise().sum().transpose();
    d = d * layer.weight;
  }
  Matrix dTable = Matrix::Zero(m.class_table.rows(), m.class_table.cols());
  if (m.num_classes > 0 && !conds.empty()) {
    const int off = m.dim + m.time_embed_dim;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const ClassId c = conds.size() == 1 ? conds[0] : conds[static_cast<std::size_t>(i)];
      if (c == kUnconditional) continue;
      dTable.row(c) += d.row(i).segment(off, m.class_embed_dim());
    }
  }
  grad->clear();
  for (int l = 0; l < L; ++l) {
    const auto& w = dW[static_cast<std::size_t>(l)];
    const auto& b = db[static_cast<std::size_t>(l)];
    grad->insert(grad->end(), w.data(), w.data() + w.size());
    grad->insert(grad->end(), b.data(), b.data() + b.size());
  }
  grad->insert(grad->end(), dTable.data(), dTable.data() + dTable.size());
  return loss;
}

}  // namespace detail

/// A fixed set of forward-diffused pairs used to measure noise-prediction
/// loss reproducibly.
struct EpsilonProbe {
  Matrix x_t;
  Matrix eps;
  std::vector<int> steps;
  std::vector<ClassId> conds;
};

inline EpsilonProbe make_epsilon_probe(const SampleBatch& data, const NoiseSchedule& sched, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> tdist(0, sched.num_steps() - 1);
  EpsilonProbe p;
  p.eps = gaussian_matrix(data.rows(), data.dim(), rng);
  p.x_t = Matrix(data.rows(), data.dim());
  p.steps.resize(static_cast<std::size_t>(data.rows()));
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const int t = tdist(rng);
    p.steps[static_cast<std::size_t>(i)] = t;
    const double ab = sched.alpha_bar(t);
    p.x_t.row(i) = std::sqrt(ab) * data.data.row(i) + std::sqrt(1.0 - ab) * p.eps.row(i);
  }
  p.conds = data.conditions;
  return p;
}

template <NoisePredictor Model>
double epsilon_loss(const Model& m, const EpsilonProbe& p) {
  const Matrix out = m.predict(p.x_t, p.steps, p.conds);
  return (out - p.eps).squaredNorm() / static_cast<double>(out.size());
}

struct TrainResult {
  Denoiser model;
  std::vector<double> batch_losses;  // one per iteration
};

/// Plain SGD on the simple noise-prediction objective with t uniform over
/// the schedule. Labels in `data.conditions` (if any) are dropped to the
/// unconditional token with probability cfg.label_drop_prob.
inline TrainResult train_denoiser(const SampleBatch& data, const NoiseSchedule& sched, const TrainConfig& cfg,
                                  Denoiser init) {
  cfg.validate();
  require(data.rows() > 0, "training data must be nonempty");
  require(data.dim() == init.dim, "training data width differs from denoiser input dim");
  const bool conditional = init.num_classes > 0 && !data.conditions.empty();
  TrainResult result{std::move(init), {}};
  Denoiser& m = result.model;
  if (cfg.num_iterations == 0) return result;

  Rng rng(cfg.seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, data.rows() - 1);
  std::uniform_int_distribution<int> tdist(0, sched.num_steps() - 1);
  std::bernoulli_distribution drop(cfg.label_drop_prob);
  std::vector<double> params = flatten_parameters(m);
  std::vector<double> grad;
  const int B = cfg.batch_size;
  Matrix x0(B, data.dim());
  std::vector<int> steps(static_cast<std::size_t>(B));
  std::vector<ClassId> conds(conditional ? static_cast<std::size_t>(B) : 0);
  result.batch_losses.reserve(static_cast<std::size_t>(cfg.num_iterations));

  for (int it = 0; it < cfg.num_iterations; ++it) {
    for (int i = 0; i < B; ++i) {
      const Eigen::Index r = pick(rng);
      x0.row(i) = data.data.row(r);
      steps[static_cast<std::size_t>(i)] = tdist(rng);
      if (conditional)
        conds[static_cast<std::size_t>(i)] = drop(rng) ? kUnconditional : data.conditions[static_cast<std::size_t>(r)];
    }
    const Matrix eps = gaussian_matrix(B, data.dim(), rng);
    Matrix x_t(B, data.dim());
    for (int i = 0; i < B; ++i) {
      const double ab = sched.alpha_bar(steps[static_cast<std::size_t>(i)]);
      x_t.row(i) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * eps.row(i);
    }
    const double loss = detail::loss_and_gradient(m, x_t, steps, conds, eps, &grad);
    if (!std::isfinite(loss))
      throw NumericalError("training diverged at iteration " + std::to_string(it) + " (loss is not finite)");
    result.batch_losses.push_back(loss);
    for (std::size_t k = 0; k < params.size(); ++k) params[k] -= cfg.learning_rate * grad[k];
    assign_parameters(m, params);
  }
  // Parameters are persisted as 32-bit floats; keep the in-memory model identical.
  for (double& v : params) v = static_cast<double>(static_cast<float>(v));
  assign_parameters(m, params);
  m.validate();
  return result;
}

// ---------------------------------------------------------------------------
// Instrumentation

struct ActivationSummary {
  int t = 0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double stddev = 0.0;

  double range() const { return max - min; }
};

/// Summary of one layer's post-nonlinearity output at every recorded step.
inline std::vector<ActivationSummary> record_activation_stats(const Denoiser& m,
                                                              std::span<const TrajectoryState> states, int layer,
                                                              std::optional<ClassId> cond = std::nullopt) {
  if (layer < 0 || layer >= m.num_layers()) throw std::out_of_range("layer index out of range");
  std::vector<ActivationSummary> rows;
  rows.reserve(states.size());
  const ClassId c[1] = {cond.value_or(kUnconditional)};
  for (const auto& s : states) {
    const int step[1] = {s.t};
    ActivationSummary row;
    row.t = s.t;
    m.run_layers(m.build_input(s.x, std::span<const int>(step, 1), std::span<const ClassId>(c, 1)),
                 [&](int l, const Matrix&, const Matrix& out) {
                   if (l != layer) return;
                   row.min = out.minCoeff();
                   row.max = out.maxCoeff();
                   row.mean = out.mean();
                   const double var = (out.array() - row.mean).square().mean();
                   row.stddev = std::sqrt(var);
                 });
    rows.push_back(row);
  }
  return rows;
}

/// Default instrumented layer: the last hidden layer.
inline int last_hidden_layer(const Denoiser& m) { return std::max(0, m.num_layers() - 2); }

}  // namespace pqd
