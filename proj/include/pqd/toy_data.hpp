// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>

#include "pqd/common.hpp"

namespace pqd {

struct MixtureSpec {
  int num_components = 8;
  double radius = 4.0;
  double stddev = 0.3;
};

/// Equal-weight isotropic Gaussians centred on a circle. Each row's
/// condition is the index of the component it was drawn from.
inline SampleBatch sample_ring_mixture(Eigen::Index n, const MixtureSpec& spec, Rng& rng) {
  require(n >= 0, "sample count must be nonnegative");
  require(spec.num_components >= 1 && spec.stddev > 0.0, "invalid mixture");
  std::uniform_int_distribution<int> comp(0, spec.num_components - 1);
  SampleBatch out{Matrix(n, 2), std::vector<ClassId>(static_cast<std::size_t>(n))};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = comp(rng);
    const double angle = 2.0 * std::numbers::pi * k / spec.num_components;
    out.data(i, 0) = spec.radius * std::cos(angle) + spec.stddev * standard_normal(rng);
    out.data(i, 1) = spec.radius * std::sin(angle) + spec.stddev * standard_normal(rng);
    out.conditions[static_cast<std::size_t>(i)] = k;
  }
  return out;
}

}  // namespace pqd
