#pragma once

#include <cstdint>
#include <random>

#include "booknet/tensor.hpp"

namespace booknet::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

/// Random values with magnitude in [0.1, 1], keeping away from kinks at 0.
inline Tensor random_away_from_zero(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

}  // namespace booknet::testing
