#pragma once

#include <cmath>

#include "dcap/rng.hpp"
#include "dcap/tensor.hpp"

namespace dcap {

/// U(-bound, bound) fill, deterministic for a given stream.
template <typename T>
nk::Tensor<T> uniform_init(nk::Shape shape, double bound, CounterRng& rng) {
  nk::Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Bound for relu-followed layers: sqrt(6 / fan_in).
inline double he_uniform_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }
/// Bound for output layers: 1 / sqrt(fan_in).
inline double lecun_uniform_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace dcap
