#pragma once

#include <cmath>
#include <vector>

#include "dcap/episodes.hpp"
#include "dcap/rng.hpp"
#include "dcap/tensor.hpp"

namespace dcap::tsup {

template <typename T = double>
nk::Tensor<T> random_tensor(nk::Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  nk::Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const nk::Tensor<T>& a, const nk::Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// Probability vector of length n drawn from normalized uniforms.
inline std::vector<double> random_simplex(std::size_t n, CounterRng& rng) {
  std::vector<double> p(n);
  double s = 0;
  for (double& v : p) s += (v = rng.uniform(0.05, 1.0));
  for (double& v : p) v /= s;
  return p;
}

/// Tiny dataset for sampler tests: classes per split, images per class,
/// 16x16 single channel, pixel value = image index mod 256.
inline Dataset tiny_dataset(std::size_t train, std::size_t val, std::size_t test, std::size_t per_class,
                            std::size_t extent = 16) {
  Dataset ds(1, extent);
  std::size_t next = 0;
  const std::size_t counts[3] = {train, val, test};
  for (int s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < counts[s]; ++c) {
      const std::size_t id = ds.add_class("c" + std::to_string(s) + "_" + std::to_string(c), kAllSplits[s]);
      for (std::size_t i = 0; i < per_class; ++i) {
        std::vector<std::uint8_t> px(extent * extent, static_cast<std::uint8_t>(next++ % 256));
        ds.add_image(id, px);
      }
    }
  return ds;
}

}  // namespace dcap::tsup
