#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "dcap/graph.hpp"

namespace dcap::nk {

struct GradCheckOptions {
  double eps = 1e-3;
  /// Coordinates sampled per parameter tensor.
  std::size_t max_coords = 256;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +-eps perturbation crossed a relu or max-pool kink.
  std::size_t skipped_kinks = 0;
};

/// Builds the loss on a fresh graph; must bind every checked parameter via
/// Graph::param.
using LossBuilder = std::function<Var(Graph<double>&)>;

/// Compares backward() against central differences on sampled coordinates.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// A coordinate is skipped when the activation signature at w-eps or w+eps
/// differs from the one at w, i.e. the perturbation crosses a kink.
/// Throws std::invalid_argument for eps outside [1e-4, 1e-2] and
/// NonFiniteError for a non-finite loss.
GradCheckReport grad_check(const LossBuilder& build, std::span<Parameter<double>* const> params,
                           const GradCheckOptions& opt = {});

}  // namespace dcap::nk
