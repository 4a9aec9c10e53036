#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcap/episodes.hpp"
#include "dcap/graph.hpp"

namespace dcap {

/// Outcome of one self-check. value is the measured error (or violation
/// count) and passes when value < tolerance.
struct CheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double value = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  std::string detail;
};

/// Random-input gradient case for one primitive. build receives one leaf
/// per entry of shapes, drawn uniformly from [lo, hi].
struct PrimitiveCase {
  std::string name;
  std::vector<nk::Shape> shapes;
  double lo = -1, hi = 1;
  std::function<nk::Var(nk::Graph<double>&, std::vector<nk::Var>&)> build;
};

const std::vector<PrimitiveCase>& primitive_cases();

/// sum(x * c) for a fixed random c of x's shape.
nk::Var random_probe(nk::Graph<double>& g, nk::Var x, std::uint64_t seed);

/// grad_check of every primitive at eps 1e-4, one result per case and seed.
std::vector<CheckResult> primitive_gradient_checks(std::span<const std::uint64_t> seeds);

/// grad_check of each loss term and of the combined episode objective on
/// random 2-way toy episodes with d = 4 and r = 4.
std::vector<CheckResult> objective_gradient_checks(std::span<const std::uint64_t> seeds);

/// Pooling, classifier and loss identities on random inputs; tolerance 1e-6.
std::vector<CheckResult> identity_checks(std::span<const std::uint64_t> seeds);

/// Sampler invariants over `episodes` random draws from each split, the
/// 5-way 1-shot image count and manifest stability across reruns and
/// thread counts 1 vs 4.
std::vector<CheckResult> episode_protocol_checks(const Dataset& ds, std::uint64_t seed, std::size_t episodes = 1000);

bool all_passed(std::span<const CheckResult> results);

/// "name seed=<s> value=<v> tol=<t> PASS|FAIL"
std::string format_check(const CheckResult& r);

}  // namespace dcap
