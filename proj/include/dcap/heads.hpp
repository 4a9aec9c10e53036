#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dcap/backbone.hpp"

namespace dcap {

enum class Pooling { gap, attpool };
enum class Similarity { cosine, neg_euclidean };

std::string_view to_string(Pooling p);
Pooling parse_pooling(std::string_view s);

/// Depth-2 attention regressor applied per descriptor as 1x1 convolutions:
/// [f_gap ; f_j] (2d channels) -> 8 hidden (relu) -> 1 score.
template <typename T>
struct AttentionRegressor {
  static constexpr std::size_t hidden = 8;

  Parameter<T> w1, b1, w2, b2;

  AttentionRegressor() = default;
  AttentionRegressor(std::size_t depth, std::uint64_t seed);

  std::size_t depth() const noexcept { return w1.value.dim(1) / 2; }
  std::vector<Parameter<T>*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

/// Linear base-class classifier over d-dimensional descriptors.
/// weight is stored d x C so logits are x * weight + bias.
template <typename T>
struct GlobalClassifier {
  Parameter<T> weight, bias;
  /// When set, the classifier enters graphs as constants and never
  /// receives gradients.
  bool frozen = false;

  GlobalClassifier() = default;
  GlobalClassifier(std::size_t depth, std::size_t classes, std::uint64_t seed);

  std::size_t depth() const { return weight.value.dim(0); }
  std::size_t classes() const { return weight.value.dim(1); }
  std::vector<Parameter<T>*> parameters() { return {&weight, &bias}; }

  /// Binds weight and bias to g, as constants when frozen.
  std::pair<Var, Var> bind(Graph<T>& g);
};

/// Per-descriptor attention for a batch of maps, both [N, r].
struct AttentionVars {
  Var raw;         // sigmoid scores A in (0,1)
  Var normalized;  // alpha = A / sum(A), rows sum to 1
};

/// Plain-value attention map of one image.
struct AttentionMap {
  std::size_t h = 0, w = 0;
  std::vector<double> raw;
  std::vector<double> normalized;
};

/// Mean over the r descriptors: [N,d,h,w] -> [N,d].
template <typename T> Var gap(Graph<T>& g, Var maps);

/// Regressor scores for every descriptor, conditioned on the map's GAP
/// vector (concatenated first, descriptor second).
template <typename T>
AttentionVars attention_scores(Graph<T>& g, Var maps, AttentionRegressor<T>& reg);

/// alpha-weighted sum of descriptors: [N,d,h,w] x [N,r] -> [N,d].
/// An all-zero map pools to the zero embedding and logs a warning.
template <typename T> Var att_pool(Graph<T>& g, Var maps, Var alpha);

/// Per-class mean of support embeddings [Ns,d] -> [way,d]. Labels are
/// episode labels in [0, way); every class needs at least one embedding.
template <typename T>
Var centroids(Graph<T>& g, Var embeddings, std::span<const std::size_t> labels, std::size_t way);

/// logits[q,t] = <f_q, c_t / ||c_t||>. Queries stay unnormalized.
/// Throws DegenerateCentroidError for a zero centroid.
template <typename T> Var nc_logits(Graph<T>& g, Var queries, Var cents);

/// Temperature-scaled baseline: softmax(s(f, c_t) / tau) with s cosine or
/// negative squared Euclidean distance. Throws ConfigError for tau <= 0.
template <typename T>
Var nc_classify_tau(Graph<T>& g, Var queries, Var cents, Similarity sim, double tau);

/// Global classifier applied to each descriptor: [N,d,h,w] -> [N*r, C],
/// row n*r + j holding descriptor j of image n.
template <typename T> Var dense_logits(Graph<T>& g, Var maps, Var weight, Var bias);

/// Extracts image i of an attention batch.
template <typename T>
AttentionMap attention_map_of(const Graph<T>& g, const AttentionVars& att, std::size_t image, std::size_t h,
                              std::size_t w);

}  // namespace dcap
