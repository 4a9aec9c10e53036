#include "dcap/heads.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dcap/errors.hpp"
#include "dcap/init.hpp"

namespace dcap {

using namespace nk;

std::string_view to_string(Pooling p) { return p == Pooling::gap ? "gap" : "attpool"; }

Pooling parse_pooling(std::string_view s) {
  if (s == "gap") return Pooling::gap;
  if (s == "attpool") return Pooling::attpool;
  throw ConfigError("unknown pooling '" + std::string(s) + "' (expected gap or attpool)");
}

template <typename T>
AttentionRegressor<T>::AttentionRegressor(std::size_t depth, std::uint64_t seed) {
  CounterRng rng(seed);
  w1 = Parameter<T>("regressor.layer1.weight", uniform_init<T>(Shape{hidden, 2 * depth, 1, 1}, he_uniform_bound(2 * depth), rng));
  b1 = Parameter<T>("regressor.layer1.bias", Tensor<T>(Shape{hidden}));
  w2 = Parameter<T>("regressor.layer2.weight", uniform_init<T>(Shape{1, hidden, 1, 1}, lecun_uniform_bound(hidden), rng));
  b2 = Parameter<T>("regressor.layer2.bias", Tensor<T>(Shape{1}));
}

template <typename T>
GlobalClassifier<T>::GlobalClassifier(std::size_t depth, std::size_t classes, std::uint64_t seed) {
  CounterRng rng(seed);
  weight = Parameter<T>("classifier.weight", uniform_init<T>(Shape{depth, classes}, lecun_uniform_bound(depth), rng));
  bias = Parameter<T>("classifier.bias", Tensor<T>(Shape{classes}));
}

template <typename T>
std::pair<Var, Var> GlobalClassifier<T>::bind(Graph<T>& g) {
  if (frozen) return {g.constant(weight.value), g.constant(bias.value)};
  return {g.param(weight), g.param(bias)};
}

template <typename T>
Var gap(Graph<T>& g, Var maps) {
  return global_avg_pool(g, maps);
}

template <typename T>
AttentionVars attention_scores(Graph<T>& g, Var maps, AttentionRegressor<T>& reg) {
  const Shape& s = g.value(maps).shape();
  if (s.size() != 4) throw ShapeError("attention_scores", "expected a [N,d,h,w] map, got " + shape_str(s));
  const std::size_t n = s[0], d = s[1], h = s[2], w = s[3];
  if (reg.w1.value.dim(1) != 2 * d) {
    throw ShapeError("attention_scores", "regressor expects " + std::to_string(reg.w1.value.dim(1)) +
                                             " input channels but [gap ; descriptor] has " + std::to_string(2 * d));
  }
  Var pooled = expand_spatial(g, gap(g, maps), h, w);
  Var joint = concat_channels(g, pooled, maps);
  Var hidden = relu(g, conv2d(g, joint, g.param(reg.w1), g.param(reg.b1)));
  Var score = conv2d(g, hidden, g.param(reg.w2), g.param(reg.b2));
  Var raw = reshape(g, sigmoid(g, score), Shape{n, h * w});
  Var total = sum_axis(g, raw, 1);
  Var alpha = mul_rows(g, raw, reciprocal(g, total));
  return {raw, alpha};
}

template <typename T>
Var att_pool(Graph<T>& g, Var maps, Var alpha) {
  const Tensor<T>& mv = g.value(maps);
  if (std::all_of(mv.values().begin(), mv.values().end(), [](T v) { return v == T{0}; })) {
    std::cerr << "warning: att_pool received an all-zero feature map; pooled embedding is zero\n";
  }
  return weighted_spatial_sum(g, maps, alpha);
}

template <typename T>
Var centroids(Graph<T>& g, Var embeddings, std::span<const std::size_t> labels, std::size_t way) {
  const Shape& s = g.value(embeddings).shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("centroids", "embeddings " + shape_str(s) + " with " + std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> counts(way, 0);
  for (std::size_t y : labels) {
    if (y >= way) throw std::invalid_argument("centroids: label " + std::to_string(y) + " outside [0, " + std::to_string(way) + ")");
    ++counts[y];
  }
  for (std::size_t c = 0; c < way; ++c)
    if (counts[c] == 0) throw std::invalid_argument("centroids: class " + std::to_string(c) + " has no support embedding");
  Tensor<T> avg(Shape{way, labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) avg[labels[i] * labels.size() + i] = T{1} / static_cast<T>(counts[labels[i]]);
  return matmul(g, g.constant(std::move(avg)), embeddings);
}

template <typename T>
Var nc_logits(Graph<T>& g, Var queries, Var cents) {
  const Tensor<T>& cv = g.value(cents);
  if (cv.rank() != 2) throw ShapeError("nc_logits", "centroids must be [N,d], got " + shape_str(cv.shape()));
  const std::size_t d = cv.dim(1);
  for (std::size_t t = 0; t < cv.dim(0); ++t) {
    T sq{0};
    for (std::size_t k = 0; k < d; ++k) sq += cv[t * d + k] * cv[t * d + k];
    if (!(sq > T{0})) throw DegenerateCentroidError("nc_logits: centroid " + std::to_string(t) + " has zero norm");
  }
  return matmul(g, queries, l2_normalize_rows(g, cents), true);
}

template <typename T>
Var nc_classify_tau(Graph<T>& g, Var queries, Var cents, Similarity sim, double tau) {
  if (!(tau > 0)) throw ConfigError("nc_classify_tau: temperature must be positive");
  Var scores;
  if (sim == Similarity::cosine) {
    scores = matmul(g, l2_normalize_rows(g, queries), l2_normalize_rows(g, cents), true);
  } else {
    const std::size_t m = g.value(queries).dim(0), n = g.value(cents).dim(0);
    Var qn = reshape(g, sum_axis(g, mul(g, queries, queries), 1), Shape{m, 1});
    Var cn = reshape(g, sum_axis(g, mul(g, cents, cents), 1), Shape{1, n});
    Var q_sq = matmul(g, qn, g.constant(Tensor<T>(Shape{1, n}, T{1})));
    Var c_sq = matmul(g, g.constant(Tensor<T>(Shape{m, 1}, T{1})), cn);
    Var dot2 = scale(g, matmul(g, queries, cents, true), T{2});
    scores = sub(g, sub(g, dot2, q_sq), c_sq);
  }
  return softmax(g, scale(g, scores, static_cast<T>(1.0 / tau)), 1);
}

template <typename T>
Var dense_logits(Graph<T>& g, Var maps, Var weight, Var bias) {
  const Shape& s = g.value(maps).shape();
  if (s.size() != 4) throw ShapeError("dense_logits", "expected a [N,d,h,w] map, got " + shape_str(s));
  const std::size_t n = s[0], d = s[1], r = s[2] * s[3];
  if (g.value(weight).rank() != 2 || g.value(weight).dim(0) != d) {
    throw ShapeError("dense_logits", "classifier " + shape_str(g.value(weight).shape()) + " does not accept depth " + std::to_string(d));
  }
  Var descriptors = reshape(g, transpose_last2(g, reshape(g, maps, Shape{n, d, r})), Shape{n * r, d});
  return linear(g, descriptors, weight, bias);
}

template <typename T>
AttentionMap attention_map_of(const Graph<T>& g, const AttentionVars& att, std::size_t image, std::size_t h,
                              std::size_t w) {
  AttentionMap m;
  m.h = h;
  m.w = w;
  const std::size_t r = h * w;
  const Tensor<T>& raw = g.value(att.raw);
  const Tensor<T>& alpha = g.value(att.normalized);
  if (raw.rank() != 2 || raw.dim(1) != r || image >= raw.dim(0)) {
    throw ShapeError("attention_map_of", "attention " + shape_str(raw.shape()) + " for image " + std::to_string(image));
  }
  m.raw.assign(raw.data() + image * r, raw.data() + (image + 1) * r);
  m.normalized.assign(alpha.data() + image * r, alpha.data() + (image + 1) * r);
  return m;
}

#define DCAP_INSTANTIATE_HEADS(T)                                                                                  \
  template struct AttentionRegressor<T>;                                                                          \
  template struct GlobalClassifier<T>;                                                                            \
  template Var gap<T>(Graph<T>&, Var);                                                                            \
  template AttentionVars attention_scores<T>(Graph<T>&, Var, AttentionRegressor<T>&);                             \
  template Var att_pool<T>(Graph<T>&, Var, Var);                                                                  \
  template Var centroids<T>(Graph<T>&, Var, std::span<const std::size_t>, std::size_t);                           \
  template Var nc_logits<T>(Graph<T>&, Var, Var);                                                                 \
  template Var nc_classify_tau<T>(Graph<T>&, Var, Var, Similarity, double);                                       \
  template Var dense_logits<T>(Graph<T>&, Var, Var, Var);                                                         \
  template AttentionMap attention_map_of<T>(const Graph<T>&, const AttentionVars&, std::size_t, std::size_t,      \
                                            std::size_t);

DCAP_INSTANTIATE_HEADS(float)
DCAP_INSTANTIATE_HEADS(double)

}  // namespace dcap
