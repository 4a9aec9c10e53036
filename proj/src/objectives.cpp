#include "dcap/objectives.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dcap/errors.hpp"

namespace dcap {

using namespace nk;

SoftLabel smooth_label(std::size_t y, std::size_t classes, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw std::invalid_argument("smooth_label: epsilon must lie in [0, 1)");
  if (classes == 0 || y >= classes) {
    throw std::invalid_argument("smooth_label: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  }
  SoftLabel s;
  s.source = y;
  s.epsilon = eps;
  s.probs.assign(classes, eps / static_cast<double>(classes));
  s.probs[y] += 1.0 - eps;
  return s;
}

template <typename T>
Tensor<T> smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, double eps) {
  Tensor<T> t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const SoftLabel s = smooth_label(labels[i], classes, eps);
    for (std::size_t c = 0; c < classes; ++c) t[i * classes + c] = static_cast<T>(s.probs[c]);
  }
  return t;
}

template <typename T>
Var cross_entropy_rows(Graph<T>& g, Var logits, Var targets) {
  const Shape& s = g.value(logits).shape();
  if (s.size() != 2 || g.value(targets).shape() != s) {
    throw ShapeError("cross_entropy_rows", "logits " + shape_str(s) + " vs targets " + shape_str(g.value(targets).shape()));
  }
  return scale(g, sum_axis(g, mul(g, targets, log_softmax(g, logits, 1)), 1), T{-1});
}

template <typename T>
Var ce_loss(Graph<T>& g, Var logits, const SoftLabel& label) {
  const std::size_t c = label.probs.size();
  if (g.value(logits).size() != c) {
    throw ShapeError("ce_loss", "logits " + shape_str(g.value(logits).shape()) + " for " + std::to_string(c) + " classes");
  }
  Tensor<T> target(Shape{1, c});
  for (std::size_t k = 0; k < c; ++k) target[k] = static_cast<T>(label.probs[k]);
  Var row = reshape(g, logits, Shape{1, c});
  return sum(g, cross_entropy_rows(g, row, g.constant(std::move(target))));
}

template <typename T>
Var pretrain_loss_gap(Graph<T>& g, Var maps, std::span<const std::size_t> labels, Var weight, Var bias, double eps) {
  Var logits = linear(g, gap(g, maps), weight, bias);
  const std::size_t classes = g.value(weight).dim(1);
  return mean(g, cross_entropy_rows(g, logits, g.constant(smoothed_targets<T>(labels, classes, eps))));
}

template <typename T>
Var pretrain_loss_dc(Graph<T>& g, Var maps, std::span<const std::size_t> labels, Var weight, Var bias, double eps) {
  const Shape& s = g.value(maps).shape();
  if (s.size() != 4 || s[0] != labels.size()) {
    throw ShapeError("pretrain_loss_dc", "maps " + shape_str(s) + " with " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s[0], r = s[2] * s[3];
  std::vector<std::size_t> site_labels(n * r);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(site_labels.begin() + static_cast<std::ptrdiff_t>(i * r), r, labels[i]);
  Var logits = dense_logits(g, maps, weight, bias);
  const std::size_t classes = g.value(weight).dim(1);
  Var per_site = cross_entropy_rows(g, logits, g.constant(smoothed_targets<T>(site_labels, classes, eps)));
  return scale(g, sum(g, per_site), T{1} / static_cast<T>(n));
}

template <typename T>
Var meta_loss(Graph<T>& g, Var logits, std::span<const std::size_t> labels) {
  Var logp = log_softmax(g, logits, 1);
  return scale(g, mean(g, gather_cols(g, logp, labels)), T{-1});
}

template <typename T>
Var entropy_reg(Graph<T>& g, Var alpha) {
  const Shape& s = g.value(alpha).shape();
  if (s.size() != 2 || s[0] == 0) throw ShapeError("entropy_reg", "expected [Nq, r] weights, got " + shape_str(s));
  return scale(g, sum(g, xlogx(g, alpha)), T{1} / static_cast<T>(s[0]));
}

template <typename T>
Var meta_global_ce(Graph<T>& g, Var maps, Var raw_attention, Var weight, Var bias,
                   std::span<const std::size_t> base_labels, bool divide_by_r, double fixed_eps) {
  const Shape& s = g.value(maps).shape();
  if (s.size() != 4 || s[0] != base_labels.size()) {
    throw ShapeError("meta_global_ce", "maps " + shape_str(s) + " with " + std::to_string(base_labels.size()) + " labels");
  }
  const std::size_t n = s[0], r = s[2] * s[3], classes = g.value(weight).dim(1);
  std::vector<std::size_t> site_labels(n * r);
  for (std::size_t i = 0; i < n; ++i) {
    if (base_labels[i] >= classes) {
      throw std::invalid_argument("meta_global_ce: base label " + std::to_string(base_labels[i]) + " outside classifier range");
    }
    std::fill_n(site_labels.begin() + static_cast<std::ptrdiff_t>(i * r), r, base_labels[i]);
  }
  Var logp = log_softmax(g, dense_logits(g, maps, weight, bias), 1);
  Var per_site;
  if (raw_attention.valid()) {
    const Tensor<T>& av = g.value(raw_attention);
    if (av.shape() != Shape{n, r}) {
      throw ShapeError("meta_global_ce", "attention " + shape_str(av.shape()) + " for maps " + shape_str(s));
    }
    for (T a : av.values()) {
      if (!(a >= T{0} && a <= T{1})) throw InvariantViolation("meta_global_ce: attention score outside [0, 1]");
    }
    // Target with eps = 1 - A: A * onehot + (1 - A) / C, so
    // CE = -A * logp_y - (1 - A) * mean_c logp_c.
    Var a = reshape(g, raw_attention, Shape{n * r});
    Var hard = gather_cols(g, logp, site_labels);
    Var uniform = scale(g, sum_axis(g, logp, 1), T{1} / static_cast<T>(classes));
    Var one_minus_a = add_scalar(g, scale(g, a, T{-1}), T{1});
    per_site = scale(g, add(g, mul(g, a, hard), mul(g, one_minus_a, uniform)), T{-1});
  } else {
    Var targets = g.constant(smoothed_targets<T>(site_labels, classes, fixed_eps));
    per_site = scale(g, sum_axis(g, mul(g, targets, logp), 1), T{-1});
  }
  T norm = T{1} / static_cast<T>(n);
  if (divide_by_r) norm /= static_cast<T>(r);
  return scale(g, sum(g, per_site), norm);
}

template <typename T>
EpisodeTerms episode_objective(Graph<T>& g, MetaModel<T>& model, const EpisodeInput<T>& ep, const ObjectiveOptions& opt) {
  const std::size_t ns = ep.support_labels.size(), nq = ep.query_labels.size();
  if (ep.images.rank() != 4 || ep.images.dim(0) != ns + nq) {
    throw ShapeError("episode_objective", "images " + shape_str(ep.images.shape()) + " for " + std::to_string(ns) +
                                              " support and " + std::to_string(nq) + " query labels");
  }
  EpisodeTerms terms;
  Var maps = model.backbone->embed(g, g.constant(ep.images), opt.mode);
  Var embeddings;
  if (opt.pooling == Pooling::attpool) {
    if (!model.regressor) throw std::invalid_argument("episode_objective: attentive pooling needs a regressor");
    terms.attention = attention_scores(g, maps, *model.regressor);
    embeddings = att_pool(g, maps, terms.attention.normalized);
  } else {
    embeddings = gap(g, maps);
  }
  std::vector<std::size_t> support_rows(ns), query_rows(nq);
  std::iota(support_rows.begin(), support_rows.end(), std::size_t{0});
  std::iota(query_rows.begin(), query_rows.end(), ns);
  Var cents = centroids(g, select_rows(g, embeddings, std::span<const std::size_t>(support_rows)), ep.support_labels, ep.way);
  terms.logits = nc_logits(g, select_rows(g, embeddings, std::span<const std::size_t>(query_rows)), cents);
  terms.meta = meta_loss(g, terms.logits, ep.query_labels);
  terms.total = terms.meta;

  if (opt.pooling == Pooling::attpool && opt.weights.beta != 0.0) {
    Var query_alpha = select_rows(g, terms.attention.normalized, std::span<const std::size_t>(query_rows));
    terms.entropy = entropy_reg(g, query_alpha);
    terms.total = add(g, terms.total, scale(g, terms.entropy, static_cast<T>(opt.weights.beta)));
  }
  if (opt.weights.gamma != 0.0 && !ep.query_base_labels.empty()) {
    if (!model.classifier) throw std::invalid_argument("episode_objective: global term needs a classifier");
    auto [weight, bias] = model.classifier->bind(g);
    Var query_maps = select_rows(g, maps, std::span<const std::size_t>(query_rows));
    Var raw;
    if (opt.pooling == Pooling::attpool) raw = select_rows(g, terms.attention.raw, std::span<const std::size_t>(query_rows));
    terms.global_ce = meta_global_ce(g, query_maps, raw, weight, bias, ep.query_base_labels, opt.ce_divide_by_r, opt.gap_smoothing);
    terms.total = add(g, terms.total, scale(g, terms.global_ce, static_cast<T>(opt.weights.gamma)));
  }
  return terms;
}

template <typename T>
Var total_meta_objective(Graph<T>& g, MetaModel<T>& model, std::span<const EpisodeInput<T>> batch,
                         const ObjectiveOptions& opt) {
  if (batch.empty()) throw std::invalid_argument("total_meta_objective: empty episode batch");
  Var acc;
  for (const EpisodeInput<T>& ep : batch) {
    Var t = episode_objective(g, model, ep, opt).total;
    acc = acc.valid() ? add(g, acc, t) : t;
  }
  return scale(g, acc, T{1} / static_cast<T>(batch.size()));
}

#define DCAP_INSTANTIATE_OBJECTIVES(T)                                                                            \
  template Tensor<T> smoothed_targets<T>(std::span<const std::size_t>, std::size_t, double);                     \
  template Var cross_entropy_rows<T>(Graph<T>&, Var, Var);                                                       \
  template Var ce_loss<T>(Graph<T>&, Var, const SoftLabel&);                                                     \
  template Var pretrain_loss_gap<T>(Graph<T>&, Var, std::span<const std::size_t>, Var, Var, double);             \
  template Var pretrain_loss_dc<T>(Graph<T>&, Var, std::span<const std::size_t>, Var, Var, double);              \
  template Var meta_loss<T>(Graph<T>&, Var, std::span<const std::size_t>);                                       \
  template Var entropy_reg<T>(Graph<T>&, Var);                                                                   \
  template Var meta_global_ce<T>(Graph<T>&, Var, Var, Var, Var, std::span<const std::size_t>, bool, double);     \
  template EpisodeTerms episode_objective<T>(Graph<T>&, MetaModel<T>&, const EpisodeInput<T>&,                   \
                                             const ObjectiveOptions&);                                           \
  template Var total_meta_objective<T>(Graph<T>&, MetaModel<T>&, std::span<const EpisodeInput<T>>,               \
                                       const ObjectiveOptions&);

DCAP_INSTANTIATE_OBJECTIVES(float)
DCAP_INSTANTIATE_OBJECTIVES(double)

}  // namespace dcap
