#pragma once

#include <span>
#include <vector>

#include "dcap/heads.hpp"

namespace dcap {

/// Probability vector (1-eps)*onehot(source) + eps/C.
struct SoftLabel {
  std::vector<double> probs;
  std::size_t source = 0;
  double epsilon = 0.0;
};

/// Throws std::invalid_argument unless 0 <= eps < 1 and y < classes.
SoftLabel smooth_label(std::size_t y, std::size_t classes, double eps);

/// Stacked smoothed targets for a label list: [M, classes].
template <typename T>
Tensor<T> smoothed_targets(std::span<const std::size_t> labels, std::size_t classes, double eps);

struct LossWeights {
  double beta = 0.1;   // entropy regularizer
  double gamma = 0.5;  // dense global classification
};

/// Per-row soft-target cross entropy -sum_c y_c log softmax(z)_c: [M,C] -> [M].
template <typename T> Var cross_entropy_rows(Graph<T>& g, Var logits, Var targets);

/// Scalar cross entropy of one logit row ([C] or [1,C]) against a soft label.
template <typename T> Var ce_loss(Graph<T>& g, Var logits, const SoftLabel& label);

/// Image-level pre-training loss: mean over images of CE(W^T gap(x) + b).
template <typename T>
Var pretrain_loss_gap(Graph<T>& g, Var maps, std::span<const std::size_t> labels, Var weight, Var bias,
                      double eps = 0.1);

/// Dense pre-training loss: per image the sum over its r descriptors of
/// CE(W^T f_j + b), averaged over images.
template <typename T>
Var pretrain_loss_dc(Graph<T>& g, Var maps, std::span<const std::size_t> labels, Var weight, Var bias,
                     double eps = 0.1);

/// Mean negative log-likelihood of the query labels under softmax(logits).
template <typename T> Var meta_loss(Graph<T>& g, Var logits, std::span<const std::size_t> labels);

/// Mean over rows of sum_j alpha_j log alpha_j, for alpha [Nq, r].
template <typename T> Var entropy_reg(Graph<T>& g, Var alpha);

/// Dense base-class classification of query descriptors, with each
/// descriptor's target smoothed by eps_j = 1 - A_j (raw sigmoid score).
/// When raw_attention is invalid a fixed eps is used for every site.
/// Per image the r terms are summed (or averaged with divide_by_r); the
/// result is the mean over images. weight/bias are bound by the caller,
/// normally as constants.
/// Throws InvariantViolation when any A lies outside [0, 1].
template <typename T>
Var meta_global_ce(Graph<T>& g, Var maps, Var raw_attention, Var weight, Var bias,
                   std::span<const std::size_t> base_labels, bool divide_by_r = false, double fixed_eps = 0.1);

/// One episode ready for the graph: support images first, then queries.
template <typename T>
struct EpisodeInput {
  Tensor<T> images;  // [Ns + Nq, C, S, S]
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  /// Base-class ids of the queries; empty disables the global term.
  std::vector<std::size_t> query_base_labels;
  std::size_t way = 0;
};

/// The learner pieces an episode objective needs. regressor may be null
/// for GAP pooling.
template <typename T>
struct MetaModel {
  Backbone<T>* backbone = nullptr;
  AttentionRegressor<T>* regressor = nullptr;
  GlobalClassifier<T>* classifier = nullptr;
};

struct ObjectiveOptions {
  LossWeights weights;
  Pooling pooling = Pooling::attpool;
  Mode mode = Mode::train;
  bool ce_divide_by_r = false;
  /// Smoothing for the global term when there is no attention map.
  double gap_smoothing = 0.1;
};

struct EpisodeTerms {
  Var meta;       // always present
  Var entropy;    // invalid when unused
  Var global_ce;  // invalid when unused
  Var total;
  Var logits;     // [Nq, way]
  AttentionVars attention;  // over all Ns + Nq images; invalid for GAP
};

/// L_meta + beta * L_entropy + gamma * L_ce for one episode. Terms with a
/// zero weight are not built, so their parameters receive no gradient.
template <typename T>
EpisodeTerms episode_objective(Graph<T>& g, MetaModel<T>& model, const EpisodeInput<T>& ep,
                               const ObjectiveOptions& opt);

/// Mean of episode_objective totals over a batch of episodes.
template <typename T>
Var total_meta_objective(Graph<T>& g, MetaModel<T>& model, std::span<const EpisodeInput<T>> batch,
                         const ObjectiveOptions& opt);

}  // namespace dcap
