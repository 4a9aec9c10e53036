#pragma once

#include <cstddef>
#include <span>

#include "dcap/graph.hpp"

// Differentiable primitives. Each records one node on the graph and throws
// ShapeError naming itself when its shape rule is violated. Shape rules are
// given per function; N is the batch axis, C channels, H/W spatial extents.

namespace dcap::nk {

// Elementwise, any shape.
template <typename T> Var relu(Graph<T>& g, Var x);
template <typename T> Var sigmoid(Graph<T>& g, Var x);
template <typename T> Var exp(Graph<T>& g, Var x);
/// Requires strictly positive input.
template <typename T> Var log(Graph<T>& g, Var x);
/// x·log(x) with 0·log 0 = 0; input must be non-negative.
template <typename T> Var xlogx(Graph<T>& g, Var x);
template <typename T> Var reciprocal(Graph<T>& g, Var x);
template <typename T> Var scale(Graph<T>& g, Var x, T s);
template <typename T> Var add_scalar(Graph<T>& g, Var x, T s);

// Elementwise binary; shapes must be equal.
template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var sub(Graph<T>& g, Var a, Var b);
template <typename T> Var mul(Graph<T>& g, Var a, Var b);

// Reductions.
/// Sum of all elements, rank-0 result.
template <typename T> Var sum(Graph<T>& g, Var x);
template <typename T> Var mean(Graph<T>& g, Var x);
/// Sum along one axis, which is removed from the shape.
template <typename T> Var sum_axis(Graph<T>& g, Var x, std::size_t axis);

// Shape manipulation.
template <typename T> Var reshape(Graph<T>& g, Var x, Shape shape);
/// [B,M,K] -> [B,K,M].
template <typename T> Var transpose_last2(Graph<T>& g, Var x);
/// Rows of x (along axis 0) in the given order; indices may repeat.
template <typename T> Var select_rows(Graph<T>& g, Var x, std::span<const std::size_t> rows);
/// [M,C] with per-row column index -> [M].
template <typename T> Var gather_cols(Graph<T>& g, Var x, std::span<const std::size_t> cols);
/// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W].
template <typename T> Var concat_channels(Graph<T>& g, Var a, Var b);
/// [N,C] -> [N,C,H,W] by repetition over sites.
template <typename T> Var expand_spatial(Graph<T>& g, Var v, std::size_t h, std::size_t w);

// Broadcasting products.
/// x:[N,...], s:[N]; scales slice n by s[n].
template <typename T> Var mul_rows(Graph<T>& g, Var x, Var s);
/// F:[N,C,H,W], alpha:[N,H*W] -> [N,C] with out[n,c] = sum_j alpha[n,j] F[n,c,j].
template <typename T> Var weighted_spatial_sum(Graph<T>& g, Var features, Var alpha);

// Linear algebra.
/// a:[M,K], b:[K,N] (or [N,K] with transpose_b) -> [M,N].
template <typename T> Var matmul(Graph<T>& g, Var a, Var b, bool transpose_b = false);
/// x:[N,D], w:[D,C], b:[C] -> [N,C].
template <typename T> Var linear(Graph<T>& g, Var x, Var w, Var b);
/// Row-wise x / ||x||_2 for x:[N,D]. Zero rows throw std::domain_error.
template <typename T> Var l2_normalize_rows(Graph<T>& g, Var x);

// Softmax family over a designated axis.
template <typename T> Var log_softmax(Graph<T>& g, Var x, std::size_t axis);
template <typename T> Var softmax(Graph<T>& g, Var x, std::size_t axis);

// Convolutional layers.
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
/// x:[N,C,H,W], w:[O,C,k,k], bias:[O] (may be an invalid Var for none).
template <typename T> Var conv2d(Graph<T>& g, Var x, Var w, Var bias, Conv2dOptions opt = {});

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// x:[N,C,H,W], gamma/beta:[C]. Training mode normalizes with batch
/// statistics and updates the running ones; eval mode uses the running ones.
template <typename T>
Var batch_norm2d(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state, bool training);

/// Non-overlapping window max. Trailing rows/columns that do not fill a
/// window are dropped (floor mode).
template <typename T> Var max_pool2d(Graph<T>& g, Var x, std::size_t window = 2);
/// [N,C,H,W] -> [N,C].
template <typename T> Var global_avg_pool(Graph<T>& g, Var x);

}  // namespace dcap::nk
