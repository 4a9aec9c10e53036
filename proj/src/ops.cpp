#include "dcap/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dcap::nk {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

void require(bool ok, std::string_view prim, const std::string& msg) {
  if (!ok) throw ShapeError(prim, msg);
}

void require_same(std::string_view prim, const Shape& a, const Shape& b) {
  require(a == b, prim, "operand shapes differ: " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(std::string_view prim, const Shape& s, std::size_t rank) {
  require(s.size() == rank, prim, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

std::uint64_t fnv_mix(std::uint64_t h, std::uint64_t v) {
  h ^= v;
  return h * 0x100000001b3ULL;
}

template <typename T, typename F, typename D>
Var unary(Graph<T>& g, std::string_view kind, Var x, F forward, D derivative) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  return g.record(kind, std::move(out), {x}, [x, derivative](Graph<T>& gr, Var self) {
    const Tensor<T>& xv = gr.value(x);
    const Tensor<T>& yv = gr.value(self);
    const Tensor<T>& dy = gr.grad(self);
    if (!gr.requires_grad(x)) return;
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace

template <typename T>
Var relu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  if (g.tracks_signature()) {
    std::uint64_t h = 0xcbf29ce484222325ULL, word = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      word = (word << 1) | (xv[i] > T{0} ? 1u : 0u);
      if ((i & 63) == 63) h = fnv_mix(h, word), word = 0;
    }
    g.mix_signature(fnv_mix(h, word));
  }
  Tensor<T> out(xv.shape());
  ArrMap<T>(out.data(), out.size()) = CArrMap<T>(xv.data(), xv.size()).max(T{0});
  return g.record("relu", std::move(out), {x}, [x](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& xv = gr.value(x);
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    const std::size_t m = dx.size();
    ArrMap<T>(dx.data(), m) += (CArrMap<T>(xv.data(), m) > T{0}).select(CArrMap<T>(dy.data(), m), T{0});
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  return unary(
      g, "sigmoid", x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var exp(Graph<T>& g, Var x) {
  return unary(
      g, "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var log(Graph<T>& g, Var x) {
  for (T v : g.value(x).values()) require(v > T{0}, "log", "input must be strictly positive");
  return unary(
      g, "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var xlogx(Graph<T>& g, Var x) {
  for (T v : g.value(x).values()) require(v >= T{0}, "xlogx", "input must be non-negative");
  return unary(
      g, "xlogx", x, [](T v) { return v > T{0} ? v * std::log(v) : T{0}; },
      [](T v, T) { return v > T{0} ? std::log(v) + T{1} : T{0}; });
}

template <typename T>
Var reciprocal(Graph<T>& g, Var x) {
  return unary(
      g, "reciprocal", x, [](T v) { return T{1} / v; }, [](T v, T) { return -T{1} / (v * v); });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T s) {
  return unary(
      g, "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var add_scalar(Graph<T>& g, Var x, T s) {
  return unary(
      g, "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  require_same("add", g.value(a).shape(), g.value(b).shape());
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record("add", std::move(out), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    for (Var in : {a, b}) {
      if (!gr.requires_grad(in)) continue;
      Tensor<T>& d = gr.grad_buffer(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  require_same("sub", g.value(a).shape(), g.value(b).shape());
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.record("sub", std::move(out), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    if (gr.requires_grad(a)) {
      Tensor<T>& d = gr.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& d = gr.grad_buffer(b);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= dy[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  require_same("mul", g.value(a).shape(), g.value(b).shape());
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    const Tensor<T>& av = gr.value(a);
    const Tensor<T>& bv = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor<T>& d = gr.grad_buffer(a);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * bv[i];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& d = gr.grad_buffer(b);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  T total{0};
  for (T v : g.value(x).values()) total += v;
  return g.record("sum", Tensor<T>(Shape{}, total), {x}, [x](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const T dy = gr.grad(self)[0];
    for (T& d : gr.grad_buffer(x).values()) d += dy;
  });
}

template <typename T>
Var mean(Graph<T>& g, Var x) {
  const std::size_t n = g.value(x).size();
  require(n > 0, "mean", "empty input");
  return scale(g, sum(g, x), T{1} / static_cast<T>(n));
}

template <typename T>
Var sum_axis(Graph<T>& g, Var x, std::size_t axis) {
  const Shape& s = g.value(x).shape();
  require(axis < s.size(), "sum_axis", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(os);
  const Tensor<T>& xv = g.value(x);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
  return g.record("sum_axis", std::move(out), {x}, [x, outer, n, inner](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) dx[(o * n + k) * inner + i] += dy[o * inner + i];
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  const Shape& s = g.value(x).shape();
  require(numel(s) == numel(shape), "reshape", shape_str(s) + " -> " + shape_str(shape));
  return g.record("reshape", g.value(x).reshaped(std::move(shape)), {x}, [x](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var transpose_last2(Graph<T>& g, Var x) {
  const Shape& s = g.value(x).shape();
  require_rank("transpose_last2", s, 3);
  const std::size_t b = s[0], m = s[1], k = s[2];
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(Shape{b, k, m});
  for (std::size_t p = 0; p < b; ++p)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) out[(p * k + j) * m + i] = xv[(p * m + i) * k + j];
  return g.record("transpose_last2", std::move(out), {x}, [x, b, m, k](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t p = 0; p < b; ++p)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) dx[(p * m + i) * k + j] += dy[(p * k + j) * m + i];
  });
}

template <typename T>
Var select_rows(Graph<T>& g, Var x, std::span<const std::size_t> rows) {
  const Shape& s = g.value(x).shape();
  require(!s.empty(), "select_rows", "input must have rank >= 1");
  const std::size_t row = numel(s) / s[0];
  for (std::size_t r : rows) require(r < s[0], "select_rows", "row " + std::to_string(r) + " out of range for " + shape_str(s));
  Shape os = s;
  os[0] = rows.size();
  Tensor<T> out(os);
  const Tensor<T>& xv = g.value(x);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.data() + rows[i] * row, row, out.data() + i * row);
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return g.record("select_rows", std::move(out), {x}, [x, row, saved](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::size_t k = 0; k < row; ++k) dx[saved[i] * row + k] += dy[i * row + k];
  });
}

template <typename T>
Var gather_cols(Graph<T>& g, Var x, std::span<const std::size_t> cols) {
  const Shape& s = g.value(x).shape();
  require_rank("gather_cols", s, 2);
  require(cols.size() == s[0], "gather_cols", "need one index per row of " + shape_str(s));
  const std::size_t c = s[1];
  for (std::size_t k : cols) require(k < c, "gather_cols", "column " + std::to_string(k) + " out of range");
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(Shape{s[0]});
  for (std::size_t i = 0; i < s[0]; ++i) out[i] = xv[i * c + cols[i]];
  std::vector<std::size_t> saved(cols.begin(), cols.end());
  return g.record("gather_cols", std::move(out), {x}, [x, c, saved](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < saved.size(); ++i) dx[i * c + saved[i]] += dy[i];
  });
}

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
  const Shape& sa = g.value(a).shape();
  const Shape& sb = g.value(b).shape();
  require_rank("concat_channels", sa, 4);
  require_rank("concat_channels", sb, 4);
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat_channels",
          "batch/spatial extents differ: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> out(Shape{n, ca + cb, sa[2], sa[3]});
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(bv.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return g.record("concat_channels", std::move(out), {a, b}, [a, b, n, ca, cb, hw](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    if (gr.requires_grad(a)) {
      Tensor<T>& d = gr.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < ca * hw; ++k) d[i * ca * hw + k] += dy[i * (ca + cb) * hw + k];
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& d = gr.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < cb * hw; ++k) d[i * cb * hw + k] += dy[(i * (ca + cb) + ca) * hw + k];
    }
  });
}

template <typename T>
Var expand_spatial(Graph<T>& g, Var v, std::size_t h, std::size_t w) {
  const Shape& s = g.value(v).shape();
  require_rank("expand_spatial", s, 2);
  const std::size_t n = s[0], c = s[1], r = h * w;
  const Tensor<T>& vv = g.value(v);
  Tensor<T> out(Shape{n, c, h, w});
  for (std::size_t i = 0; i < n * c; ++i) std::fill_n(out.data() + i * r, r, vv[i]);
  return g.record("expand_spatial", std::move(out), {v}, [v, n, c, r](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(v)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dv = gr.grad_buffer(v);
    for (std::size_t i = 0; i < n * c; ++i) {
      T acc{0};
      for (std::size_t j = 0; j < r; ++j) acc += dy[i * r + j];
      dv[i] += acc;
    }
  });
}

template <typename T>
Var mul_rows(Graph<T>& g, Var x, Var s) {
  const Shape& xs = g.value(x).shape();
  const Shape& ss = g.value(s).shape();
  require(!xs.empty() && ss == Shape{xs[0]}, "mul_rows", "scale " + shape_str(ss) + " does not match rows of " + shape_str(xs));
  const std::size_t n = xs[0], row = numel(xs) / std::max<std::size_t>(n, 1);
  Tensor<T> out = g.value(x);
  const Tensor<T>& sv = g.value(s);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < row; ++k) out[i * row + k] *= sv[i];
  return g.record("mul_rows", std::move(out), {x, s}, [x, s, n, row](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    const Tensor<T>& xv = gr.value(x);
    const Tensor<T>& sv = gr.value(s);
    if (gr.requires_grad(x)) {
      Tensor<T>& d = gr.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < row; ++k) d[i * row + k] += dy[i * row + k] * sv[i];
    }
    if (gr.requires_grad(s)) {
      Tensor<T>& d = gr.grad_buffer(s);
      for (std::size_t i = 0; i < n; ++i) {
        T acc{0};
        for (std::size_t k = 0; k < row; ++k) acc += dy[i * row + k] * xv[i * row + k];
        d[i] += acc;
      }
    }
  });
}

template <typename T>
Var weighted_spatial_sum(Graph<T>& g, Var features, Var alpha) {
  const Shape& fs = g.value(features).shape();
  const Shape& as = g.value(alpha).shape();
  require_rank("weighted_spatial_sum", fs, 4);
  const std::size_t n = fs[0], c = fs[1], r = fs[2] * fs[3];
  require(as == Shape{n, r}, "weighted_spatial_sum", "weights " + shape_str(as) + " do not match map " + shape_str(fs));
  const Tensor<T>& fv = g.value(features);
  const Tensor<T>& av = g.value(alpha);
  Tensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc{0};
      const T* f = fv.data() + (i * c + ch) * r;
      const T* a = av.data() + i * r;
      for (std::size_t j = 0; j < r; ++j) acc += f[j] * a[j];
      out[i * c + ch] = acc;
    }
  return g.record("weighted_spatial_sum", std::move(out), {features, alpha},
                  [features, alpha, n, c, r](Graph<T>& gr, Var self) {
                    const Tensor<T>& dy = gr.grad(self);
                    const Tensor<T>& fv = gr.value(features);
                    const Tensor<T>& av = gr.value(alpha);
                    if (gr.requires_grad(features)) {
                      Tensor<T>& d = gr.grad_buffer(features);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t j = 0; j < r; ++j) d[(i * c + ch) * r + j] += dy[i * c + ch] * av[i * r + j];
                    }
                    if (gr.requires_grad(alpha)) {
                      Tensor<T>& d = gr.grad_buffer(alpha);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t j = 0; j < r; ++j) d[i * r + j] += dy[i * c + ch] * fv[(i * c + ch) * r + j];
                    }
                  });
}

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool transpose_b) {
  const Shape& sa = g.value(a).shape();
  const Shape& sb = g.value(b).shape();
  require_rank("matmul", sa, 2);
  require_rank("matmul", sb, 2);
  const std::size_t m = sa[0], k = sa[1];
  const std::size_t kb = transpose_b ? sb[1] : sb[0];
  const std::size_t n = transpose_b ? sb[0] : sb[1];
  require(k == kb, "matmul", "inner extents differ: " + shape_str(sa) + (transpose_b ? " x T" : " x ") + shape_str(sb));
  Tensor<T> out(Shape{m, n});
  CMatMap<T> A(g.value(a).data(), m, k);
  CMatMap<T> B(g.value(b).data(), sb[0], sb[1]);
  MatMap<T> C(out.data(), m, n);
  if (transpose_b) C.noalias() = A * B.transpose();
  else C.noalias() = A * B;
  return g.record("matmul", std::move(out), {a, b}, [a, b, m, k, n, transpose_b](Graph<T>& gr, Var self) {
    CMatMap<T> dC(gr.grad(self).data(), m, n);
    const Shape& sb = gr.value(b).shape();
    CMatMap<T> A(gr.value(a).data(), m, k);
    CMatMap<T> B(gr.value(b).data(), sb[0], sb[1]);
    if (gr.requires_grad(a)) {
      MatMap<T> dA(gr.grad_buffer(a).data(), m, k);
      if (transpose_b) dA.noalias() += dC * B;
      else dA.noalias() += dC * B.transpose();
    }
    if (gr.requires_grad(b)) {
      MatMap<T> dB(gr.grad_buffer(b).data(), sb[0], sb[1]);
      if (transpose_b) dB.noalias() += dC.transpose() * A;
      else dB.noalias() += A.transpose() * dC;
    }
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Shape& sx = g.value(x).shape();
  const Shape& sw = g.value(w).shape();
  const Shape& sbias = g.value(b).shape();
  require_rank("linear", sx, 2);
  require_rank("linear", sw, 2);
  require(sx[1] == sw[0], "linear", "input " + shape_str(sx) + " does not match weight " + shape_str(sw));
  require(sbias == Shape{sw[1]}, "linear", "bias " + shape_str(sbias) + " does not match weight " + shape_str(sw));
  const std::size_t n = sx[0], d = sx[1], c = sw[1];
  Tensor<T> out(Shape{n, c});
  MatMap<T> Y(out.data(), n, c);
  Y.noalias() = CMatMap<T>(g.value(x).data(), n, d) * CMatMap<T>(g.value(w).data(), d, c);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  return g.record("linear", std::move(out), {x, w, b}, [x, w, b, n, d, c](Graph<T>& gr, Var self) {
    CMatMap<T> dY(gr.grad(self).data(), n, c);
    if (gr.requires_grad(x)) {
      MatMap<T> dX(gr.grad_buffer(x).data(), n, d);
      dX.noalias() += dY * CMatMap<T>(gr.value(w).data(), d, c).transpose();
    }
    if (gr.requires_grad(w)) {
      MatMap<T> dW(gr.grad_buffer(w).data(), d, c);
      dW.noalias() += CMatMap<T>(gr.value(x).data(), n, d).transpose() * dY;
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& db = gr.grad_buffer(b);
      const Tensor<T>& dy = gr.grad(self);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
    }
  });
}

template <typename T>
Var l2_normalize_rows(Graph<T>& g, Var x) {
  const Shape& s = g.value(x).shape();
  require_rank("l2_normalize_rows", s, 2);
  const std::size_t n = s[0], d = s[1];
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(s);
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T sq{0};
    for (std::size_t k = 0; k < d; ++k) sq += xv[i * d + k] * xv[i * d + k];
    norms[i] = std::sqrt(sq);
    if (!(norms[i] > T{0})) throw std::domain_error("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = xv[i * d + k] / norms[i];
  }
  return g.record("l2_normalize_rows", std::move(out), {x}, [x, n, d, norms](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& y = gr.value(self);
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t k = 0; k < d; ++k) dot += y[i * d + k] * dy[i * d + k];
      for (std::size_t k = 0; k < d; ++k) dx[i * d + k] += (dy[i * d + k] - y[i * d + k] * dot) / norms[i];
    }
  });
}

template <typename T>
Var log_softmax(Graph<T>& g, Var x, std::size_t axis) {
  const Shape& s = g.value(x).shape();
  require(axis < s.size(), "log_softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      auto at = [&](std::size_t k) { return (o * n + k) * inner + i; };
      T mx = xv[at(0)];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[at(k)]);
      T acc{0};
      for (std::size_t k = 0; k < n; ++k) acc += std::exp(xv[at(k)] - mx);
      const T lse = mx + std::log(acc);
      for (std::size_t k = 0; k < n; ++k) out[at(k)] = xv[at(k)] - lse;
    }
  return g.record("log_softmax", std::move(out), {x}, [x, outer, n, inner](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& y = gr.value(self);
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        T total{0};
        for (std::size_t k = 0; k < n; ++k) total += dy[(o * n + k) * inner + i];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = (o * n + k) * inner + i;
          dx[idx] += dy[idx] - std::exp(y[idx]) * total;
        }
      }
  });
}

template <typename T>
Var softmax(Graph<T>& g, Var x, std::size_t axis) {
  return exp(g, log_softmax(g, x, axis));
}

namespace {

template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t oh, std::size_t ow, T* col) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ch * k + ki) * k + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, ow, T{0});
            continue;
          }
          const T* src = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                std::size_t pad, std::size_t oh, std::size_t ow, T* img) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ch * k + ki) * k + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var bias, Conv2dOptions opt) {
  const Shape& sx = g.value(x).shape();
  const Shape& sw = g.value(w).shape();
  require_rank("conv2d", sx, 4);
  require_rank("conv2d", sw, 4);
  require(sw[2] == sw[3], "conv2d", "kernel must be square, got " + shape_str(sw));
  require(sx[1] == sw[1], "conv2d", "input channels " + std::to_string(sx[1]) + " do not match kernel " + shape_str(sw));
  require(opt.stride > 0, "conv2d", "stride must be positive");
  const std::size_t n = sx[0], c = sx[1], h = sx[2], wd = sx[3];
  const std::size_t o = sw[0], k = sw[2], s = opt.stride, p = opt.pad;
  require(h + 2 * p >= k && wd + 2 * p >= k, "conv2d", "kernel " + shape_str(sw) + " larger than padded input " + shape_str(sx));
  const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (wd + 2 * p - k) / s + 1;
  const bool has_bias = bias.valid();
  if (has_bias) require(g.value(bias).shape() == Shape{o}, "conv2d", "bias " + shape_str(g.value(bias).shape()) + " for " + std::to_string(o) + " outputs");
  const bool direct = (k == 1 && s == 1 && p == 0);
  const std::size_t ckk = c * k * k, ohw = oh * ow;

  Tensor<T> out(Shape{n, o, oh, ow});
  CMatMap<T> W(g.value(w).data(), o, ckk);
  std::vector<T> col(direct ? 0 : ckk * ohw);
  const Tensor<T>& xv = g.value(x);
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = xv.data() + i * c * h * wd;
    const T* cp = img;
    if (!direct) {
      im2col(img, c, h, wd, k, s, p, oh, ow, col.data());
      cp = col.data();
    }
    MatMap<T> Y(out.data() + i * o * ohw, o, ohw);
    Y.noalias() = W * CMatMap<T>(cp, ckk, ohw);
    if (has_bias) {
      const Tensor<T>& bv = g.value(bias);
      for (std::size_t oc = 0; oc < o; ++oc) Y.row(oc).array() += bv[oc];
    }
  }

  auto back = [=](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.grad(self);
    const Tensor<T>& xv = gr.value(x);
    CMatMap<T> W(gr.value(w).data(), o, ckk);
    const bool need_x = gr.requires_grad(x), need_w = gr.requires_grad(w);
    std::vector<T> col(direct ? 0 : ckk * ohw), dcol(direct || !need_x ? 0 : ckk * ohw);
    for (std::size_t i = 0; i < n; ++i) {
      CMatMap<T> dY(dy.data() + i * o * ohw, o, ohw);
      if (need_w) {
        const T* img = xv.data() + i * c * h * wd;
        const T* cp = img;
        if (!direct) {
          im2col(img, c, h, wd, k, s, p, oh, ow, col.data());
          cp = col.data();
        }
        MatMap<T> dW(gr.grad_buffer(w).data(), o, ckk);
        dW.noalias() += dY * CMatMap<T>(cp, ckk, ohw).transpose();
      }
      if (need_x) {
        T* dimg = gr.grad_buffer(x).data() + i * c * h * wd;
        if (direct) {
          MatMap<T>(dimg, ckk, ohw).noalias() += W.transpose() * dY;
        } else {
          MatMap<T>(dcol.data(), ckk, ohw).noalias() = W.transpose() * dY;
          col2im_add(dcol.data(), c, h, wd, k, s, p, oh, ow, dimg);
        }
      }
    }
    if (has_bias && gr.requires_grad(bias)) {
      Tensor<T>& db = gr.grad_buffer(bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t oc = 0; oc < o; ++oc) {
          const T* row = dy.data() + (i * o + oc) * ohw;
          T acc{0};
          for (std::size_t j = 0; j < ohw; ++j) acc += row[j];
          db[oc] += acc;
        }
    }
  };
  if (has_bias) return g.record("conv2d", std::move(out), {x, w, bias}, back);
  return g.record("conv2d", std::move(out), {x, w}, back);
}

template <typename T>
Var batch_norm2d(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state, bool training) {
  const Shape& sx = g.value(x).shape();
  require_rank("batch_norm2d", sx, 4);
  const std::size_t n = sx[0], c = sx[1], hw = sx[2] * sx[3], m = n * hw;
  require(g.value(gamma).shape() == Shape{c} && g.value(beta).shape() == Shape{c}, "batch_norm2d",
          "affine parameters must have shape [" + std::to_string(c) + "]");
  require(state.running_mean.shape() == Shape{c} && state.running_var.shape() == Shape{c}, "batch_norm2d",
          "running statistics must have shape [" + std::to_string(c) + "]");
  if (training) require(m > 1, "batch_norm2d", "training mode needs more than one value per channel");

  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& gv = g.value(gamma);
  const Tensor<T>& bv = g.value(beta);
  auto seg = [hw, c](const T* base, std::size_t i, std::size_t ch) { return CArrMap<T>(base + (i * c + ch) * hw, hw); };
  std::vector<T> mu(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      T acc{0};
      for (std::size_t i = 0; i < n; ++i) acc += seg(xv.data(), i, ch).sum();
      const T mean = acc / static_cast<T>(m);
      T var{0};
      for (std::size_t i = 0; i < n; ++i) var += (seg(xv.data(), i, ch) - mean).square().sum();
      const T biased = var / static_cast<T>(m);
      mu[ch] = mean;
      invstd[ch] = T{1} / std::sqrt(biased + state.eps);
      state.running_mean[ch] = (T{1} - state.momentum) * state.running_mean[ch] + state.momentum * mean;
      state.running_var[ch] = (T{1} - state.momentum) * state.running_var[ch] + state.momentum * (var / static_cast<T>(m - 1));
    } else {
      mu[ch] = state.running_mean[ch];
      invstd[ch] = T{1} / std::sqrt(state.running_var[ch] + state.eps);
    }
  }
  Tensor<T> out(sx);
  Tensor<T> xhat(sx);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      ArrMap<T> xh(xhat.data() + off, hw);
      xh = (seg(xv.data(), i, ch) - mu[ch]) * invstd[ch];
      ArrMap<T>(out.data() + off, hw) = xh * gv[ch] + bv[ch];
    }
  return g.record(
      "batch_norm2d", std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, hw, m, training, invstd, xhat = std::move(xhat)](Graph<T>& gr, Var self) {
        const Tensor<T>& dy = gr.grad(self);
        const Tensor<T>& gv = gr.value(gamma);
        std::vector<T> sum_dy(c, T{0}), sum_dy_xhat(c, T{0});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * hw;
            CArrMap<T> d(dy.data() + off, hw);
            sum_dy[ch] += d.sum();
            sum_dy_xhat[ch] += (d * CArrMap<T>(xhat.data() + off, hw)).sum();
          }
        if (gr.requires_grad(gamma)) {
          Tensor<T>& d = gr.grad_buffer(gamma);
          for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_dy_xhat[ch];
        }
        if (gr.requires_grad(beta)) {
          Tensor<T>& d = gr.grad_buffer(beta);
          for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_dy[ch];
        }
        if (!gr.requires_grad(x)) return;
        Tensor<T>& dx = gr.grad_buffer(x);
        const T inv_m = T{1} / static_cast<T>(m);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * hw;
            const T k = gv[ch] * invstd[ch];
            ArrMap<T> dxs(dx.data() + off, hw);
            CArrMap<T> d(dy.data() + off, hw);
            if (training) {
              dxs += k * (d - inv_m * sum_dy[ch] - CArrMap<T>(xhat.data() + off, hw) * (inv_m * sum_dy_xhat[ch]));
            } else {
              dxs += k * d;
            }
          }
      });
}

template <typename T>
Var max_pool2d(Graph<T>& g, Var x, std::size_t window) {
  const Shape& sx = g.value(x).shape();
  require_rank("max_pool2d", sx, 4);
  require(window > 0 && sx[2] >= window && sx[3] >= window, "max_pool2d",
          "spatial extents of " + shape_str(sx) + " smaller than window " + std::to_string(window));
  const std::size_t n = sx[0], c = sx[1], h = sx[2], w = sx[3], oh = h / window, ow = w / window;
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(Shape{n, c, oh, ow});
  std::vector<std::uint32_t> arg(out.size());
  const T* xp = xv.data();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t row0 = plane * h * w + oy * window * w;
      const std::size_t o0 = (plane * oh + oy) * ow;
      if (window == 2) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          // scan order (0,0) (0,1) (1,0) (1,1); strict > keeps the first maximum
          std::size_t best = row0 + 2 * ox;
          if (xp[best + 1] > xp[best]) best = best + 1;
          if (xp[row0 + w + 2 * ox] > xp[best]) best = row0 + w + 2 * ox;
          if (xp[row0 + w + 2 * ox + 1] > xp[best]) best = row0 + w + 2 * ox + 1;
          out[o0 + ox] = xp[best];
          arg[o0 + ox] = static_cast<std::uint32_t>(best);
        }
        continue;
      }
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = row0 + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = row0 + dy * w + ox * window + dx;
            if (xp[idx] > xp[best]) best = idx;
          }
        out[o0 + ox] = xp[best];
        arg[o0 + ox] = static_cast<std::uint32_t>(best);
      }
    }
  if (g.tracks_signature()) {
    std::uint64_t sig = 0xcbf29ce484222325ULL;
    for (std::uint32_t a : arg) sig = fnv_mix(sig, a);
    g.mix_signature(sig);
  }
  return g.record("max_pool2d", std::move(out), {x}, [x, arg = std::move(arg)](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += dy[o];
  });
}

template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Shape& sx = g.value(x).shape();
  require_rank("global_avg_pool", sx, 4);
  const std::size_t n = sx[0], c = sx[1], r = sx[2] * sx[3];
  require(r > 0, "global_avg_pool", "empty spatial extent");
  const Tensor<T>& xv = g.value(x);
  Tensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) out[i] = CArrMap<T>(xv.data() + i * r, r).sum() / static_cast<T>(r);
  return g.record("global_avg_pool", std::move(out), {x}, [x, n, c, r](Graph<T>& gr, Var self) {
    if (!gr.requires_grad(x)) return;
    const Tensor<T>& dy = gr.grad(self);
    Tensor<T>& dx = gr.grad_buffer(x);
    const T inv = T{1} / static_cast<T>(r);
    for (std::size_t i = 0; i < n * c; ++i) ArrMap<T>(dx.data() + i * r, r) += dy[i] * inv;
  });
}

#define DCAP_INSTANTIATE_OPS(T)                                                                      \
  template Var relu<T>(Graph<T>&, Var);                                                             \
  template Var sigmoid<T>(Graph<T>&, Var);                                                          \
  template Var exp<T>(Graph<T>&, Var);                                                              \
  template Var log<T>(Graph<T>&, Var);                                                              \
  template Var xlogx<T>(Graph<T>&, Var);                                                            \
  template Var reciprocal<T>(Graph<T>&, Var);                                                       \
  template Var scale<T>(Graph<T>&, Var, T);                                                         \
  template Var add_scalar<T>(Graph<T>&, Var, T);                                                    \
  template Var add<T>(Graph<T>&, Var, Var);                                                         \
  template Var sub<T>(Graph<T>&, Var, Var);                                                         \
  template Var mul<T>(Graph<T>&, Var, Var);                                                         \
  template Var sum<T>(Graph<T>&, Var);                                                              \
  template Var mean<T>(Graph<T>&, Var);                                                             \
  template Var sum_axis<T>(Graph<T>&, Var, std::size_t);                                            \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                                   \
  template Var transpose_last2<T>(Graph<T>&, Var);                                                  \
  template Var select_rows<T>(Graph<T>&, Var, std::span<const std::size_t>);                        \
  template Var gather_cols<T>(Graph<T>&, Var, std::span<const std::size_t>);                        \
  template Var concat_channels<T>(Graph<T>&, Var, Var);                                             \
  template Var expand_spatial<T>(Graph<T>&, Var, std::size_t, std::size_t);                         \
  template Var mul_rows<T>(Graph<T>&, Var, Var);                                                    \
  template Var weighted_spatial_sum<T>(Graph<T>&, Var, Var);                                        \
  template Var matmul<T>(Graph<T>&, Var, Var, bool);                                                \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                                 \
  template Var l2_normalize_rows<T>(Graph<T>&, Var);                                                \
  template Var log_softmax<T>(Graph<T>&, Var, std::size_t);                                         \
  template Var softmax<T>(Graph<T>&, Var, std::size_t);                                             \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, Conv2dOptions);                                  \
  template Var batch_norm2d<T>(Graph<T>&, Var, Var, Var, BatchNormState<T>&, bool);                 \
  template Var max_pool2d<T>(Graph<T>&, Var, std::size_t);                                          \
  template Var global_avg_pool<T>(Graph<T>&, Var);

DCAP_INSTANTIATE_OPS(float)
DCAP_INSTANTIATE_OPS(double)

}  // namespace dcap::nk
