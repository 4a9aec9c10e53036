#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dcap/tensor.hpp"

namespace dcap::nk {

/// Handle to a node in a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

/// Reverse-mode tape. Nodes are appended in creation order, so every input
/// id precedes its consumer and reverse iteration is a valid topological
/// order for backward.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Input that never receives a gradient.
  Var constant(Tensor<T> value);
  /// Free leaf; its gradient is readable through grad() after backward.
  Var leaf(Tensor<T> value, bool requires_grad = true);
  /// Leaf bound to a parameter. Binding the same parameter twice returns
  /// the same node. backward() accumulates into param.grad.
  Var param(Parameter<T>& p);

  /// Appends an operation record. The backward closure is dropped when no
  /// input requires a gradient.
  Var record(std::string_view kind, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);

  /// References stay valid while the graph grows.
  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::string_view kind(Var v) const { return nodes_[v.id].kind; }
  const std::vector<Var>& inputs(Var v) const { return nodes_[v.id].inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of v, allocated as zeros on first use.
  Tensor<T>& grad_buffer(Var v);

  /// Populates gradients for every requires_grad node reachable from loss.
  /// Parameters bound to this graph but unreachable end with a zero grad.
  void backward(Var loss);

  /// Folds a piecewise-linear branch decision (relu mask, pool argmax)
  /// into a running signature. Two forwards with equal signatures took the
  /// same linear piece everywhere.
  void mix_signature(std::uint64_t h) noexcept;
  std::uint64_t activation_signature() const noexcept { return signature_; }
  void set_track_signature(bool on) noexcept { track_signature_ = on; }
  bool tracks_signature() const noexcept { return track_signature_; }

  /// When set, every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    std::string_view kind;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable references across appends
  std::unordered_map<const Parameter<T>*, Var> bound_;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
  bool check_finite_ = false;
  bool track_signature_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace dcap::nk
