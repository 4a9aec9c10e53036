#include "dcap/graph.hpp"

#include <string>

namespace dcap::nk {

template <typename T>
Var Graph<T>::push(Node node) {
  if (check_finite_ && !node.value.all_finite()) {
    throw NonFiniteError("non-finite value produced by '" + std::string(node.kind) + "'");
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.kind = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.kind = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::param(Parameter<T>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  Node n;
  n.kind = "param";
  n.value = p.value;
  n.requires_grad = p.requires_grad;
  n.param = &p;
  Var v = push(std::move(n));
  bound_.emplace(&p, v);
  return v;
}

template <typename T>
Var Graph<T>::record(std::string_view kind, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs.assign(inputs.begin(), inputs.end());
  for (Var in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward", "loss must be scalar, got " + shape_str(nodes_[loss.id].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>();
  grad_buffer(loss)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, Var{static_cast<std::uint32_t>(i)});
  }
  for (Node& n : nodes_) {
    if (!n.param || !n.param->requires_grad) continue;
    Parameter<T>& p = *n.param;
    if (p.grad.shape() != p.value.shape() || p.grad.size() != p.value.size()) p.grad = Tensor<T>(p.value.shape());
    if (n.grad.empty()) continue;
    for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
  }
}

template <typename T>
void Graph<T>::mix_signature(std::uint64_t h) noexcept {
  signature_ ^= h + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
}

template class Graph<float>;
template class Graph<double>;

}  // namespace dcap::nk
