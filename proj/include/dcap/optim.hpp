#pragma once

#include <cstddef>
#include <vector>

#include "dcap/tensor.hpp"

namespace dcap::nk {

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 0.0005;
};

/// SGD with (Nesterov) momentum. Weight decay is added to the gradient as
/// weight_decay * w before the velocity update:
///   g' = g + wd*w;  v = mu*v + g';  step = nesterov ? g' + mu*v : v;  w -= lr*step
template <typename T>
class Sgd {
 public:
  struct Group {
    std::vector<Parameter<T>*> params;
    double lr_scale = 1.0;
  };

  explicit Sgd(SgdOptions opt) : opt_(opt) {}

  /// Parameters in one group share lr * lr_scale.
  void add_group(std::vector<Parameter<T>*> params, double lr_scale = 1.0);

  void set_lr(double lr);
  double lr() const noexcept { return opt_.lr; }
  const SgdOptions& options() const noexcept { return opt_; }

  void zero_grad();
  void step();

  /// Velocity buffer for the i-th registered parameter (group order).
  const Tensor<T>& velocity(std::size_t i) const { return velocity_.at(i); }

 private:
  SgdOptions opt_;
  std::vector<Group> groups_;
  std::vector<Tensor<T>> velocity_;
};

/// Step decay: base * decay^(number of milestones <= step).
double multistep_lr(double base, const std::vector<std::size_t>& milestones, double decay, std::size_t step);

extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace dcap::nk
