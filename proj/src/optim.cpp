#include "dcap/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dcap::nk {

template <typename T>
void Sgd<T>::add_group(std::vector<Parameter<T>*> params, double lr_scale) {
  if (!(opt_.lr > 0)) throw std::invalid_argument("sgd: learning rate must be positive");
  for (Parameter<T>* p : params) velocity_.emplace_back(p->value.shape());
  groups_.push_back(Group{std::move(params), lr_scale});
}

template <typename T>
void Sgd<T>::set_lr(double lr) {
  if (!(lr > 0)) throw std::invalid_argument("sgd: learning rate must be positive");
  opt_.lr = lr;
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (Group& grp : groups_)
    for (Parameter<T>* p : grp.params) p->zero_grad();
}

template <typename T>
void Sgd<T>::step() {
  std::size_t slot = 0;
  const T mu = static_cast<T>(opt_.momentum);
  const T wd = static_cast<T>(opt_.weight_decay);
  for (Group& grp : groups_) {
    const T lr = static_cast<T>(opt_.lr * grp.lr_scale);
    for (Parameter<T>* p : grp.params) {
      Tensor<T>& v = velocity_[slot++];
      if (!p->requires_grad) continue;
      if (p->grad.shape() != p->value.shape()) {
        if (!p->grad.empty()) {
          throw ShapeError("sgd_step", "gradient " + shape_str(p->grad.shape()) + " for parameter '" + p->name + "' " +
                                           shape_str(p->value.shape()));
        }
        p->zero_grad();
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const T g = p->grad[i] + wd * p->value[i];
        v[i] = mu * v[i] + g;
        const T stepv = opt_.nesterov ? g + mu * v[i] : v[i];
        p->value[i] -= lr * stepv;
      }
    }
  }
}

double multistep_lr(double base, const std::vector<std::size_t>& milestones, double decay, std::size_t step) {
  double lr = base;
  for (std::size_t m : milestones)
    if (step >= m) lr *= decay;
  return lr;
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace dcap::nk
