#include "tagcot/optim.hpp"

#include <cmath>

namespace tagcot {

AdamW::AdamW(std::vector<Tensor*> params, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(params_[i]->size(), 0.0);
    slots_[i].v.assign(params_[i]->size(), 0.0);
  }
}

void AdamW::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = *params_[p];
    t.ensure_grad();
    auto& slot = slots_[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad[i];
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      t.values[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * t.values[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor* t : params_) t->zero_grad();
}

}  // namespace tagcot
