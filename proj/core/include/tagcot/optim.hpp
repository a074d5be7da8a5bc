#pragma once

#include <vector>

#include "tagcot/tensor.hpp"

namespace tagcot {

// Decoupled-weight-decay Adam over a fixed parameter list. Deterministic:
// update order follows the registration order. lr = 0 leaves every
// parameter bitwise unchanged.
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor*> params, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Tensor*> params_;
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  long step_count_ = 0;
};

}  // namespace tagcot
