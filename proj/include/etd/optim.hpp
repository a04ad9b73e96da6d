#pragma once

#include <cstdint>
#include <vector>

#include "etd/tensor.hpp"

namespace etd {

// Adam with bias correction, no weight decay. step() consumes and zeroes
// the parameter gradients; parameters with no gradient are left untouched.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-6);

  void step(double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Linear warmup to the peak over ceil(warmup_frac * total) steps, then linear
// decay toward zero. `step` counts from 0 at the start of training.
double lr_at(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr);

}  // namespace etd
