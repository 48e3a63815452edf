#pragma once

#include <vector>

#include "raregen/tensor.hpp"

namespace raregen::numerics {

// Bias-corrected Adam moments for a fixed set of parameter tensors. One state
// is owned by exactly one optimization run.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step_count = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static AdamState for_shapes(const std::vector<Tensor>& params, double beta1 = 0.9,
                              double beta2 = 0.999, double epsilon = 1e-8);
};

// One Adam update over all parameter tensors in place. Shapes of params,
// grads and moments must agree.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr);

struct StepLrSchedule {
  double base_lr = 1e-2;
  long step_size = 1;
  double gamma = 1.0;
};

// lr(epoch) = base_lr * gamma^floor(epoch / step_size)
double steplr(const StepLrSchedule& schedule, long epoch);

}  // namespace raregen::numerics
