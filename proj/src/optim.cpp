#include "raregen/optim.hpp"

#include <cmath>

#include "raregen/errors.hpp"

namespace raregen::numerics {

AdamState AdamState::for_shapes(const std::vector<Tensor>& params, double beta1, double beta2,
                                double epsilon) {
  AdamState state;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.epsilon = epsilon;
  state.first_moment.reserve(params.size());
  state.second_moment.reserve(params.size());
  for (const Tensor& p : params) {
    state.first_moment.push_back(Tensor::zeros(p.shape()));
    state.second_moment.push_back(Tensor::zeros(p.shape()));
  }
  return state;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr) {
  if (lr <= 0.0) throw ContractViolation("adam_step: lr must be positive");
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ContractViolation("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].same_shape(grads[k]) || !params[k].same_shape(state.first_moment[k])) {
      throw ContractViolation("adam_step: shape mismatch at tensor " + std::to_string(k));
    }
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    const Tensor& g = grads[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

double steplr(const StepLrSchedule& schedule, long epoch) {
  if (epoch < 0) throw ContractViolation("steplr: epoch must be nonnegative");
  const long k = epoch / schedule.step_size;
  return schedule.base_lr * std::pow(schedule.gamma, static_cast<double>(k));
}

}  // namespace raregen::numerics
