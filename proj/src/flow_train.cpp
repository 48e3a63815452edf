#include <algorithm>
#include <cmath>
#include <limits>

#include "raregen/errors.hpp"
#include "raregen/flow.hpp"
#include "raregen/logging.hpp"

namespace raregen::flow {

using numerics::NodeId;
using numerics::Tape;
using numerics::Tensor;

namespace {

double mean_nll(const FlowModel& model, const knn::FeatureSet& data,
                std::span<const std::size_t> indices) {
  double total = 0.0;
  for (std::size_t i : indices) {
    total -= model.forward_logprob(data.point_tensor(i)).logp;
  }
  return total / static_cast<double>(indices.size());
}

}  // namespace

FlowTrainResult train_flow(const knn::FeatureSet& data, const FlowConfig& config,
                           std::uint64_t seed, const FlowTrainOptions& options) {
  if (data.size() < options.batch_size) {
    throw ContractViolation("train_flow: fewer data rows than one batch");
  }
  if (data.dim() != config.input_dim) {
    throw ContractViolation("train_flow: data dimension does not match config");
  }
  if (options.val_fraction < 0.0 || options.val_fraction >= 1.0) {
    throw ContractViolation("train_flow: val_fraction must be in [0, 1)");
  }

  numerics::RngStream init_rng(numerics::derive_seed(seed, "flow-init"));
  numerics::RngStream batch_rng(numerics::derive_seed(seed, "flow-batch"));

  // Split, then standardize actnorm outputs on the first training batch.
  std::vector<std::size_t> order = batch_rng.permutation(data.size());
  const std::size_t n_val = static_cast<std::size_t>(
      std::llround(options.val_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  if (train_idx.size() < options.batch_size) {
    throw ContractViolation("train_flow: training split smaller than one batch");
  }

  FlowModel model = FlowModel::random_init(config, MinMaxScaler::fit(data), init_rng);
  {
    knn::FeatureSet first_batch(data.dim());
    for (std::size_t i = 0; i < options.batch_size; ++i) {
      first_batch.push(data.point(train_idx[i]));
    }
    model.data_init_actnorm(first_batch);
  }

  FlowTrainResult result;
  const numerics::StepLrSchedule schedule{options.base_lr, options.lr_step_size,
                                          options.lr_gamma};
  std::vector<Tensor> params = model.param_snapshot();
  numerics::AdamState adam = numerics::AdamState::for_shapes(params);

  std::vector<Tensor> best_params = params;
  double best_val = std::numeric_limits<double>::infinity();
  long best_iter = 0;
  const bool has_val = !val_idx.empty();

  auto evaluate_val = [&](long iteration) {
    if (!has_val) return;
    const double v = mean_nll(model, data, val_idx);
    result.val_nll.emplace_back(iteration, v);
    if (v < best_val) {
      best_val = v;
      best_iter = iteration;
      best_params = model.param_snapshot();
    }
  };
  evaluate_val(0);

  std::vector<std::size_t> epoch_order = batch_rng.permutation(train_idx.size());
  std::size_t cursor = 0;

  for (long it = 0; it < options.iterations; ++it) {
    std::vector<std::size_t> batch;
    batch.reserve(options.batch_size);
    while (batch.size() < options.batch_size) {
      if (cursor == epoch_order.size()) {
        epoch_order = batch_rng.permutation(train_idx.size());
        cursor = 0;
      }
      batch.push_back(train_idx[epoch_order[cursor++]]);
    }

    try {
      Tape tape;
      FlowModel::Bindings bindings = model.bind_on_tape(tape, /*trainable=*/true);
      NodeId nll_sum = tape.constant_scalar(0.0);
      for (std::size_t i : batch) {
        const NodeId x = tape.constant(data.point_tensor(i));
        nll_sum = tape.sub(nll_sum, model.logprob_on_tape(tape, bindings, x).logp);
      }
      const NodeId nll =
          tape.scale(nll_sum, 1.0 / static_cast<double>(options.batch_size));
      const double nll_value = tape.value(nll)[0];
      if (!std::isfinite(nll_value)) {
        throw TrainingError("train_flow: diverged (non-finite batch NLL)", it);
      }
      result.train_nll.push_back(nll_value);

      numerics::GradientMap grads = tape.backward(nll);
      std::vector<Tensor> grad_tensors;
      grad_tensors.reserve(bindings.leaves.size());
      for (NodeId leaf : bindings.leaves) {
        grad_tensors.push_back(grads.contains(leaf)
                                   ? grads.at(leaf)
                                   : Tensor::zeros(tape.value(leaf).shape()));
      }
      adam_step(params, grad_tensors, adam, numerics::steplr(schedule, it));
      model.restore_params(params);
    } catch (const NumericError& e) {
      throw TrainingError(std::string("train_flow: diverged: ") + e.what(), it);
    }

    if ((it + 1) % options.eval_every == 0 || it + 1 == options.iterations) {
      evaluate_val(it + 1);
    }
  }

  if (has_val) {
    model.restore_params(best_params);
    result.best_iteration = best_iter;
    result.best_val_nll = best_val;
  } else {
    result.best_iteration = options.iterations;
    result.best_val_nll =
        result.train_nll.empty() ? 0.0 : result.train_nll.back();
  }
  RAREGEN_LOG_INFO("flow training done: best val NLL " << result.best_val_nll << " at iteration "
                                                       << result.best_iteration);
  result.model = std::move(model);
  return result;
}

}  // namespace raregen::flow
