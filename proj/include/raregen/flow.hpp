#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "raregen/autodiff.hpp"
#include "raregen/feature_set.hpp"
#include "raregen/optim.hpp"
#include "raregen/rng.hpp"
#include "raregen/tensor.hpp"

namespace raregen::flow {

// Grouped Glow-style normalizing flow over flat feature vectors. The running
// state is a channels-by-width matrix. Each block applies a pre-mixing
// invertible linear across channels, regroups (channels *= groups,
// width /= groups), runs its flow steps (actnorm, invertible linear, affine
// coupling), then routes the second half of the channels straight to the
// standard-normal prior; the last block collects everything.
struct FlowConfig {
  std::size_t input_dim = 32;
  std::size_t n_blocks = 2;
  std::size_t flows_per_block = 8;
  std::size_t groups_per_block = 2;
  std::size_t hidden_width = 64;
};

struct BlockLayout {
  std::size_t c_in, d_in;      // state entering the block
  std::size_t c_flow, d_flow;  // state inside the flow steps (after grouping)
  std::size_t collect;         // channels collected at block end
};

// Validates divisibility constraints and returns the per-block shapes.
std::vector<BlockLayout> block_layouts(const FlowConfig& config);

// Maps features to [0,1] per dimension: (x - min) / (max - min + eps).
class MinMaxScaler {
 public:
  MinMaxScaler() = default;
  static MinMaxScaler fit(const knn::FeatureSet& data, double eps = 1e-6);
  static MinMaxScaler from_bounds(numerics::Tensor min, numerics::Tensor max, double eps = 1e-6);
  // Exact reconstruction from serialized fields.
  static MinMaxScaler from_min_range(numerics::Tensor min, numerics::Tensor range, double eps);

  std::size_t dim() const { return min_.size(); }
  double eps() const { return eps_; }
  const numerics::Tensor& min() const { return min_; }
  const numerics::Tensor& range() const { return range_; }

  numerics::Tensor scale(const numerics::Tensor& x) const;
  numerics::Tensor unscale(const numerics::Tensor& z) const;
  numerics::Tensor midpoint() const;
  // Constant relating the two reporting spaces: log p_raw = log p_scaled + this.
  double logdet_constant() const;

 private:
  numerics::Tensor min_, range_;
  double eps_ = 1e-6;
};

// W = P L U with L unit lower triangular and U's diagonal stored as
// sign * exp(log_diag), so log|det W| per applied column is sum(log_diag).
struct InvertibleLinear {
  std::size_t size = 0;
  std::vector<std::size_t> row_src;  // W[i,:] = (L U)[row_src[i],:]
  std::vector<double> diag_sign;
  numerics::Tensor lower;     // strictly lower entries used
  numerics::Tensor upper;     // strictly upper entries used
  numerics::Tensor log_diag;  // length size

  static InvertibleLinear identity(std::size_t n);
  static InvertibleLinear from_rotation(std::size_t n, numerics::RngStream& rng);

  numerics::Tensor materialize() const;  // dense W
  double logdet_per_column() const;      // sum(log_diag)
};

struct ActNorm {
  numerics::Tensor log_scale;  // per channel
  numerics::Tensor bias;
  static ActNorm neutral(std::size_t channels);
};

// Affine coupling over channel rows: the first half parameterizes a shift and
// a bounded scale for the second half through a two-layer tanh perceptron.
// Effective scale is logistic(raw + 2) / logistic(2): bounded and exactly 1
// while the zero-initialized output layer has not moved.
struct Coupling {
  std::size_t in_flat = 0, out_flat = 0, hidden = 0;
  numerics::Tensor w1, b1, w2, b2;
  static Coupling zero_init(std::size_t in_flat, std::size_t out_flat, std::size_t hidden);
  static Coupling seeded_init(std::size_t in_flat, std::size_t out_flat, std::size_t hidden,
                              numerics::RngStream& rng);
};

struct FlowStep {
  ActNorm act;
  InvertibleLinear conv;
  Coupling coup;
};

struct FlowBlock {
  InvertibleLinear pre;
  std::vector<FlowStep> steps;
};

struct LogProbResult {
  double logp = 0.0;          // nats, scaled space
  numerics::Tensor latents;   // all collected prior codes, flattened in collection order
  double layer_logdet = 0.0;  // sum of per-layer log-determinants
};

class FlowModel {
 public:
  FlowModel() = default;

  // All layers neutral: logp is the standard-normal density of the scaled input.
  static FlowModel identity(const FlowConfig& config, MinMaxScaler scaler);
  // Seeded rotations for the invertible linears, seeded first coupling layer,
  // neutral actnorm (see data_init_actnorm).
  static FlowModel random_init(const FlowConfig& config, MinMaxScaler scaler,
                               numerics::RngStream& rng);

  const FlowConfig& config() const { return config_; }
  const MinMaxScaler& scaler() const { return scaler_; }
  const std::vector<FlowBlock>& blocks() const { return blocks_; }
  const std::vector<BlockLayout>& layouts() const { return layouts_; }

  LogProbResult forward_logprob(const numerics::Tensor& x) const;
  numerics::Tensor inverse(const numerics::Tensor& latents) const;
  numerics::Tensor grad_logprob(const numerics::Tensor& x) const;

  // Glow-style data-dependent initialization: per-channel output of each
  // actnorm gets mean 0, variance 1 on the given batch of raw feature rows.
  void data_init_actnorm(const knn::FeatureSet& batch);

  // --- tape integration ------------------------------------------------------
  struct BoundLinear {
    numerics::NodeId w;
    numerics::NodeId logdet;  // per-layer total (already scaled by width)
  };
  struct BoundActnorm {
    numerics::NodeId scale_rows, bias_rows, logdet;
  };
  struct BoundCoupling {
    numerics::NodeId w1, b1, w2, b2;
  };
  struct BoundStep {
    BoundActnorm act;
    BoundLinear conv;
    BoundCoupling coup;
  };
  struct BoundBlock {
    BoundLinear pre;
    std::vector<BoundStep> steps;
  };
  struct Bindings {
    std::vector<BoundBlock> blocks;
    numerics::NodeId scaler_min = -1, scaler_range = -1;
    std::vector<numerics::NodeId> leaves;  // parameter leaves in visit order (trainable only)
  };
  struct TapeResult {
    numerics::NodeId logp;
    std::vector<numerics::NodeId> latent_parts;
  };

  // Binds parameters onto a tape, as leaves when trainable (leaf ids returned
  // in visit_params order) or as constants otherwise. One binding can be
  // shared by many forward passes on the same tape.
  Bindings bind_on_tape(numerics::Tape& tape, bool trainable) const;
  TapeResult logprob_on_tape(numerics::Tape& tape, const Bindings& b,
                             numerics::NodeId x_raw) const;

  // Trainable parameters in the fixed serialization order.
  void visit_params(const std::function<void(numerics::Tensor&)>& fn);
  void visit_params(const std::function<void(const numerics::Tensor&)>& fn) const;
  std::vector<numerics::Tensor> param_snapshot() const;
  void restore_params(const std::vector<numerics::Tensor>& snapshot);

  void save(const std::filesystem::path& path) const;
  static FlowModel load(const std::filesystem::path& path);

 private:
  static FlowModel build(const FlowConfig& config, MinMaxScaler scaler);

  FlowConfig config_;
  MinMaxScaler scaler_;
  std::vector<FlowBlock> blocks_;
  std::vector<BlockLayout> layouts_;
};

// Reshape a flat vector into `groups` channel rows; volume preserving.
numerics::Tensor group(const numerics::Tensor& x, std::size_t groups);
numerics::Tensor ungroup(const numerics::Tensor& x);

struct FlowTrainOptions {
  long iterations = 1500;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  long lr_step_size = 500;
  double lr_gamma = 0.1;
  double val_fraction = 0.3;
  long eval_every = 25;
};

struct FlowTrainResult {
  FlowModel model;  // parameters of the best validation checkpoint
  std::vector<double> train_nll;                 // one entry per iteration
  std::vector<std::pair<long, double>> val_nll;  // (iteration, value) checkpoints
  long best_iteration = 0;
  double best_val_nll = 0.0;
};

// Minimizes mean NLL with Adam and a step learning-rate schedule; retains the
// best validation checkpoint. Throws TrainingError on divergence.
FlowTrainResult train_flow(const knn::FeatureSet& data, const FlowConfig& config,
                           std::uint64_t seed, const FlowTrainOptions& options = {});

}  // namespace raregen::flow
