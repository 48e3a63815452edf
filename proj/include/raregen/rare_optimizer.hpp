#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "raregen/flow.hpp"
#include "raregen/knn_manifold.hpp"
#include "raregen/toy_world.hpp"

namespace raregen::rareopt {

// Distance used by the similarity and diversity terms. The manifold and the
// penalizing boundary stay Euclidean.
enum class Metric { kEuclidean, kL1, kCosine };

Metric metric_from_string(const std::string& name);
std::string metric_to_string(Metric metric);

double metric_distance(std::span<const double> a, std::span<const double> b, Metric metric);

struct OptimizerConfig {
  double lambda1 = 30.0;   // similarity weight
  double lambda2 = 0.002;  // diversity weight
  double sigma = 0.1;      // start-noise scale
  std::size_t k_prime = 100;
  std::size_t n_starts = 10;
  long max_epochs = 200;
  double base_lr = 0.02;
  long lr_step_size = 50;
  double lr_gamma = 0.9;
  Metric metric = Metric::kEuclidean;
  bool record_trace = false;
};

// d* = Euclidean distance from the reference feature to its k'-th nearest
// neighbor among the generated features. If the reference feature itself
// appears in the set, exactly one such instance is excluded.
double penalizing_boundary(std::span<const double> x_star, const knn::FeatureSet& fakes,
                           std::size_t k_prime);

// (max(d(x, x*), d*) - d*)^2: zero inside the boundary, quadratic outside.
double loss_sim(std::span<const double> x, std::span<const double> x_star, double d_star,
                Metric metric);

// -sum_{j != i} d(x_i, x_j)^2 over the current iterates.
double loss_div(std::size_t index, const std::vector<numerics::Tensor>& features, Metric metric);

// z_i = z* + eps with eps ~ N(0, sigma^2 I); deterministic per seed.
std::vector<numerics::Tensor> init_starts(const numerics::Tensor& z_star, std::size_t n,
                                          double sigma, std::uint64_t seed);

// Everything fixed about one reference during its optimization.
struct ReferenceContext {
  numerics::Tensor z_star;
  numerics::Tensor x_star;
  double d_star = 0.0;
  const knn::KnnManifold* real_manifold = nullptr;
};

// Computes x* = f(G(z*)) and d*; rejects boundaries below 1e-9 as degenerate.
ReferenceContext make_reference_context(numerics::Tensor z_star, const toy::ToyGenerator& G,
                                        const toy::FeatureExtractor& f,
                                        const knn::FeatureSet& fakes, std::size_t k_prime,
                                        const knn::KnnManifold& real_manifold);

struct LossBreakdown {
  double l_rare = 0.0;
  double l_sim = 0.0;
  double l_div = 0.0;
  double total = 0.0;
};

struct StartResult {
  bool feasible = false;            // some iterate satisfied both constraints
  bool initially_feasible = false;  // the unstepped start was already feasible
  long best_epoch = -1;
  numerics::Tensor best_z;
  numerics::Tensor best_x;
  LossBreakdown best_loss;
};

struct EpochRecord {
  long epoch = 0;
  std::vector<LossBreakdown> losses;
  std::vector<bool> feasible;
};

struct OptimizationResult {
  std::vector<StartResult> starts;
  long epochs_run = 0;
  std::vector<EpochRecord> trace;  // only when record_trace is set
};

// Joint Adam descent of all starts on
//   sum_i [ L_rare(x_i) + lambda1 L_sim(x_i) + lambda2 L_div(x_i) ],
// L_rare being the flow log-likelihood. Iterates are evaluated before the
// first step and after every step; a start's best is the lowest-loss iterate
// that lies inside the real manifold and within the boundary.
OptimizationResult optimize_reference(const ReferenceContext& ctx, const OptimizerConfig& config,
                                      const toy::ToyGenerator& G, const toy::FeatureExtractor& f,
                                      const flow::FlowModel& flow_model, std::uint64_t seed);

}  // namespace raregen::rareopt
