#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raregen/flow.hpp"
#include "raregen/knn_manifold.hpp"
#include "raregen/metrics.hpp"
#include "raregen/rare_optimizer.hpp"
#include "raregen/toy_world.hpp"

namespace raregen::harness {

// Desk-scale defaults for every pipeline stage; user config files override
// individual keys.
nlohmann::json default_experiment_config();
nlohmann::json merge_config(const nlohmann::json& overrides);

// --- core operations -------------------------------------------------------

struct CorrelationData {
  std::vector<double> knnd_real, neglogp_real;  // one pair per real point
  std::vector<double> rarity_fake, neglogp_fake;  // defined-rarity pairs only
  double r_real = 0.0, r_fake = 0.0;
  std::size_t undefined_fake = 0, total_fake = 0;
};

// Pairs the flow's negative log-likelihood with the neighbor-distance view of
// rarity: k-NND for real points, the rarity score for generated ones.
CorrelationData run_correlation(const flow::FlowModel& model,
                                const knn::KnnManifold& real_manifold,
                                const knn::FeatureSet& real_eval, const knn::FeatureSet& fakes);

struct HeatmapGrid {
  std::size_t resolution = 0;
  std::vector<double> s, t, logp;   // row-major over (s, t)
  std::vector<char> in_manifold;
};

// Evaluates logp and manifold membership on the plane center + s a1 + t a2.
// The axes must be orthonormal within 1e-8.
HeatmapGrid heatmap_slice(const flow::FlowModel& model, const knn::KnnManifold& manifold,
                          const numerics::Tensor& center, const numerics::Tensor& a1,
                          const numerics::Tensor& a2, double extent, std::size_t resolution);

struct MetricsReport {
  std::string set_name;
  std::size_t n_evaluated = 0, n_real = 0;
  std::size_t defined_count = 0;
  double mean_rarity_defined = 0.0;
  double undefined_fraction = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double mean_pairwise = 0.0;
  double frechet = 0.0;
  std::size_t k = 0;
  std::string real_hash;
};

MetricsReport compute_metrics(const std::string& name, const knn::FeatureSet& evaluated,
                              const knn::KnnManifold& real_manifold,
                              const knn::FeatureSet& real_eval, std::size_t n_pairs,
                              std::uint64_t seed, const std::string& real_hash);
nlohmann::json metrics_to_json(const MetricsReport& report);

// --- optimization batch ------------------------------------------------------

struct ReferenceOutcome {
  std::size_t baseline_index = 0;
  std::uint64_t seed = 0;
  std::optional<rareopt::OptimizationResult> result;  // empty when skipped
  std::string skip_reason;
  numerics::Tensor z_star, x_star;
  double d_star = 0.0;
};

// Runs the per-reference optimization for each selected baseline index.
// Reference seeds derive from the master seed and the baseline index, so
// worker count cannot change any result.
std::vector<ReferenceOutcome> run_optimization_batch(
    const toy::ToyWorld& world, const flow::FlowModel& model,
    const knn::KnnManifold& real_manifold, const knn::FeatureSet& fakes,
    const knn::FeatureSet& baseline_z, std::span<const std::size_t> reference_indices,
    const rareopt::OptimizerConfig& config, std::uint64_t master_seed, std::size_t workers);

// One results.jsonl line per (reference, start).
struct StartRecord {
  std::size_t reference = 0;       // position in the run's reference list
  std::size_t baseline_index = 0;  // row in baseline_z.fset
  std::uint64_t ref_seed = 0;
  std::size_t start = 0;
  bool feasible = false;
  bool initially_feasible = false;
  long best_epoch = -1;
  std::vector<double> best_z, best_x;
  rareopt::LossBreakdown loss;
  std::optional<double> rarity;
  std::vector<double> x_star;
  double d_star = 0.0;
};

void save_results_jsonl(const std::vector<StartRecord>& records,
                        const std::filesystem::path& path);
std::vector<StartRecord> load_results_jsonl(const std::filesystem::path& path);

// --- pipeline stages ----------------------------------------------------------
// Each stage reads its inputs from the run directory, writes its outputs plus
// a manifest_<stage>.json with content hashes, and verifies the hashes of the
// upstream artifacts it consumes.

void stage_make_world(const nlohmann::json& config, const std::filesystem::path& out);
void stage_train_flow(const nlohmann::json& config, std::uint64_t seed,
                      const std::filesystem::path& out);
void stage_build_manifold(const nlohmann::json& config, std::uint64_t seed,
                          const std::filesystem::path& out);

struct OptimizeOverrides {
  std::optional<std::size_t> refs;
  std::size_t workers = 1;
  std::string variant = "full";  // rare | rare+sim | full
};
void stage_optimize(const nlohmann::json& config, std::uint64_t seed,
                    const std::filesystem::path& out, const OptimizeOverrides& overrides);
void stage_eval(const nlohmann::json& config, std::uint64_t seed,
                const std::filesystem::path& out);
void stage_ablate(const nlohmann::json& config, std::uint64_t seed,
                  const std::filesystem::path& out, const OptimizeOverrides& overrides);
void stage_correlate(const nlohmann::json& config, std::uint64_t seed,
                     const std::filesystem::path& out);
void stage_heatmap(const nlohmann::json& config, const std::filesystem::path& out);

// Applies an objective variant to an optimizer config.
rareopt::OptimizerConfig apply_variant(rareopt::OptimizerConfig config,
                                       const std::string& variant);
rareopt::OptimizerConfig optimizer_config_from_json(const nlohmann::json& section);

}  // namespace raregen::harness
