#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "raregen/autodiff.hpp"
#include "raregen/feature_set.hpp"
#include "raregen/rng.hpp"
#include "raregen/tensor.hpp"

namespace raregen::toy {

// Ground-truth data distribution: a Gaussian mixture with at least one
// low-weight component playing the rare mode.
struct MixtureComponent {
  double weight = 0.0;
  numerics::Tensor mean;
  numerics::Tensor cov;  // data_dim x data_dim, PSD
};

struct MixtureSpec {
  std::size_t data_dim = 0;
  std::vector<MixtureComponent> components;

  void validate() const;  // weights sum to 1 +- 1e-12, shapes and PSD checks
  std::size_t rare_index() const;  // component of minimum weight
};

struct MixtureSample {
  knn::FeatureSet points;                // data-space rows
  std::vector<std::size_t> component;    // source component per row
};

MixtureSample sample_real(const MixtureSpec& spec, std::size_t count, std::uint64_t seed);
double oracle_logpdf(const MixtureSpec& spec, std::span<const double> point);

// Smooth deterministic generator standing in for a pretrained sampler. The
// first gating_dim latent coordinates pick a mode through a sharp softmax,
// the rest drive within-mode variation:
//   out = sum_k softmax_k(alpha * U z_head) * (offset_k + map_k z_tail)
// Gate directions with smaller norm get picked less often than their true
// mixture weight, which is the controllable mode-underrepresentation knob.
class ToyGenerator {
 public:
  ToyGenerator() = default;
  ToyGenerator(std::size_t latent_dim, std::size_t gating_dim, double alpha,
               numerics::Tensor gate_directions, std::vector<numerics::Tensor> offsets,
               std::vector<numerics::Tensor> maps);

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t gating_dim() const { return gating_dim_; }
  std::size_t data_dim() const { return offsets_.empty() ? 0 : offsets_[0].size(); }
  std::size_t component_count() const { return offsets_.size(); }
  double alpha() const { return alpha_; }
  const numerics::Tensor& gate_directions() const { return gate_directions_; }
  const std::vector<numerics::Tensor>& offsets() const { return offsets_; }
  const std::vector<numerics::Tensor>& maps() const { return maps_; }

  numerics::Tensor generate(const numerics::Tensor& z) const;
  numerics::NodeId generate_on_tape(numerics::Tape& tape, numerics::NodeId z) const;

 private:
  std::size_t latent_dim_ = 0, gating_dim_ = 0;
  double alpha_ = 1.0;
  numerics::Tensor gate_directions_;        // K x gating_dim
  std::vector<numerics::Tensor> offsets_;   // K x data_dim
  std::vector<numerics::Tensor> maps_;      // K x (data_dim x (latent_dim - gating_dim))
};

enum class Squash { kIdentity, kTanh };

// Fixed smooth feature map: squash(W p + b).
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(numerics::Tensor weight, numerics::Tensor bias, Squash squash);

  std::size_t feature_dim() const { return bias_.size(); }
  std::size_t data_dim() const { return weight_.size() == 0 ? 0 : weight_.cols(); }
  const numerics::Tensor& weight() const { return weight_; }
  const numerics::Tensor& bias() const { return bias_; }
  Squash squash() const { return squash_; }

  numerics::Tensor extract(const numerics::Tensor& point) const;
  numerics::NodeId extract_on_tape(numerics::Tape& tape, numerics::NodeId point) const;

 private:
  numerics::Tensor weight_, bias_;
  Squash squash_ = Squash::kTanh;
};

// The full synthetic test bed: ground truth, generator, extractor.
struct ToyWorld {
  MixtureSpec mixture;
  ToyGenerator generator;
  FeatureExtractor extractor;

  std::size_t latent_dim() const { return generator.latent_dim(); }
  std::size_t feature_dim() const { return extractor.feature_dim(); }

  // Baseline latents are standard normal.
  knn::FeatureSet sample_latents(std::size_t count, std::uint64_t seed) const;
  knn::FeatureSet generate_set(const knn::FeatureSet& latents) const;
  knn::FeatureSet extract_set(const knn::FeatureSet& data_points) const;
  numerics::Tensor feature_of_latent(const numerics::Tensor& z) const;

  static ToyWorld shipped_default();
};

// World files: JSON or a TOML subset, either the compact seeded form or the
// fully resolved form written by the harness.
ToyWorld load_world(const std::filesystem::path& path);
std::string world_to_json(const ToyWorld& world);  // resolved, reloadable
ToyWorld world_from_json(const std::string& json_text);

}  // namespace raregen::toy
