#pragma once

#include <optional>
#include <span>
#include <vector>

#include "raregen/feature_set.hpp"

namespace raregen::knn {

// Distance from x to its k-th nearest point of X (Euclidean; ties broken by
// stable index order). If exclude_index is given, that point of X is skipped,
// which is how a member point's own neighborhood is computed.
double knnd(std::span<const double> x, const FeatureSet& set, std::size_t k,
            std::optional<std::size_t> exclude_index = std::nullopt);

// Union of closed balls centered at the set's points, each with the point's
// self-excluded k-th nearest neighbor distance as radius. Immutable once
// built; queries are safe to run concurrently.
class KnnManifold {
 public:
  static KnnManifold build(FeatureSet centers, std::size_t k);

  std::size_t k() const { return k_; }
  std::size_t dim() const { return centers_.dim(); }
  std::size_t size() const { return centers_.size(); }
  const FeatureSet& centers() const { return centers_; }
  const std::vector<double>& radii() const { return radii_; }

  bool contains(std::span<const double> x) const;
  // Minimum radius over balls containing x; empty if x lies in no ball.
  std::optional<double> rarity_score(std::span<const double> x) const;

 private:
  KnnManifold(FeatureSet centers, std::vector<double> radii, std::size_t k)
      : centers_(std::move(centers)), radii_(std::move(radii)), k_(k) {}

  FeatureSet centers_;
  std::vector<double> radii_;
  std::size_t k_ = 0;
};

inline KnnManifold build_manifold(FeatureSet centers, std::size_t k) {
  return KnnManifold::build(std::move(centers), k);
}

// Fraction of the query set's points lying inside the manifold.
double precision(const FeatureSet& fake, const KnnManifold& real_manifold);
double recall(const FeatureSet& real, const KnnManifold& fake_manifold);

}  // namespace raregen::knn
