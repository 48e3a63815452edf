#include "raregen/knn_manifold.hpp"

#include <algorithm>
#include <cmath>

#include "raregen/errors.hpp"

namespace raregen::knn {

double knnd(std::span<const double> x, const FeatureSet& set, std::size_t k,
            std::optional<std::size_t> exclude_index) {
  if (set.dim() != x.size()) throw ContractViolation("knnd: dimension mismatch");
  const std::size_t available = set.size() - (exclude_index ? 1 : 0);
  if (k == 0 || k > available) {
    throw ContractViolation("knnd: k=" + std::to_string(k) + " exceeds available neighbors " +
                            std::to_string(available));
  }
  // (distance, index) pairs; index order breaks ties deterministically.
  std::vector<std::pair<double, std::size_t>> dists;
  dists.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (exclude_index && *exclude_index == i) continue;
    dists.emplace_back(numerics::squared_distance(x, set.point(i)), i);
  }
  std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
  return std::sqrt(dists[k - 1].first);
}

KnnManifold KnnManifold::build(FeatureSet centers, std::size_t k) {
  if (centers.size() < k + 1) {
    throw ContractViolation("build_manifold: need at least k+1 points, have " +
                            std::to_string(centers.size()));
  }
  std::vector<double> radii(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    radii[i] = knnd(centers.point(i), centers, k, i);
  }
  return KnnManifold(std::move(centers), std::move(radii), k);
}

bool KnnManifold::contains(std::span<const double> x) const {
  if (x.size() != dim()) throw ContractViolation("contains: dimension mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    const double d2 = numerics::squared_distance(x, centers_.point(i));
    if (d2 <= radii_[i] * radii_[i]) return true;
  }
  return false;
}

std::optional<double> KnnManifold::rarity_score(std::span<const double> x) const {
  if (x.size() != dim()) throw ContractViolation("rarity_score: dimension mismatch");
  std::optional<double> best;
  for (std::size_t i = 0; i < size(); ++i) {
    const double d2 = numerics::squared_distance(x, centers_.point(i));
    if (d2 <= radii_[i] * radii_[i]) {
      if (!best || radii_[i] < *best) best = radii_[i];
    }
  }
  return best;
}

double precision(const FeatureSet& fake, const KnnManifold& real_manifold) {
  if (fake.size() == 0) throw ContractViolation("precision: empty set");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < fake.size(); ++i) {
    if (real_manifold.contains(fake.point(i))) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(fake.size());
}

double recall(const FeatureSet& real, const KnnManifold& fake_manifold) {
  if (real.size() == 0) throw ContractViolation("recall: empty set");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < real.size(); ++i) {
    if (fake_manifold.contains(real.point(i))) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(real.size());
}

}  // namespace raregen::knn
