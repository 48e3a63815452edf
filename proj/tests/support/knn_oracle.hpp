#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "raregen/feature_set.hpp"

// Order-N^2 reference implementations, kept deliberately independent of the
// library code paths: full sorts on (distance, index) pairs.
namespace raregen::testsupport {

inline double oracle_knnd(std::span<const double> x, const knn::FeatureSet& set, std::size_t k,
                          std::optional<std::size_t> exclude = std::nullopt) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (exclude && *exclude == i) continue;
    auto p = set.point(i);
    double d2 = 0.0;
    for (std::size_t d = 0; d < p.size(); ++d) d2 += (p[d] - x[d]) * (p[d] - x[d]);
    all.emplace_back(std::sqrt(d2), i);
  }
  std::sort(all.begin(), all.end());
  return all.at(k - 1).first;
}

inline std::vector<double> oracle_radii(const knn::FeatureSet& set, std::size_t k) {
  std::vector<double> radii;
  for (std::size_t i = 0; i < set.size(); ++i) {
    radii.push_back(oracle_knnd(set.point(i), set, k, i));
  }
  return radii;
}

inline bool oracle_contains(const knn::FeatureSet& centers, const std::vector<double>& radii,
                            std::span<const double> x) {
  for (std::size_t i = 0; i < centers.size(); ++i) {
    auto c = centers.point(i);
    double d2 = 0.0;
    for (std::size_t d = 0; d < c.size(); ++d) d2 += (c[d] - x[d]) * (c[d] - x[d]);
    if (std::sqrt(d2) <= radii[i]) return true;
  }
  return false;
}

inline std::optional<double> oracle_rarity(const knn::FeatureSet& centers,
                                           const std::vector<double>& radii,
                                           std::span<const double> x) {
  std::optional<double> best;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    auto c = centers.point(i);
    double d2 = 0.0;
    for (std::size_t d = 0; d < c.size(); ++d) d2 += (c[d] - x[d]) * (c[d] - x[d]);
    if (std::sqrt(d2) <= radii[i] && (!best || radii[i] < *best)) best = radii[i];
  }
  return best;
}

}  // namespace raregen::testsupport
