#pragma once

#include <cstdint>
#include <span>

#include "raregen/feature_set.hpp"

namespace raregen::harness {

// Sample Pearson correlation; lengths must match and be >= 3 with nonzero
// variance on both sides.
double pearson(std::span<const double> xs, std::span<const double> ys);

// Squared Frechet distance between the Gaussian summaries of two sets:
//   |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
// using the symmetrized-product convention for the cross term. Degenerate
// covariances are regularized with 1e-6 I and a warning.
double frechet_distance(const knn::FeatureSet& a, const knn::FeatureSet& b);

// Mean Euclidean distance over n_pairs seeded random distinct pairs; when the
// set has no more than n_pairs distinct pairs, all of them are used exactly.
double mean_pairwise_distance(const knn::FeatureSet& set, std::size_t n_pairs,
                              std::uint64_t seed);

// Exact one-sided binomial tail P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_pvalue(std::size_t wins, std::size_t trials);

}  // namespace raregen::harness
