#include "raregen/metrics.hpp"

#include <cmath>

#include "raregen/errors.hpp"
#include "raregen/linalg.hpp"
#include "raregen/logging.hpp"
#include "raregen/rng.hpp"
#include "raregen/tensor.hpp"

namespace raregen::harness {

using numerics::Tensor;

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ContractViolation("pearson: length mismatch");
  if (xs.size() < 3) throw ContractViolation("pearson: need at least 3 pairs");
  const double n = static_cast<double>(xs.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    syy += ys[i] * ys[i];
    sxy += xs[i] * ys[i];
  }
  const double vx = sxx - sx * sx / n;
  const double vy = syy - sy * sy / n;
  if (vx <= 0.0 || vy <= 0.0) throw ContractViolation("pearson: zero variance");
  return (sxy - sx * sy / n) / std::sqrt(vx * vy);
}

namespace {

struct GaussianSummary {
  Tensor mean;
  Tensor cov;
};

GaussianSummary summarize(const knn::FeatureSet& set) {
  if (set.size() < 2) throw ContractViolation("frechet_distance: need at least 2 points");
  const std::size_t dim = set.dim();
  GaussianSummary g{Tensor({dim}), Tensor({dim, dim})};
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto p = set.point(i);
    for (std::size_t d = 0; d < dim; ++d) g.mean[d] += p[d];
  }
  for (std::size_t d = 0; d < dim; ++d) g.mean[d] /= static_cast<double>(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto p = set.point(i);
    for (std::size_t r = 0; r < dim; ++r) {
      const double dr = p[r] - g.mean[r];
      for (std::size_t c = r; c < dim; ++c) {
        g.cov.at(r, c) += dr * (p[c] - g.mean[c]);
      }
    }
  }
  const double denom = static_cast<double>(set.size() - 1);
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = r; c < dim; ++c) {
      g.cov.at(r, c) /= denom;
      g.cov.at(c, r) = g.cov.at(r, c);
    }
  }
  bool degenerate = set.size() <= dim;
  if (!degenerate) {
    try {
      numerics::cholesky(g.cov);
    } catch (const SingularMatrixError&) {
      degenerate = true;
    }
  }
  if (degenerate) {
    RAREGEN_LOG_WARN("frechet_distance: degenerate covariance, regularizing with 1e-6 I");
    for (std::size_t d = 0; d < dim; ++d) g.cov.at(d, d) += 1e-6;
  }
  return g;
}

double trace(const Tensor& m) {
  double s = 0.0;
  for (std::size_t d = 0; d < m.rows(); ++d) s += m.at(d, d);
  return s;
}

}  // namespace

double frechet_distance(const knn::FeatureSet& a, const knn::FeatureSet& b) {
  if (a.dim() != b.dim()) throw ContractViolation("frechet_distance: dimension mismatch");
  const GaussianSummary ga = summarize(a);
  const GaussianSummary gb = summarize(b);
  double mean_term = 0.0;
  for (std::size_t d = 0; d < ga.mean.size(); ++d) {
    const double diff = ga.mean[d] - gb.mean[d];
    mean_term += diff * diff;
  }
  const Tensor sa = numerics::psd_sqrt(ga.cov);
  const Tensor cross = numerics::psd_sqrt(numerics::matmul(numerics::matmul(sa, gb.cov), sa));
  const double value = mean_term + trace(ga.cov) + trace(gb.cov) - 2.0 * trace(cross);
  return value > 0.0 ? value : 0.0;
}

double mean_pairwise_distance(const knn::FeatureSet& set, std::size_t n_pairs,
                              std::uint64_t seed) {
  const std::size_t n = set.size();
  if (n < 2) throw ContractViolation("mean_pairwise_distance: need at least 2 points");
  if (n_pairs == 0) throw ContractViolation("mean_pairwise_distance: need at least 1 pair");
  const std::size_t total_pairs = n * (n - 1) / 2;
  double acc = 0.0;
  std::size_t used = 0;
  if (total_pairs <= n_pairs) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        acc += numerics::euclidean_distance(set.point(i), set.point(j));
      }
    }
    used = total_pairs;
  } else {
    numerics::RngStream rng(seed);
    for (std::size_t k = 0; k < n_pairs; ++k) {
      const std::size_t i = static_cast<std::size_t>(rng.below(n));
      std::size_t j = static_cast<std::size_t>(rng.below(n - 1));
      if (j >= i) ++j;
      acc += numerics::euclidean_distance(set.point(i), set.point(j));
    }
    used = n_pairs;
  }
  return acc / static_cast<double>(used);
}

double sign_test_pvalue(std::size_t wins, std::size_t trials) {
  if (trials == 0) throw ContractViolation("sign_test_pvalue: no trials");
  if (wins > trials) throw ContractViolation("sign_test_pvalue: wins exceed trials");
  const double n = static_cast<double>(trials);
  double p = 0.0;
  for (std::size_t k = wins; k <= trials; ++k) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                            std::lgamma(n - static_cast<double>(k) + 1.0) -
                            n * std::log(2.0);
    p += std::exp(log_term);
  }
  return p < 1.0 ? p : 1.0;
}

}  // namespace raregen::harness
