#include "raregen/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "raregen/errors.hpp"

namespace raregen::numerics {

namespace {

constexpr double kSingularPivot = 1e-12;

void require_square(const Tensor& m, const char* op) {
  if (m.rank() != 2 || m.rows() != m.cols()) {
    throw ContractViolation(std::string(op) + ": square matrix required");
  }
  if (!m.all_finite()) {
    throw ContractViolation(std::string(op) + ": non-finite entries");
  }
}

}  // namespace

LogDetResult lu_logdet(const Tensor& matrix) {
  require_square(matrix, "lu_logdet");
  const std::size_t n = matrix.rows();
  Tensor a = matrix;
  int sign = 1;
  double log_abs = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::abs(a.at(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(a.at(r, col));
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best <= kSingularPivot) {
      throw SingularMatrixError("lu_logdet: singular matrix (pivot " + std::to_string(best) +
                                " at column " + std::to_string(col) + ")");
    }
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a.at(pivot, c), a.at(col, c));
      sign = -sign;
    }
    const double p = a.at(col, col);
    if (p < 0.0) sign = -sign;
    log_abs += std::log(std::abs(p));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a.at(r, col) / p;
      if (f == 0.0) continue;
      a.at(r, col) = f;
      for (std::size_t c = col + 1; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
    }
  }
  return {sign, log_abs};
}

LuFactors lu_factor(const Tensor& matrix) {
  require_square(matrix, "lu_factor");
  const std::size_t n = matrix.rows();
  Tensor a = matrix;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::abs(a.at(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(a.at(r, col));
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best <= kSingularPivot) {
      throw SingularMatrixError("lu_factor: singular matrix at column " + std::to_string(col));
    }
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a.at(pivot, c), a.at(col, c));
      std::swap(perm[pivot], perm[col]);
    }
    const double p = a.at(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a.at(r, col) / p;
      a.at(r, col) = f;
      for (std::size_t c = col + 1; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
    }
  }
  LuFactors out{std::move(perm), Tensor::identity(n), Tensor({n, n})};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      if (r > c) {
        out.lower.at(r, c) = a.at(r, c);
      } else {
        out.upper.at(r, c) = a.at(r, c);
      }
    }
  }
  return out;
}

Tensor cholesky(const Tensor& matrix) {
  require_square(matrix, "cholesky");
  const std::size_t n = matrix.rows();
  Tensor l({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = matrix.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (s <= 0.0) {
          throw SingularMatrixError("cholesky: matrix not positive definite");
        }
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return l;
}

SymmetricEigen symmetric_eigen(const Tensor& matrix) {
  require_square(matrix, "symmetric_eigen");
  const std::size_t n = matrix.rows();
  Tensor a = matrix;
  Tensor v = Tensor::identity(n);
  // Cyclic Jacobi sweeps; converges fast at the sizes used here.
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double app = a.at(p, p);
        const double aqq = a.at(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                     : 1.0 / (tau - std::sqrt(1.0 + tau * tau)));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p);
          const double akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k);
          const double aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p);
          const double vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  Tensor eig({n});
  for (std::size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
  return {std::move(eig), std::move(v)};
}

Tensor psd_sqrt(const Tensor& matrix) {
  require_square(matrix, "psd_sqrt");
  const std::size_t n = matrix.rows();
  double scale = 0.0;
  for (double x : matrix.data()) scale = std::max(scale, std::abs(x));
  const double tol = 1e-10 * std::max(1.0, scale);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) {
      if (std::abs(matrix.at(r, c) - matrix.at(c, r)) > tol) {
        throw ContractViolation("psd_sqrt: matrix not symmetric within tolerance");
      }
    }
  }
  // Symmetrize before decomposing so rounding asymmetry cannot leak through.
  Tensor sym({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      sym.at(r, c) = 0.5 * (matrix.at(r, c) + matrix.at(c, r));
    }
  }
  SymmetricEigen eig = symmetric_eigen(sym);
  Tensor out({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    double lambda = eig.eigenvalues[k];
    if (lambda < 0.0) lambda = 0.0;  // clamp tiny negative eigenvalues
    const double root = std::sqrt(lambda);
    if (root == 0.0) continue;
    for (std::size_t r = 0; r < n; ++r) {
      const double vr = eig.eigenvectors.at(r, k) * root;
      if (vr == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        out.at(r, c) += vr * eig.eigenvectors.at(c, k);
      }
    }
  }
  return out;
}

Tensor solve_lower_unit(const Tensor& lower, const Tensor& rhs) {
  const std::size_t n = lower.rows();
  Tensor x = rhs;
  for (std::size_t i = 0; i < n; ++i) {
    double s = x[i];
    for (std::size_t j = 0; j < i; ++j) s -= lower.at(i, j) * x[j];
    x[i] = s;
  }
  return x;
}

Tensor solve_upper(const Tensor& upper, const Tensor& rhs) {
  const std::size_t n = upper.rows();
  Tensor x = rhs;
  for (std::size_t i = n; i-- > 0;) {
    double s = x[i];
    for (std::size_t j = i + 1; j < n; ++j) s -= upper.at(i, j) * x[j];
    const double d = upper.at(i, i);
    if (std::abs(d) <= kSingularPivot) {
      throw SingularMatrixError("solve_upper: zero diagonal");
    }
    x[i] = s / d;
  }
  return x;
}

}  // namespace raregen::numerics
