#pragma once

#include <vector>

#include "raregen/tensor.hpp"

namespace raregen::numerics {

struct LogDetResult {
  int sign;        // +1 or -1
  double log_abs;  // log |det|
};

// log|det| via LU with partial pivoting. Pivot magnitudes below 1e-12 are
// treated as singular.
LogDetResult lu_logdet(const Tensor& matrix);

struct LuFactors {
  std::vector<std::size_t> perm;  // row permutation: A[perm[i], :] = (L U)[i, :]
  Tensor lower;                   // unit lower triangular (diagonal implicit)
  Tensor upper;
};

LuFactors lu_factor(const Tensor& matrix);

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
Tensor cholesky(const Tensor& matrix);

// Symmetric PSD square root: returns S with S S ~= input. Eigenvalues in
// [-1e-10, 0) are clamped to zero; asymmetry beyond 1e-10 is rejected.
Tensor psd_sqrt(const Tensor& matrix);

// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
struct SymmetricEigen {
  Tensor eigenvalues;   // length n
  Tensor eigenvectors;  // columns are eigenvectors
};
SymmetricEigen symmetric_eigen(const Tensor& matrix);

Tensor solve_lower_unit(const Tensor& lower, const Tensor& rhs);
Tensor solve_upper(const Tensor& upper, const Tensor& rhs);

}  // namespace raregen::numerics
