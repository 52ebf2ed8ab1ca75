#pragma once

#include <vector>

#include "resbm/tensor.hpp"

namespace resbm {

/// Thin SVD a = U * diag(S) * V^T with r = min(m, n).
struct Svd {
  Tensor u;                 // m x r, orthonormal columns
  std::vector<double> s;    // r values, descending, >= 0
  Tensor v;                 // n x r, orthonormal columns
};

/// One-sided (Hestenes) Jacobi SVD. Columns of a working copy are rotated
/// pairwise until all pairs are orthogonal to machine precision; singular
/// values are the final column norms. Columns belonging to zero singular
/// values are completed to an orthonormal set, so U and V are always
/// orthonormal. Throws NumericError on non-finite input.
Svd svd(const Tensor& a);

/// Singular values only.
std::vector<double> singular_values(const Tensor& a);

/// Frobenius norm of a tensor's data.
double frobenius_norm(const Tensor& a);

/// Plain (untaped) matrix helpers used by the optimizers and analyses.
Tensor transpose(const Tensor& a);
Tensor identity_matrix(std::size_t n);

}  // namespace resbm
