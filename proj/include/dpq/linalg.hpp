#pragma once

#include "dpq/matrix.hpp"

namespace dpq {

/// In-place lower Cholesky factorization of a symmetric positive definite
/// matrix; the strict upper triangle is zeroed. Throws NumericalError when
/// the matrix is not positive definite.
void cholesky_lower_inplace(Matrix& a);

/// Inverse of L * L^T given its lower Cholesky factor.
Matrix spd_inverse_from_lower(const Matrix& lower);

/// Upper-triangular U with U^T * U = h^-1, for symmetric positive definite h.
Matrix upper_factor_of_inverse(const Matrix& h);

} // namespace dpq
