#include "dpq/linalg.hpp"

#include "dpq/errors.hpp"

#include <cmath>
#include <vector>

namespace dpq {

void cholesky_lower_inplace(Matrix& a) {
    const std::size_t n = a.rows;
    if (a.cols != n) throw ValidationError("cholesky: matrix must be square");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = a(i, j);
            for (std::size_t k = 0; k < j; ++k)
                sum -= a(i, k) * a(j, k);
            if (i == j) {
                if (sum <= 0.0 || !std::isfinite(sum))
                    throw NumericalError("cholesky: matrix is not positive definite");
                a(i, i) = std::sqrt(sum);
            } else {
                a(i, j) = sum / a(j, j);
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            a(i, j) = 0.0;
}

Matrix spd_inverse_from_lower(const Matrix& lower) {
    const std::size_t n = lower.rows;
    Matrix inv(n, n, 0.0);
    std::vector<double> y(n), x(n);
    // Solve (L L^T) x = e_i column by column.
    for (std::size_t col = 0; col < n; ++col) {
        for (std::size_t i = 0; i < n; ++i) {
            double sum = (i == col) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k)
                sum -= lower(i, k) * y[k];
            y[i] = sum / lower(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double sum = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k)
                sum -= lower(k, ii) * x[k];
            x[ii] = sum / lower(ii, ii);
        }
        for (std::size_t i = 0; i < n; ++i)
            inv(i, col) = x[i];
    }
    // Symmetrize away the last bits of solver asymmetry.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = v;
            inv(j, i) = v;
        }
    return inv;
}

Matrix upper_factor_of_inverse(const Matrix& h) {
    Matrix chol = h;
    cholesky_lower_inplace(chol);
    Matrix inv = spd_inverse_from_lower(chol);
    cholesky_lower_inplace(inv);
    return transpose(inv); // inv now holds L with L L^T = h^-1
}

} // namespace dpq
