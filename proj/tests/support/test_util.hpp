#pragma once

// Shared helpers and independent oracles for unit and acceptance tests.
// The oracles re-derive expected values from first principles (dense
// inverses, elementwise quantization), separate from the blocked
// Cholesky implementation they check.

#include "dpq/calib.hpp"
#include "dpq/linalg.hpp"
#include "dpq/matrix.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"
#include "dpq/quantizer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace dpq::test {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Matrix random_gaussian(std::mt19937_64& g, std::size_t rows,
                              std::size_t cols, double sigma = 1.0) {
    std::normal_distribution<double> dist(0.0, sigma);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(g);
    return m;
}

// Activations with an AR(rho) correlation structure across features
// (rows), optionally scaled per feature.
inline Matrix correlated_activations(std::mt19937_64& g, std::size_t d,
                                     std::size_t n, double rho,
                                     const std::vector<double>& feature_scale = {}) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix x(d, n);
    const double mix = std::sqrt(1.0 - rho * rho);
    for (std::size_t c = 0; c < n; ++c) {
        double prev = dist(g);
        x(0, c) = prev;
        for (std::size_t r = 1; r < d; ++r) {
            prev = rho * prev + mix * dist(g);
            x(r, c) = prev;
        }
    }
    if (!feature_scale.empty()) {
        for (std::size_t r = 0; r < d; ++r) {
            double* row = x.row_ptr(r);
            for (std::size_t c = 0; c < n; ++c) row[c] *= feature_scale[r];
        }
    }
    return x;
}

inline HessianState finalized_hessian_from(const Matrix& x, double damp = 0.01) {
    HessianState s = HessianState::init(x.rows);
    accumulate_hessian(s, x);
    return finalize_hessian(s, damp);
}

inline HessianState identity_hessian(std::size_t dim, double damp = 0.01) {
    HessianState s = HessianState::init(dim);
    s.h = identity_matrix(dim);
    s.sample_count = 1;
    return finalize_hessian(s, damp);
}

// Independent dense inverse via Gauss-Jordan elimination with partial
// pivoting.
inline Matrix gauss_jordan_inverse(Matrix a) {
    const std::size_t n = a.rows;
    if (a.cols != n) throw std::invalid_argument("inverse needs a square matrix");
    Matrix inv = identity_matrix(n);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a(r, col)) > std::fabs(a(pivot, col))) pivot = r;
        if (a(pivot, col) == 0.0) throw std::invalid_argument("singular matrix");
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) {
                std::swap(a(pivot, c), a(col, c));
                std::swap(inv(pivot, c), inv(col, c));
            }
        }
        const double d = a(col, col);
        for (std::size_t c = 0; c < n; ++c) {
            a(col, c) /= d;
            inv(col, c) /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a(r, col);
            if (f == 0.0) continue;
            for (std::size_t c = 0; c < n; ++c) {
                a(r, c) -= f * a(col, c);
                inv(r, c) -= f * inv(col, c);
            }
        }
    }
    return inv;
}

inline double relative_fro_diff(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        num += d * d;
        den += b.data[i] * b.data[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Dampening replica used by the reference paths below (no dead features).
inline Matrix dampened_copy(const Matrix& h, double damp) {
    Matrix out = h;
    double mean = 0.0;
    for (std::size_t i = 0; i < h.rows; ++i) mean += h(i, i);
    mean /= double(h.rows);
    for (std::size_t i = 0; i < h.rows; ++i) out(i, i) += damp * mean;
    return out;
}

struct ElementwiseRtnResult {
    std::vector<int> nibbles;                 // rows x cols
    std::vector<Int4GroupParams> params;      // rows x n_groups
    Fp8TensorScale fp8_scale;
    Matrix recon_bf16;
};

// Elementwise two-level (BF16 -> FP8 -> INT4) round-to-nearest oracle.
// Plain range params, no scale search, no reordering, no compensation.
inline ElementwiseRtnResult elementwise_two_level_rtn(const Matrix& w,
                                                      const Fp8Format& fmt,
                                                      std::size_t group_size,
                                                      bool redequant = false) {
    ElementwiseRtnResult out;
    out.fp8_scale = compute_fp8_scale(w, fmt, ScaleGranularity::per_tensor, false);
    const double sw = out.fp8_scale.scalar();
    const std::size_t n_groups = (w.cols + group_size - 1) / group_size;
    out.nibbles.assign(w.rows * w.cols, 0);
    out.params.resize(w.rows * n_groups);
    out.recon_bf16 = Matrix(w.rows, w.cols);
    for (std::size_t r = 0; r < w.rows; ++r) {
        for (std::size_t g = 0; g < n_groups; ++g) {
            const std::size_t begin = g * group_size;
            const std::size_t end = std::min(begin + group_size, w.cols);
            std::vector<double> vals;
            for (std::size_t c = begin; c < end; ++c)
                vals.push_back(round_to_fp8(w(r, c) / sw, fmt));
            Int4GroupParams p = compute_int4_group_params(vals);
            p.row_index = int(r);
            p.group_index = int(g);
            out.params[r * n_groups + g] = p;
            for (std::size_t c = begin; c < end; ++c) {
                const int q = quantize_int4(vals[c - begin], p);
                out.nibbles[r * w.cols + c] = q;
                double w8hat = dequantize_int4_to_fp8domain(q, p);
                if (redequant) w8hat = round_to_fp8(w8hat, fmt);
                out.recon_bf16(r, c) = dequantize_fp8_to_bf16domain(w8hat, sw);
            }
        }
    }
    return out;
}

struct DenseReferenceResult {
    std::vector<int> nibbles;
    Matrix recon_bf16;
    Matrix compensated; // working matrix after all updates
};

// Straight-line reference quantizer: per-column error compensation using
// explicit inverses of the trailing dampened-Hessian submatrices. No
// blocking, no Cholesky, no reordering; per-tensor scale, plain group
// params.
inline DenseReferenceResult dense_reference_quantize(const Matrix& w,
                                                     const Matrix& h_raw,
                                                     std::size_t group_size,
                                                     double damp,
                                                     const Fp8Format& fmt,
                                                     bool redequant = false) {
    const std::size_t rows = w.rows, cols = w.cols;
    const Matrix hd = dampened_copy(h_raw, damp);
    const Fp8TensorScale swt =
        compute_fp8_scale(w, fmt, ScaleGranularity::per_tensor, false);
    const double sw = swt.scalar();

    Matrix a = w;
    const std::size_t n_groups = (cols + group_size - 1) / group_size;
    std::vector<Int4GroupParams> params(rows * n_groups);
    DenseReferenceResult out;
    out.nibbles.assign(rows * cols, 0);
    out.recon_bf16 = Matrix(rows, cols);

    for (std::size_t q = 0; q < cols; ++q) {
        if (q % group_size == 0) {
            const std::size_t g = q / group_size;
            const std::size_t end = std::min(q + group_size, cols);
            for (std::size_t r = 0; r < rows; ++r) {
                std::vector<double> vals;
                for (std::size_t c = q; c < end; ++c)
                    vals.push_back(round_to_fp8(a(r, c) / sw, fmt));
                params[r * n_groups + g] = compute_int4_group_params(vals);
            }
        }
        // Inverse of the trailing submatrix H_d[q:, q:].
        const std::size_t rem = cols - q;
        Matrix hf(rem, rem);
        for (std::size_t i = 0; i < rem; ++i)
            for (std::size_t j = 0; j < rem; ++j)
                hf(i, j) = hd(q + i, q + j);
        const Matrix hf_inv = gauss_jordan_inverse(hf);

        const std::size_t g = q / group_size;
        for (std::size_t r = 0; r < rows; ++r) {
            const Int4GroupParams& p = params[r * n_groups + g];
            const double w16 = a(r, q);
            const double w8 = round_to_fp8(w16 / sw, fmt);
            const int q4 = quantize_int4(w8, p);
            double w8hat = dequantize_int4_to_fp8domain(q4, p);
            if (redequant) w8hat = round_to_fp8(w8hat, fmt);
            const double w16hat = dequantize_fp8_to_bf16domain(w8hat, sw);
            const double err = w16 - w16hat;
            out.nibbles[r * cols + q] = q4;
            out.recon_bf16(r, q) = w16hat;
            for (std::size_t v = q + 1; v < cols; ++v)
                a(r, v) -= err / hf_inv(0, 0) * hf_inv(0, v - q);
            a(r, q) = w16hat;
        }
    }
    out.compensated = std::move(a);
    return out;
}

} // namespace dpq::test
