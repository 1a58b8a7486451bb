#pragma once

#include "dpq/matrix.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dpq {

/// Accumulated layer Hessian X * X^T over calibration activations, plus the
/// dampened-inverse Cholesky factor once finalized. The factor is upper
/// triangular with inv_factor^T * inv_factor = (H + damp * mean(diag H) * I)^-1.
struct HessianState {
    std::size_t dim = 0;
    Matrix h;
    std::uint64_t sample_count = 0;
    double damp_factor = 0.01;
    bool finalized = false;
    Matrix inv_factor;
    std::vector<std::uint8_t> dead_features; // zero diagonal before repair

    static HessianState init(std::size_t dim);
    bool has_dead_features() const;
};

/// h += x * x^T where x is d_in x n (columns are samples). Order-independent
/// up to floating-point associativity; shards may be accumulated separately
/// and merged with merge_hessians.
void accumulate_hessian(HessianState& state, const Matrix& x);

void merge_hessians(HessianState& into, const HessianState& shard);

/// Dampens the accumulated Hessian and computes the Cholesky factor of its
/// inverse. Features that never activated (zero diagonal) get their diagonal
/// repaired to the mean so the factorization exists; their factor rows carry
/// no cross terms, so they receive plain rounding with no error broadcast
/// downstream. An all-zero diagonal degenerates to the identity.
HessianState finalize_hessian(const HessianState& state, double damp_factor);

/// Static activation scale: running max|X| over batches divided by the grid
/// maximum, with an optional power-of-two ceiling.
Fp8TensorScale calibrate_activation_scale(std::span<const Matrix> batches,
                                          const Fp8Format& fmt, bool pow2);

/// Per-layer static activation scales (s_x).
using ActivationScaleSet = std::map<std::string, Fp8TensorScale>;

} // namespace dpq
