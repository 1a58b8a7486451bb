#include "dpq/calib.hpp"

#include "dpq/errors.hpp"
#include "dpq/linalg.hpp"

#include <cmath>

namespace dpq {

HessianState HessianState::init(std::size_t dim) {
    HessianState s;
    s.dim = dim;
    s.h = Matrix(dim, dim, 0.0);
    return s;
}

bool HessianState::has_dead_features() const {
    for (auto d : dead_features)
        if (d) return true;
    return false;
}

void accumulate_hessian(HessianState& state, const Matrix& x) {
    if (x.rows != state.dim)
        throw ValidationError("accumulate_hessian: activation rows != hessian dim");
    if (state.finalized)
        throw ValidationError("accumulate_hessian: state already finalized");
    // h += x x^T, lower triangle then mirror.
    for (std::size_t i = 0; i < state.dim; ++i) {
        const double* xi = x.row_ptr(i);
        for (std::size_t j = 0; j <= i; ++j) {
            const double* xj = x.row_ptr(j);
            double sum = 0.0;
            for (std::size_t k = 0; k < x.cols; ++k)
                sum += xi[k] * xj[k];
            state.h(i, j) += sum;
            if (i != j) state.h(j, i) = state.h(i, j);
        }
    }
    state.sample_count += x.cols;
}

void merge_hessians(HessianState& into, const HessianState& shard) {
    if (into.dim != shard.dim)
        throw ValidationError("merge_hessians: dimension mismatch");
    if (into.finalized || shard.finalized)
        throw ValidationError("merge_hessians: cannot merge finalized states");
    for (std::size_t i = 0; i < into.h.size(); ++i)
        into.h.data[i] += shard.h.data[i];
    into.sample_count += shard.sample_count;
}

HessianState finalize_hessian(const HessianState& state, double damp_factor) {
    if (damp_factor < 0.0)
        throw ValidationError("finalize_hessian: damp factor must be >= 0");
    HessianState out = state;
    out.damp_factor = damp_factor;
    out.dead_features.assign(out.dim, 0);

    double diag_sum = 0.0;
    std::size_t live = 0;
    for (std::size_t i = 0; i < out.dim; ++i) {
        const double d = out.h(i, i);
        if (d == 0.0) {
            out.dead_features[i] = 1;
        } else {
            diag_sum += d;
            ++live;
        }
    }

    Matrix damped = out.h;
    if (live == 0) {
        damped = identity_matrix(out.dim);
    } else {
        const double mean_diag = diag_sum / double(live);
        for (std::size_t i = 0; i < out.dim; ++i) {
            if (out.dead_features[i]) {
                for (std::size_t j = 0; j < out.dim; ++j) {
                    damped(i, j) = 0.0;
                    damped(j, i) = 0.0;
                }
                damped(i, i) = mean_diag;
            }
            damped(i, i) += damp_factor * mean_diag;
        }
    }

    out.inv_factor = upper_factor_of_inverse(damped);
    out.finalized = true;
    return out;
}

Fp8TensorScale calibrate_activation_scale(std::span<const Matrix> batches,
                                          const Fp8Format& fmt, bool pow2) {
    if (batches.empty())
        throw ValidationError("calibrate_activation_scale: empty calibration set");
    double amax = 0.0;
    for (const Matrix& b : batches) {
        if (!all_finite(b))
            throw ValidationError("calibrate_activation_scale: non-finite activations");
        amax = std::max(amax, max_abs(b));
    }
    double s = amax / fmt.max_magnitude;
    if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
    if (pow2) s = pow2_ceil(s);

    Fp8TensorScale out;
    out.granularity = ScaleGranularity::per_tensor;
    out.pow2_rounded = pow2;
    out.values = {s};
    return out;
}

} // namespace dpq
