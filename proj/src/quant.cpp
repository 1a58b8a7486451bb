#include "dpq/quant.hpp"

#include "dpq/errors.hpp"

#include <algorithm>
#include <cmath>

namespace dpq {

double pow2_ceil(double x) {
    if (!(x > 0.0)) throw ValidationError("pow2_ceil: input must be positive");
    int e2 = 0;
    const double m = std::frexp(x, &e2); // x = m * 2^e2, m in [0.5, 1)
    return m == 0.5 ? x : std::ldexp(1.0, e2);
}

Fp8TensorScale compute_fp8_scale(const Matrix& values, const Fp8Format& fmt,
                                 ScaleGranularity granularity, bool pow2) {
    if (values.empty())
        throw ValidationError("compute_fp8_scale: empty tensor");
    if (!all_finite(values))
        throw ValidationError("compute_fp8_scale: non-finite entries");

    auto scale_from_max = [&](double amax) {
        double s = amax / fmt.max_magnitude;
        if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
        return pow2 ? pow2_ceil(s) : s;
    };

    Fp8TensorScale out;
    out.granularity = granularity;
    out.pow2_rounded = pow2;
    if (granularity == ScaleGranularity::per_tensor) {
        out.values = {scale_from_max(max_abs(values))};
    } else {
        out.values.clear();
        out.values.reserve(values.rows);
        for (std::size_t r = 0; r < values.rows; ++r) {
            double amax = 0.0;
            const double* row = values.row_ptr(r);
            for (std::size_t c = 0; c < values.cols; ++c)
                amax = std::max(amax, std::fabs(row[c]));
            out.values.push_back(scale_from_max(amax));
        }
    }
    return out;
}

Int4GroupParams int4_params_from_range(double lo, double hi) {
    if (!std::isfinite(lo) || !std::isfinite(hi))
        throw ValidationError("int4 group params: non-finite range");
    Int4GroupParams p;
    if (hi == lo) {
        p.scale = 1.0;
        p.zero_point = static_cast<int>(
            std::clamp(round_half_even(-lo), 0.0, double(kInt4QMax)));
        return p;
    }
    p.scale = (hi - lo) / kInt4QMax;
    p.zero_point = static_cast<int>(
        std::clamp(round_half_even(-lo / p.scale), 0.0, double(kInt4QMax)));
    return p;
}

Int4GroupParams compute_int4_group_params(std::span<const double> group) {
    if (group.empty())
        throw ValidationError("compute_int4_group_params: empty group");
    double lo = group[0], hi = group[0];
    for (double v : group) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return int4_params_from_range(lo, hi);
}

int quantize_int4(double w8, const Int4GroupParams& p) {
    const double q = round_half_even(w8 / p.scale + p.zero_point);
    return static_cast<int>(std::clamp(q, 0.0, double(kInt4QMax)));
}

double dequantize_int4_to_fp8domain(int q, const Int4GroupParams& p) {
    return (q - p.zero_point) * p.scale;
}

double dequantize_fp8_to_bf16domain(double w8hat, double scale) {
    return round_to_bf16(w8hat * scale);
}

std::vector<std::uint8_t> pack_nibbles(std::span<const int> values,
                                       std::size_t rows, std::size_t cols) {
    if (values.size() != rows * cols)
        throw ValidationError("pack_nibbles: value count does not match shape");
    const std::size_t bpr = (cols + 1) / 2;
    std::vector<std::uint8_t> out(rows * bpr, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const int v = values[r * cols + c];
            if (v < 0 || v > kInt4QMax)
                throw ValidationError("pack_nibbles: value out of [0,15]");
            std::uint8_t& byte = out[r * bpr + c / 2];
            if (c % 2 == 0)
                byte = static_cast<std::uint8_t>((byte & 0xF0) | v);
            else
                byte = static_cast<std::uint8_t>((byte & 0x0F) | (v << 4));
        }
    }
    return out;
}

std::vector<int> unpack_nibbles(std::span<const std::uint8_t> bytes,
                                std::size_t rows, std::size_t cols) {
    const std::size_t bpr = (cols + 1) / 2;
    if (bytes.size() != rows * bpr)
        throw ValidationError("unpack_nibbles: byte count does not match shape");
    std::vector<int> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::uint8_t byte = bytes[r * bpr + c / 2];
            out[r * cols + c] = (c % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
        }
    }
    return out;
}

} // namespace dpq
