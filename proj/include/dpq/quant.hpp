#pragma once

#include "dpq/matrix.hpp"
#include "dpq/numerics.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dpq {

inline constexpr int kInt4QMax = 15;

/// Per-(row, group) scale and zero-point for unsigned asymmetric INT4
/// quantization of FP8-domain values.
struct Int4GroupParams {
    double scale = 1.0;
    int zero_point = 0;
    int group_index = 0;
    int row_index = 0;
};

enum class ScaleGranularity { per_tensor, per_channel };

/// Tensor-level scale mapping BF16-domain values into the FP8 dynamic range.
/// Holds one value for per_tensor granularity, one per output channel (row)
/// otherwise.
struct Fp8TensorScale {
    ScaleGranularity granularity = ScaleGranularity::per_tensor;
    bool pow2_rounded = false;
    std::vector<double> values{1.0};

    double scalar() const { return values.at(0); }
    double for_row(std::size_t r) const {
        return granularity == ScaleGranularity::per_tensor ? values[0] : values.at(r);
    }
};

/// Row-major nibble-packed INT4 weights plus their quantization parameters.
/// Even column indices occupy the low nibble, odd columns the high nibble;
/// rows with odd length pad the final high nibble with zero.
struct PackedInt4Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = 128;
    std::vector<std::uint8_t> data;       // rows * ceil(cols/2)
    std::vector<Int4GroupParams> params;  // rows * ceil(cols/group_size), row-major
    Fp8TensorScale fp8_scale;

    std::size_t bytes_per_row() const { return (cols + 1) / 2; }
    std::size_t groups_per_row() const {
        return group_size == 0 ? 0 : (cols + group_size - 1) / group_size;
    }
    int nibble(std::size_t row, std::size_t col) const {
        const std::uint8_t byte = data[row * bytes_per_row() + col / 2];
        return (col % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    }
    const Int4GroupParams& param(std::size_t row, std::size_t group) const {
        return params[row * groups_per_row() + group];
    }
};

/// Smallest power of two >= x (x > 0).
double pow2_ceil(double x);

/// max|values| / max_magnitude, per tensor or per output channel (row).
/// An all-zero slice (and the unbounded diagnostic grid) falls back to
/// scale 1. With pow2 the scale is rounded up to the next power of two.
Fp8TensorScale compute_fp8_scale(const Matrix& values, const Fp8Format& fmt,
                                 ScaleGranularity granularity, bool pow2);

/// Group params from the value range: scale = (max - min) / 15,
/// zero_point = clamp(round(-min/scale), 0, 15). A zero-range group gets
/// scale 1 with the zero-point reproducing -min where storable.
Int4GroupParams compute_int4_group_params(std::span<const double> group);
Int4GroupParams int4_params_from_range(double lo, double hi);

int quantize_int4(double w8, const Int4GroupParams& p);
double dequantize_int4_to_fp8domain(int q, const Int4GroupParams& p);

/// w8hat * scale, rounded onto the BF16 grid.
double dequantize_fp8_to_bf16domain(double w8hat, double scale);

std::vector<std::uint8_t> pack_nibbles(std::span<const int> values,
                                       std::size_t rows, std::size_t cols);
std::vector<int> unpack_nibbles(std::span<const std::uint8_t> bytes,
                                std::size_t rows, std::size_t cols);

} // namespace dpq
