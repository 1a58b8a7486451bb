#pragma once

#include <vector>

namespace dpq {

/// E4M3 flavors. `ieee_reserved` keeps the whole top exponent for NaN/Inf
/// (max magnitude 240, Gaudi-2 behavior); `extended` frees the top exponent
/// for normal numbers except the all-ones mantissa (max magnitude 448,
/// Gaudi-3 / OCP behavior). `unbounded` is a diagnostic grid on which
/// rounding is the identity; it never appears in stored artifacts.
enum class Fp8Variant { ieee_reserved, extended, unbounded };

struct Fp8Format {
    int exponent_bits = 4;
    int mantissa_bits = 3;
    double max_magnitude = 240.0;
    Fp8Variant variant = Fp8Variant::ieee_reserved;
    bool subnormal_support = true;

    static Fp8Format gaudi2();    // ieee_reserved, +-240
    static Fp8Format gaudi3();    // extended, +-448
    static Fp8Format unbounded(); // identity rounding, test/diagnostic only
};

Fp8Format fp8_format_for(Fp8Variant variant);

/// Round-half-to-even to an integer value, returned as a double.
double round_half_even(double x);

/// Nearest E4M3 grid member, ties to even mantissa. Inputs beyond the grid
/// maximum saturate to +-max_magnitude. Throws ValidationError on non-finite
/// input.
double round_to_fp8(double x, const Fp8Format& fmt);

/// Nearest BF16 value (8 exponent bits, 7 mantissa bits), ties to even,
/// saturating at the BF16 maximum. Throws ValidationError on non-finite
/// input.
double round_to_bf16(double x);

/// Every finite representable value of the format, strictly increasing.
/// Symmetric about zero, contains zero exactly once.
std::vector<double> enumerate_grid(const Fp8Format& fmt);

} // namespace dpq
