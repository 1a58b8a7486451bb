#include "dpq/numerics.hpp"

#include "dpq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dpq {

namespace {

// Smallest normal exponent is 1 - bias = -6; subnormal step is 2^-9.
constexpr double kFp8MinNormal = 0x1p-6;
constexpr double kFp8SubnormalStep = 0x1p-9;

// (2 - 2^-7) * 2^127 = 255 * 2^120
constexpr double kBf16Max = 255.0 * 0x1p120;
constexpr double kBf16MinNormal = 0x1p-126;
constexpr double kBf16SubnormalStep = 0x1p-133;

} // namespace

Fp8Format Fp8Format::gaudi2() {
    return Fp8Format{4, 3, 240.0, Fp8Variant::ieee_reserved, true};
}

Fp8Format Fp8Format::gaudi3() {
    return Fp8Format{4, 3, 448.0, Fp8Variant::extended, true};
}

Fp8Format Fp8Format::unbounded() {
    return Fp8Format{4, 3, std::numeric_limits<double>::infinity(),
                     Fp8Variant::unbounded, true};
}

Fp8Format fp8_format_for(Fp8Variant variant) {
    switch (variant) {
    case Fp8Variant::ieee_reserved: return Fp8Format::gaudi2();
    case Fp8Variant::extended: return Fp8Format::gaudi3();
    case Fp8Variant::unbounded: return Fp8Format::unbounded();
    }
    throw ValidationError("unknown fp8 variant");
}

double round_half_even(double x) {
    const double f = std::floor(x);
    const double frac = x - f;
    if (frac > 0.5) return f + 1.0;
    if (frac < 0.5) return f;
    return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

double round_to_fp8(double x, const Fp8Format& fmt) {
    if (!std::isfinite(x))
        throw ValidationError("round_to_fp8: non-finite input");
    if (fmt.variant == Fp8Variant::unbounded) return x;

    const double limit = fmt.max_magnitude;
    if (x >= limit) return limit;
    if (x <= -limit) return -limit;
    if (x == 0.0) return 0.0;

    const double ax = std::fabs(x);
    double step;
    if (ax < kFp8MinNormal) {
        step = kFp8SubnormalStep;
    } else {
        int e2 = 0;
        std::frexp(ax, &e2); // ax = f * 2^e2, f in [0.5, 1)
        step = std::ldexp(1.0, e2 - 1 - fmt.mantissa_bits);
    }
    const double r = round_half_even(x / step) * step;
    return std::clamp(r, -limit, limit);
}

double round_to_bf16(double x) {
    if (!std::isfinite(x))
        throw ValidationError("round_to_bf16: non-finite input");
    if (x >= kBf16Max) return kBf16Max;
    if (x <= -kBf16Max) return -kBf16Max;
    if (x == 0.0) return 0.0;

    const double ax = std::fabs(x);
    double step;
    if (ax < kBf16MinNormal) {
        step = kBf16SubnormalStep;
    } else {
        int e2 = 0;
        std::frexp(ax, &e2);
        step = std::ldexp(1.0, e2 - 1 - 7);
    }
    return round_half_even(x / step) * step;
}

std::vector<double> enumerate_grid(const Fp8Format& fmt) {
    if (fmt.variant == Fp8Variant::unbounded)
        throw ValidationError("enumerate_grid: unbounded grid is not enumerable");

    std::vector<double> pos;
    for (int m = 1; m < 8; ++m)
        pos.push_back(m * kFp8SubnormalStep);
    const int max_exp_field = fmt.variant == Fp8Variant::extended ? 15 : 14;
    for (int e = 1; e <= max_exp_field; ++e) {
        for (int m = 0; m < 8; ++m) {
            // In the extended variant the all-ones byte encodes NaN.
            if (fmt.variant == Fp8Variant::extended && e == 15 && m == 7) continue;
            pos.push_back(std::ldexp(8 + m, e - 10)); // (1 + m/8) * 2^(e-7)
        }
    }

    std::vector<double> grid;
    grid.reserve(2 * pos.size() + 1);
    for (auto it = pos.rbegin(); it != pos.rend(); ++it) grid.push_back(-*it);
    grid.push_back(0.0);
    grid.insert(grid.end(), pos.begin(), pos.end());
    return grid;
}

} // namespace dpq
