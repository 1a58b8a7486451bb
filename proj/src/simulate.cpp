#include "dpq/simulate.hpp"

#include "dpq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dpq {

std::string to_string(SimMode mode) {
    switch (mode) {
    case SimMode::bypass: return "bypass";
    case SimMode::bf16: return "bf16";
    case SimMode::w8a8: return "w8a8";
    case SimMode::w4a16: return "w4a16";
    case SimMode::w4a8: return "w4a8";
    }
    return "bypass";
}

SimMode sim_mode_from_string(const std::string& s) {
    if (s == "bypass") return SimMode::bypass;
    if (s == "bf16") return SimMode::bf16;
    if (s == "w8a8") return SimMode::w8a8;
    if (s == "w4a16") return SimMode::w4a16;
    if (s == "w4a8") return SimMode::w4a8;
    throw ValidationError("unknown simulation mode: " + s);
}

Matrix reference_matmul(const Matrix& w, const Matrix& x) {
    if (w.cols != x.rows)
        throw ValidationError("reference_matmul: shape mismatch");
    return matmul(w, x);
}

namespace {

Matrix round_all_bf16(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data) v = round_to_bf16(v);
    return out;
}

// Values past this point cannot be reached by nearest rounding; the clamp
// truly loses information. Keeps exact-range inputs (eval max == calibration
// max, where x/s lands within one ulp of the grid maximum) out of the count.
double saturation_threshold(const Fp8Format& fmt) {
    if (!std::isfinite(fmt.max_magnitude))
        return std::numeric_limits<double>::infinity();
    int e2 = 0;
    std::frexp(fmt.max_magnitude, &e2);
    return fmt.max_magnitude + 0.5 * std::ldexp(1.0, e2 - 1 - fmt.mantissa_bits);
}

// FP8 grid image of x / s; the scale stays factored out for the matmul.
Matrix fp8_grid_values(const Matrix& x, const Fp8TensorScale& s,
                       const Fp8Format& fmt, std::size_t* saturated) {
    Matrix out(x.rows, x.cols);
    const double sat_limit = saturation_threshold(fmt);
    std::size_t clamped = 0;
    for (std::size_t r = 0; r < x.rows; ++r) {
        const double sr = s.for_row(r);
        const double* src = x.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (std::size_t c = 0; c < x.cols; ++c) {
            const double scaled = src[c] / sr;
            if (std::fabs(scaled) > sat_limit) ++clamped;
            dst[c] = round_to_fp8(scaled, fmt);
        }
    }
    if (saturated != nullptr) *saturated += clamped;
    return out;
}

} // namespace

Matrix quantize_activations(const Matrix& x, const Fp8TensorScale& s,
                            const Fp8Format& fmt, std::size_t* saturated) {
    for (double v : s.values)
        if (!(v > 0.0))
            throw ValidationError("quantize_activations: scale must be positive");
    Matrix out = fp8_grid_values(x, s, fmt, saturated);
    for (std::size_t r = 0; r < out.rows; ++r) {
        const double sr = s.for_row(r);
        double* row = out.row_ptr(r);
        for (std::size_t c = 0; c < out.cols; ++c) row[c] *= sr;
    }
    return out;
}

Matrix simulate_matmul(SimMode mode, const Matrix& x, const SimInputs& in) {
    switch (mode) {
    case SimMode::bypass: {
        if (in.weights == nullptr)
            throw ValidationError("simulate_matmul: bypass needs weights");
        return round_all_bf16(reference_matmul(*in.weights, x));
    }
    case SimMode::bf16: {
        if (in.weights == nullptr)
            throw ValidationError("simulate_matmul: bf16 needs weights");
        return round_all_bf16(matmul(round_all_bf16(*in.weights), round_all_bf16(x)));
    }
    case SimMode::w8a8: {
        if (in.weights == nullptr)
            throw ValidationError("simulate_matmul: w8a8 needs weights");
        const Fp8TensorScale* sw = in.weight_scale;
        if (sw == nullptr && in.layer != nullptr) sw = &in.layer->packed.fp8_scale;
        if (sw == nullptr || in.act_scale == nullptr)
            throw ValidationError("simulate_matmul: w8a8 needs weight and activation scales");
        const Matrix wg = fp8_grid_values(*in.weights, *sw, in.fmt, nullptr);
        const Matrix xg = fp8_grid_values(x, *in.act_scale, in.fmt, in.act_saturated);
        Matrix y = matmul(wg, xg);
        const double sx = in.act_scale->scalar();
        for (std::size_t r = 0; r < y.rows; ++r) {
            const double f = sw->for_row(r) * sx;
            double* row = y.row_ptr(r);
            for (std::size_t c = 0; c < y.cols; ++c)
                row[c] = round_to_bf16(row[c] * f);
        }
        return y;
    }
    case SimMode::w4a16: {
        if (in.layer == nullptr)
            throw ValidationError("simulate_matmul: w4a16 needs a quantized layer");
        return round_all_bf16(matmul(dequantize_weights_bf16(*in.layer), round_all_bf16(x)));
    }
    case SimMode::w4a8: {
        if (in.layer == nullptr)
            throw ValidationError("simulate_matmul: w4a8 needs a quantized layer");
        if (in.act_scale == nullptr)
            throw ValidationError("simulate_matmul: w4a8 needs an activation scale");
        const Matrix w8 = dequantize_weights_fp8domain(*in.layer, in.redequant);
        const Matrix xg = fp8_grid_values(x, *in.act_scale, in.fmt, in.act_saturated);
        Matrix y = matmul(w8, xg);
        const double sx = in.act_scale->scalar();
        const Fp8TensorScale& sw = in.layer->packed.fp8_scale;
        for (std::size_t r = 0; r < y.rows; ++r) {
            const double f = sw.for_row(r) * sx;
            double* row = y.row_ptr(r);
            for (std::size_t c = 0; c < y.cols; ++c)
                row[c] = round_to_bf16(row[c] * f);
        }
        return y;
    }
    }
    throw ValidationError("simulate_matmul: unknown mode");
}

void EvalReport::add(LayerEvalRecord rec) { records.push_back(std::move(rec)); }

void EvalReport::finalize_aggregates() {
    aggregates.clear();
    std::map<std::string, std::vector<LayerEvalRecord>> by_mode;
    for (const auto& r : records) by_mode[r.mode].push_back(r);
    for (auto& [mode, recs] : by_mode) {
        std::vector<double> rel, mse, maxe, sat;
        for (const auto& r : recs) {
            rel.push_back(r.relative_output_error);
            mse.push_back(r.weight_mse);
            maxe.push_back(r.max_abs_error);
            sat.push_back(r.activation_saturation_rate);
        }
        aggregates[mode] = {
            {"median_relative_output_error", median(rel)},
            {"median_weight_mse", median(mse)},
            {"median_max_abs_error", median(maxe)},
            {"median_activation_saturation_rate", median(sat)},
        };
    }
}

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2]
                      : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

Matrix mode_weight_reconstruction(SimMode mode, const Matrix& w, const SimInputs& in) {
    switch (mode) {
    case SimMode::bypass:
        return w;
    case SimMode::bf16:
        return round_all_bf16(w);
    case SimMode::w8a8: {
        const Fp8TensorScale* sw = in.weight_scale;
        if (sw == nullptr && in.layer != nullptr) sw = &in.layer->packed.fp8_scale;
        if (sw == nullptr)
            throw ValidationError("evaluate_layer: w8a8 needs a weight scale");
        Matrix g = fp8_grid_values(w, *sw, in.fmt, nullptr);
        for (std::size_t r = 0; r < g.rows; ++r) {
            const double sr = sw->for_row(r);
            double* row = g.row_ptr(r);
            for (std::size_t c = 0; c < g.cols; ++c) row[c] *= sr;
        }
        return g;
    }
    case SimMode::w4a16:
        return dequantize_weights_bf16(*in.layer);
    case SimMode::w4a8: {
        Matrix g = dequantize_weights_fp8domain(*in.layer, in.redequant);
        const Fp8TensorScale& sw = in.layer->packed.fp8_scale;
        for (std::size_t r = 0; r < g.rows; ++r) {
            const double sr = sw.for_row(r);
            double* row = g.row_ptr(r);
            for (std::size_t c = 0; c < g.cols; ++c) row[c] *= sr;
        }
        return g;
    }
    }
    throw ValidationError("evaluate_layer: unknown mode");
}

} // namespace

void evaluate_layer(EvalReport& report, const std::string& layer_name,
                    const Matrix& w, const Matrix& x_eval,
                    std::span<const SimMode> modes, const SimInputs& in) {
    if (x_eval.empty())
        throw ValidationError("evaluate_layer: empty evaluation activations");
    const Matrix y_ref = reference_matmul(w, x_eval);
    const double ref_energy = frobenius_sq(y_ref);

    for (SimMode mode : modes) {
        SimInputs mode_in = in;
        mode_in.weights = &w;
        std::size_t saturated = 0;
        mode_in.act_saturated = &saturated;
        const Matrix y = simulate_matmul(mode, x_eval, mode_in);

        double err_energy = 0.0, max_err = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = y_ref.data[i] - y.data[i];
            err_energy += d * d;
            max_err = std::max(max_err, std::fabs(d));
        }

        const Matrix wq = mode_weight_reconstruction(mode, w, mode_in);
        double wmse = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = w.data[i] - wq.data[i];
            wmse += d * d;
        }
        wmse /= double(w.size());

        LayerEvalRecord rec;
        rec.layer = layer_name;
        rec.mode = to_string(mode);
        rec.relative_output_error =
            ref_energy > 0.0 ? err_energy / ref_energy : (err_energy > 0.0 ? 1.0 : 0.0);
        rec.weight_mse = wmse;
        rec.max_abs_error = max_err;
        rec.activation_saturation_rate =
            x_eval.size() > 0 ? double(saturated) / double(x_eval.size()) : 0.0;
        report.add(rec);
    }
}

} // namespace dpq
