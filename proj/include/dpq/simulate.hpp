#pragma once

#include "dpq/matrix.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"
#include "dpq/quantizer.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace dpq {

/// Forward-path precision modes. `bypass` is a diagnostic path that only
/// rounds the output to BF16.
enum class SimMode { bypass, bf16, w8a8, w4a16, w4a8 };

std::string to_string(SimMode mode);
SimMode sim_mode_from_string(const std::string& s);

/// Wide-precision product, no rounding anywhere.
Matrix reference_matmul(const Matrix& w, const Matrix& x);

/// round_to_fp8(X / s) * s per element; `saturated` counts elements clamped
/// at the grid maximum.
Matrix quantize_activations(const Matrix& x, const Fp8TensorScale& s,
                            const Fp8Format& fmt,
                            std::size_t* saturated = nullptr);

struct SimInputs {
    const Matrix* weights = nullptr;       // original BF16-domain weights
    const QuantizedLayer* layer = nullptr; // required for w4a16 / w4a8
    const Fp8TensorScale* weight_scale = nullptr; // w8a8 (defaults to layer's)
    const Fp8TensorScale* act_scale = nullptr;    // w8a8 / w4a8
    Fp8Format fmt = Fp8Format::gaudi2();
    bool redequant = false;                // w4a8 dequant grid snap
    std::size_t* act_saturated = nullptr;  // out: clamped activation count
};

/// Simulated layer forward pass: wide-precision accumulation everywhere,
/// BF16 output rounding, per-mode operand grids.
Matrix simulate_matmul(SimMode mode, const Matrix& x, const SimInputs& in);

struct LayerEvalRecord {
    std::string layer;
    std::string mode;
    double relative_output_error = 0.0; // |WX - Y|_F^2 / |WX|_F^2
    double weight_mse = 0.0;
    double max_abs_error = 0.0;
    double activation_saturation_rate = 0.0;
};

struct EvalReport {
    std::vector<LayerEvalRecord> records;
    /// Per-mode medians over layers, keyed by mode then metric name.
    std::map<std::string, std::map<std::string, double>> aggregates;

    void add(LayerEvalRecord rec);
    void finalize_aggregates();
};

/// Runs the requested modes for one layer and appends records to `report`.
void evaluate_layer(EvalReport& report, const std::string& layer_name,
                    const Matrix& w, const Matrix& x_eval,
                    std::span<const SimMode> modes, const SimInputs& in);

double median(std::vector<double> values);

} // namespace dpq
