#pragma once

#include "dpq/calib.hpp"
#include "dpq/gar.hpp"
#include "dpq/matrix.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace dpq {

/// `dual` compensates the combined FP8+INT4 reconstruction error (DPQ),
/// `int4_only` compensates only the integer-level error (naive GPTQ under a
/// W4A8 pipeline), `none` is plain round-to-nearest.
enum class CompensationMode { dual, int4_only, none };

std::string to_string(CompensationMode mode);
CompensationMode compensation_from_string(const std::string& s);

struct ScaleSearchOptions {
    int grid = 100;
    double max_shrink = 0.20;
};

struct QuantizerConfig {
    std::size_t group_size = 128;
    ReorderMode reorder_mode = ReorderMode::gar;
    bool scale_search = true;
    int search_grid = 100;
    double max_shrink = 0.20;
    double damp_factor = 0.01;
    Fp8Variant fp8_variant = Fp8Variant::ieee_reserved;
    ScaleGranularity fp8_granularity = ScaleGranularity::per_tensor;
    bool pow2_scales = false;
    CompensationMode compensation = CompensationMode::dual;
    std::size_t block_size = 128;
    bool redequant_round = false;
    GroupRankCriterion rank_criterion = GroupRankCriterion::max_diag;
    std::uint64_t seed = 0;

    void validate() const;
    Fp8Format fp8_format() const { return fp8_format_for(fp8_variant); }
    ScaleSearchOptions search_options() const { return {search_grid, max_shrink}; }
};

/// Quantized layer artifact: packed nibbles, group params and tensor scale
/// (inside `packed`), the permutation used while quantizing, and the squared
/// calibration-output error of the reconstruction. For reorder modes none
/// and gar, params align with original column groups and `permutation` is
/// only an audit record; for full reorder dequantization must consult it.
struct QuantizedLayer {
    std::string name;
    PackedInt4Tensor packed;
    ReorderMode reorder_mode = ReorderMode::none;
    GarPermutation permutation;
    double reconstruction_error = 0.0;
    QuantizerConfig config;

    std::size_t rows() const { return packed.rows; }
    std::size_t cols() const { return packed.cols; }
    /// Param slot covering original column `col` of `row`.
    const Int4GroupParams& param_for(std::size_t row, std::size_t col) const;
};

/// FP8-domain reconstruction (w4 - z) * s, optionally snapped back onto the
/// E4M3 grid as a Gaudi-style dequantizer would emit it.
Matrix dequantize_weights_fp8domain(const QuantizedLayer& layer, bool redequant);
/// BF16-domain reconstruction: the FP8-domain value scaled by the tensor
/// scale and rounded onto the BF16 grid.
Matrix dequantize_weights_bf16(const QuantizedLayer& layer);

/// General entry point; hessian may be null only when neither compensation
/// nor reordering needs it.
QuantizedLayer quantize_layer(const Matrix& w, const HessianState* hessian,
                              const QuantizerConfig& cfg, std::string name = "");

/// Two-level quantizer with Hessian error compensation.
QuantizedLayer dpq_quantize_layer(const Matrix& w, const HessianState& hessian,
                                  const QuantizerConfig& cfg, std::string name = "");

/// Same value path with no compensation and no Hessian.
QuantizedLayer rtn_quantize_layer(const Matrix& w, const QuantizerConfig& cfg,
                                  std::string name = "");

/// Baseline that compensates only the integer-level error: the error term is
/// computed against (w4 - z) * s * s_w with the weight taken straight from
/// the BF16 domain, so the FP8 grid error stays uncompensated.
QuantizedLayer gptq_int4only_quantize_layer(const Matrix& w,
                                            const HessianState& hessian,
                                            const QuantizerConfig& cfg,
                                            std::string name = "");

/// Shrinks the (min, max) range over a uniform grid of factors from 1.0 down
/// to max_shrink and keeps the params minimizing the squared reconstruction
/// error over the group; ties keep the larger factor.
Int4GroupParams mse_scale_search(std::span<const double> group,
                                 const ScaleSearchOptions& opts);

/// err[r] is the column's quantization error divided by the factor diagonal;
/// every remaining column v gets w[r][v] -= err[r] * chol_row[v - col_begin].
void compensation_update(Matrix& w, std::size_t col_begin, std::size_t col_end,
                         std::span<const double> err,
                         std::span<const double> chol_row);

} // namespace dpq
