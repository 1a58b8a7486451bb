#include "dpq/quantizer.hpp"

#include "dpq/errors.hpp"
#include "dpq/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace dpq {

std::string to_string(CompensationMode mode) {
    switch (mode) {
    case CompensationMode::dual: return "dual";
    case CompensationMode::int4_only: return "int4-only";
    case CompensationMode::none: return "none";
    }
    return "dual";
}

CompensationMode compensation_from_string(const std::string& s) {
    if (s == "dual") return CompensationMode::dual;
    if (s == "int4-only" || s == "int4_only") return CompensationMode::int4_only;
    if (s == "none") return CompensationMode::none;
    throw ValidationError("unknown compensation mode: " + s);
}

void QuantizerConfig::validate() const {
    if (group_size < 1)
        throw ValidationError("config: group_size must be >= 1");
    if (block_size < 1)
        throw ValidationError("config: block_size must be >= 1");
    if (search_grid < 1)
        throw ValidationError("config: search_grid must be >= 1");
    if (!(max_shrink > 0.0) || max_shrink > 1.0)
        throw ValidationError("config: max_shrink must be in (0, 1]");
    if (damp_factor < 0.0)
        throw ValidationError("config: damp_factor must be >= 0");
}

const Int4GroupParams& QuantizedLayer::param_for(std::size_t row,
                                                 std::size_t col) const {
    std::size_t group;
    if (reorder_mode == ReorderMode::full)
        group = permutation.perm[col] / packed.group_size;
    else
        group = col / packed.group_size;
    return packed.param(row, group);
}

Matrix dequantize_weights_fp8domain(const QuantizedLayer& layer, bool redequant) {
    const Fp8Format fmt = layer.config.fp8_format();
    Matrix out(layer.rows(), layer.cols());
    for (std::size_t r = 0; r < layer.rows(); ++r) {
        for (std::size_t c = 0; c < layer.cols(); ++c) {
            const Int4GroupParams& p = layer.param_for(r, c);
            double v = dequantize_int4_to_fp8domain(layer.packed.nibble(r, c), p);
            if (redequant) v = round_to_fp8(v, fmt);
            out(r, c) = v;
        }
    }
    return out;
}

Matrix dequantize_weights_bf16(const QuantizedLayer& layer) {
    Matrix out = dequantize_weights_fp8domain(layer, layer.config.redequant_round);
    for (std::size_t r = 0; r < out.rows; ++r) {
        const double swr = layer.packed.fp8_scale.for_row(r);
        double* row = out.row_ptr(r);
        for (std::size_t c = 0; c < out.cols; ++c)
            row[c] = dequantize_fp8_to_bf16domain(row[c], swr);
    }
    return out;
}

Int4GroupParams mse_scale_search(std::span<const double> group,
                                 const ScaleSearchOptions& opts) {
    if (group.empty())
        throw ValidationError("mse_scale_search: empty group");
    if (opts.grid < 1)
        throw ValidationError("mse_scale_search: grid must be >= 1");
    if (!(opts.max_shrink > 0.0) || opts.max_shrink > 1.0)
        throw ValidationError("mse_scale_search: max_shrink must be in (0, 1]");

    double lo = group[0], hi = group[0];
    for (double v : group) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    Int4GroupParams best;
    double best_err = std::numeric_limits<double>::infinity();
    for (int i = 0; i < opts.grid; ++i) {
        const double shrink =
            opts.grid == 1 ? 1.0
                           : 1.0 - (1.0 - opts.max_shrink) * double(i) / double(opts.grid - 1);
        const Int4GroupParams cand = int4_params_from_range(shrink * lo, shrink * hi);
        double err = 0.0;
        for (double v : group) {
            const double rec = dequantize_int4_to_fp8domain(quantize_int4(v, cand), cand);
            const double d = v - rec;
            err += d * d;
        }
        if (err < best_err) { // strict: ties keep the larger shrink factor
            best_err = err;
            best = cand;
        }
    }
    return best;
}

void compensation_update(Matrix& w, std::size_t col_begin, std::size_t col_end,
                         std::span<const double> err,
                         std::span<const double> chol_row) {
    if (err.size() != w.rows || chol_row.size() < col_end - col_begin)
        throw ValidationError("compensation_update: size mismatch");
    for (std::size_t r = 0; r < w.rows; ++r) {
        const double e = err[r];
        if (e == 0.0) continue;
        double* row = w.row_ptr(r);
        for (std::size_t v = col_begin; v < col_end; ++v)
            row[v] -= e * chol_row[v - col_begin];
    }
}

namespace {

// Block partition over segments: cut at the first segment boundary at or
// past block_size columns, so quantization groups never straddle blocks.
std::vector<std::pair<std::size_t, std::size_t>>
partition_blocks(const std::vector<GroupSegment>& segments, std::size_t block_size) {
    std::vector<std::pair<std::size_t, std::size_t>> blocks;
    std::size_t first = 0, width = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        width += segments[s].length;
        if (width >= block_size || s + 1 == segments.size()) {
            blocks.emplace_back(first, s + 1);
            first = s + 1;
            width = 0;
        }
    }
    return blocks;
}

} // namespace

QuantizedLayer quantize_layer(const Matrix& w, const HessianState* hessian,
                              const QuantizerConfig& cfg, std::string name) {
    cfg.validate();
    if (w.empty())
        throw ValidationError("quantize_layer: empty weight matrix");
    if (!all_finite(w))
        throw ValidationError("quantize_layer: non-finite weights");

    const bool compensate = cfg.compensation != CompensationMode::none;
    const bool needs_hessian = compensate || cfg.reorder_mode != ReorderMode::none;
    if (needs_hessian) {
        if (hessian == nullptr)
            throw ValidationError("quantize_layer: configuration requires a hessian");
        if (!hessian->finalized)
            throw ValidationError("quantize_layer: hessian is not finalized");
        if (hessian->dim != w.cols)
            throw ValidationError("quantize_layer: hessian dim != weight columns");
    }

    const std::size_t rows = w.rows;
    const std::size_t cols = w.cols;
    const Fp8Format fmt = cfg.fp8_format();

    GarPermutation perm;
    if (cfg.reorder_mode == ReorderMode::none) {
        perm = identity_permutation(cols);
    } else {
        std::vector<double> diag(cols);
        for (std::size_t i = 0; i < cols; ++i) diag[i] = hessian->h(i, i);
        perm = cfg.reorder_mode == ReorderMode::gar
                   ? compute_gar_permutation(diag, cfg.group_size, cfg.rank_criterion)
                   : compute_full_permutation(diag);
    }

    const bool trivial_perm = perm.is_identity();
    Matrix a = trivial_perm ? w : permute_columns(w, perm);

    Fp8TensorScale sw =
        compute_fp8_scale(w, fmt, cfg.fp8_granularity, cfg.pow2_scales);

    Matrix ufac;
    if (compensate) {
        HessianState permuted = HessianState::init(cols);
        permuted.h = trivial_perm ? hessian->h : permute_symmetric(hessian->h, perm);
        permuted.sample_count = hessian->sample_count;
        ufac = finalize_hessian(permuted, cfg.damp_factor).inv_factor;
    }

    const auto segments = group_segments(perm, cols, cfg.group_size);
    const std::size_t n_groups = segments.size();
    const auto blocks = partition_blocks(segments, cfg.block_size);

    const bool dual_path = cfg.compensation != CompensationMode::int4_only;
    std::vector<int> q(rows * cols, 0); // permuted column order
    std::vector<Int4GroupParams> params(rows * n_groups);
    std::vector<double> group_vals;
    std::vector<double> err(rows, 0.0);

    for (auto [s_begin, s_end] : blocks) {
        const std::size_t b0 = segments[s_begin].start;
        const std::size_t b1 =
            segments[s_end - 1].start + segments[s_end - 1].length;
        Matrix err_block;
        if (compensate) err_block = Matrix(rows, b1 - b0, 0.0);

        for (std::size_t si = s_begin; si < s_end; ++si) {
            const GroupSegment& seg = segments[si];

            // Group entry: params per row from the current, already
            // compensated weights mapped into the FP8 domain.
            for (std::size_t r = 0; r < rows; ++r) {
                const double swr = sw.for_row(r);
                group_vals.resize(seg.length);
                for (std::size_t k = 0; k < seg.length; ++k) {
                    const double v = a(r, seg.start + k) / swr;
                    group_vals[k] = dual_path ? round_to_fp8(v, fmt) : v;
                }
                Int4GroupParams p = cfg.scale_search
                                        ? mse_scale_search(group_vals, cfg.search_options())
                                        : compute_int4_group_params(group_vals);
                p.row_index = static_cast<int>(r);
                p.group_index = static_cast<int>(seg.storage_group);
                params[r * n_groups + seg.storage_group] = p;
            }

            for (std::size_t col = seg.start; col < seg.start + seg.length; ++col) {
                const double dqq = compensate ? ufac(col, col) : 1.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double swr = sw.for_row(r);
                    const Int4GroupParams& p = params[r * n_groups + seg.storage_group];
                    const double w16 = a(r, col);
                    double w8 = w16 / swr;
                    if (dual_path) w8 = round_to_fp8(w8, fmt);
                    const int q4 = quantize_int4(w8, p);
                    q[r * cols + col] = q4;
                    if (!compensate) continue;
                    // int4-only skips both FP8 snaps in its error term, so
                    // the grid error stays uncompensated.
                    double w8hat = dequantize_int4_to_fp8domain(q4, p);
                    if (dual_path && cfg.redequant_round)
                        w8hat = round_to_fp8(w8hat, fmt);
                    const double w16hat = dequantize_fp8_to_bf16domain(w8hat, swr);
                    err[r] = (w16 - w16hat) / dqq;
                }
                if (compensate) {
                    compensation_update(
                        a, col, b1, err,
                        std::span<const double>(ufac.row_ptr(col) + col, b1 - col));
                    for (std::size_t r = 0; r < rows; ++r)
                        err_block(r, col - b0) = err[r];
                }
            }
        }

        if (compensate && b1 < cols) {
            // Deferred rank update of everything past the block.
            for (std::size_t r = 0; r < rows; ++r) {
                double* arow = a.row_ptr(r);
                const double* eb = err_block.row_ptr(r);
                for (std::size_t k = 0; k < b1 - b0; ++k) {
                    const double e = eb[k];
                    if (e == 0.0) continue;
                    const double* urow = ufac.row_ptr(b0 + k);
                    for (std::size_t v = b1; v < cols; ++v)
                        arow[v] -= e * urow[v];
                }
            }
        }
    }

    std::vector<int> q_orig(rows * cols);
    if (trivial_perm) {
        q_orig = std::move(q);
    } else {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                q_orig[r * cols + c] = q[r * cols + perm.perm[c]];
    }

    QuantizedLayer out;
    out.name = std::move(name);
    out.reorder_mode = cfg.reorder_mode;
    out.permutation = std::move(perm);
    out.config = cfg;
    out.packed.rows = rows;
    out.packed.cols = cols;
    out.packed.group_size = cfg.group_size;
    out.packed.data = pack_nibbles(q_orig, rows, cols);
    out.packed.params = std::move(params);
    out.packed.fp8_scale = std::move(sw);

    // Objective value of the reconstruction on calibration data:
    // trace(D H D^T) with D = W - What, which equals |W X - What X|_F^2.
    // Without a hessian this degenerates to the plain weight error.
    Matrix what = dequantize_weights_bf16(out);
    Matrix delta(rows, cols);
    for (std::size_t i = 0; i < delta.size(); ++i)
        delta.data[i] = w.data[i] - what.data[i];
    if (hessian != nullptr) {
        Matrix dh = matmul(delta, hessian->h);
        double obj = 0.0;
        for (std::size_t i = 0; i < delta.size(); ++i)
            obj += delta.data[i] * dh.data[i];
        out.reconstruction_error = obj;
    } else {
        out.reconstruction_error = frobenius_sq(delta);
    }
    return out;
}

QuantizedLayer dpq_quantize_layer(const Matrix& w, const HessianState& hessian,
                                  const QuantizerConfig& cfg, std::string name) {
    QuantizerConfig c = cfg;
    c.compensation = CompensationMode::dual;
    return quantize_layer(w, &hessian, c, std::move(name));
}

QuantizedLayer rtn_quantize_layer(const Matrix& w, const QuantizerConfig& cfg,
                                  std::string name) {
    QuantizerConfig c = cfg;
    c.compensation = CompensationMode::none;
    c.reorder_mode = ReorderMode::none;
    return quantize_layer(w, nullptr, c, std::move(name));
}

QuantizedLayer gptq_int4only_quantize_layer(const Matrix& w,
                                            const HessianState& hessian,
                                            const QuantizerConfig& cfg,
                                            std::string name) {
    QuantizerConfig c = cfg;
    c.compensation = CompensationMode::int4_only;
    return quantize_layer(w, &hessian, c, std::move(name));
}

} // namespace dpq
