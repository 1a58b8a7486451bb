#include "dpq/calib.hpp"
#include "dpq/container.hpp"
#include "dpq/errors.hpp"
#include "dpq/manifest.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"
#include "dpq/quantizer.hpp"
#include "dpq/simulate.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

namespace py = pybind11;
using namespace dpq;

namespace {

Matrix matrix_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
    if (arr.ndim() != 2) throw ValidationError("expected a 2-D array");
    Matrix m(std::size_t(arr.shape(0)), std::size_t(arr.shape(1)));
    std::copy(arr.data(), arr.data() + m.size(), m.data.begin());
    return m;
}

py::array_t<double> array_from(const Matrix& m) {
    py::array_t<double> arr({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), arr.mutable_data());
    return arr;
}

template <typename T>
py::array_t<T> vector_to_array(const std::vector<T>& v) {
    py::array_t<T> arr({static_cast<py::ssize_t>(v.size())});
    std::copy(v.begin(), v.end(), arr.mutable_data());
    return arr;
}

Fp8Format format_from(const std::string& variant) {
    return fp8_format_for(fp8_variant_from_string(variant));
}

QuantizerConfig config_from_kwargs(std::size_t group_size, const std::string& reorder,
                                   const std::string& compensation, bool scale_search,
                                   int search_grid, double max_shrink, double damp,
                                   const std::string& fp8_variant, bool per_channel,
                                   bool pow2_scales, std::size_t block_size,
                                   bool redequant_round,
                                   const std::string& rank_criterion,
                                   std::uint64_t seed) {
    QuantizerConfig cfg;
    cfg.group_size = group_size;
    cfg.reorder_mode = reorder_mode_from_string(reorder);
    cfg.compensation = compensation_from_string(compensation);
    cfg.scale_search = scale_search;
    cfg.search_grid = search_grid;
    cfg.max_shrink = max_shrink;
    cfg.damp_factor = damp;
    cfg.fp8_variant = fp8_variant_from_string(fp8_variant);
    cfg.fp8_granularity =
        per_channel ? ScaleGranularity::per_channel : ScaleGranularity::per_tensor;
    cfg.pow2_scales = pow2_scales;
    cfg.block_size = block_size;
    cfg.redequant_round = redequant_round;
    cfg.rank_criterion = rank_criterion_from_string(rank_criterion);
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

} // namespace

PYBIND11_MODULE(_dpq, m) {
    m.doc() = "Two-level INT4/FP8 post-training weight quantization core.";
    m.attr("__version__") = kToolVersion;

    py::register_exception<ValidationError>(m, "DpqValidationError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "DpqNumericalError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "DpqIoError", PyExc_OSError);

    m.def(
        "round_to_fp8",
        [](double x, const std::string& variant) {
            return round_to_fp8(x, format_from(variant));
        },
        py::arg("x"), py::arg("variant") = "gaudi2",
        "Nearest E4M3 grid value, ties to even, saturating at the grid maximum.");

    m.def("round_to_bf16", &round_to_bf16, py::arg("x"),
          "Nearest BF16 value, ties to even.");

    m.def(
        "enumerate_grid",
        [](const std::string& variant) {
            return vector_to_array(enumerate_grid(format_from(variant)));
        },
        py::arg("variant") = "gaudi2",
        "All finite representable values of the format, ascending.");

    m.def(
        "pack_nibbles",
        [](const py::array_t<long, py::array::c_style | py::array::forcecast>& vals) {
            if (vals.ndim() != 2) throw ValidationError("expected a 2-D array");
            const std::size_t rows = std::size_t(vals.shape(0));
            const std::size_t cols = std::size_t(vals.shape(1));
            std::vector<int> v(rows * cols);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = int(vals.data()[i]);
            const auto bytes = pack_nibbles(v, rows, cols);
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        },
        py::arg("values"),
        "Pack a 2-D array of values in [0,15] row-major, low nibble first.");

    m.def(
        "unpack_nibbles",
        [](const py::bytes& data, std::size_t rows, std::size_t cols) {
            const std::string s = data;
            const std::vector<std::uint8_t> bytes(s.begin(), s.end());
            const auto vals = unpack_nibbles(bytes, rows, cols);
            py::array_t<std::uint8_t> arr({rows, cols});
            for (std::size_t i = 0; i < vals.size(); ++i)
                arr.mutable_data()[i] = std::uint8_t(vals[i]);
            return arr;
        },
        py::arg("data"), py::arg("rows"), py::arg("cols"));

    m.def(
        "hessian_from_activations",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
            const Matrix xm = matrix_from(x);
            HessianState s = HessianState::init(xm.rows);
            accumulate_hessian(s, xm);
            return array_from(s.h);
        },
        py::arg("activations"),
        "X @ X.T for activations of shape [d_in, n_samples].");

    m.def(
        "activation_scale",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const std::string& variant, bool pow2) {
            const Matrix xm = matrix_from(x);
            const Matrix batches[] = {xm};
            return calibrate_activation_scale(batches, format_from(variant), pow2)
                .scalar();
        },
        py::arg("activations"), py::arg("variant") = "gaudi2", py::arg("pow2") = false,
        "Static max-abs activation scale for the FP8 grid.");

    py::class_<QuantizedLayer>(m, "QuantizedLayer")
        .def_property_readonly("rows", &QuantizedLayer::rows)
        .def_property_readonly("cols", &QuantizedLayer::cols)
        .def_property_readonly("group_size",
                               [](const QuantizedLayer& l) { return l.packed.group_size; })
        .def_property_readonly("name", [](const QuantizedLayer& l) { return l.name; })
        .def_property_readonly(
            "reorder_mode",
            [](const QuantizedLayer& l) { return to_string(l.reorder_mode); })
        .def_property_readonly(
            "reconstruction_error",
            [](const QuantizedLayer& l) { return l.reconstruction_error; })
        .def_property_readonly("packed",
                               [](const QuantizedLayer& l) {
                                   return py::bytes(
                                       reinterpret_cast<const char*>(l.packed.data.data()),
                                       l.packed.data.size());
                               })
        .def_property_readonly("scales",
                               [](const QuantizedLayer& l) {
                                   const std::size_t ng = l.packed.groups_per_row();
                                   py::array_t<double> arr({l.rows(), ng});
                                   for (std::size_t i = 0; i < l.packed.params.size(); ++i)
                                       arr.mutable_data()[i] = l.packed.params[i].scale;
                                   return arr;
                               })
        .def_property_readonly("zero_points",
                               [](const QuantizedLayer& l) {
                                   const std::size_t ng = l.packed.groups_per_row();
                                   py::array_t<std::uint8_t> arr({l.rows(), ng});
                                   for (std::size_t i = 0; i < l.packed.params.size(); ++i)
                                       arr.mutable_data()[i] =
                                           std::uint8_t(l.packed.params[i].zero_point);
                                   return arr;
                               })
        .def_property_readonly("fp8_scale",
                               [](const QuantizedLayer& l) {
                                   return vector_to_array(l.packed.fp8_scale.values);
                               })
        .def_property_readonly("permutation",
                               [](const QuantizedLayer& l) {
                                   return vector_to_array(l.permutation.perm);
                               })
        .def("nibbles",
             [](const QuantizedLayer& l) {
                 py::array_t<std::uint8_t> arr({l.rows(), l.cols()});
                 for (std::size_t r = 0; r < l.rows(); ++r)
                     for (std::size_t c = 0; c < l.cols(); ++c)
                         arr.mutable_data()[r * l.cols() + c] =
                             std::uint8_t(l.packed.nibble(r, c));
                 return arr;
             })
        .def(
            "dequantize",
            [](const QuantizedLayer& l, const std::string& domain,
               std::optional<bool> redequant) {
                const bool snap = redequant.value_or(l.config.redequant_round);
                if (domain == "fp8")
                    return array_from(dequantize_weights_fp8domain(l, snap));
                if (domain == "bf16") {
                    if (redequant.has_value() && *redequant != l.config.redequant_round) {
                        QuantizedLayer copy = l;
                        copy.config.redequant_round = *redequant;
                        return array_from(dequantize_weights_bf16(copy));
                    }
                    return array_from(dequantize_weights_bf16(l));
                }
                throw ValidationError("domain must be 'bf16' or 'fp8'");
            },
            py::arg("domain") = "bf16", py::arg("redequant") = py::none());

    m.def(
        "quantize",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
           const py::object& hessian, std::size_t group_size, const std::string& reorder,
           const std::string& compensation, bool scale_search, int search_grid,
           double max_shrink, double damp, const std::string& fp8_variant,
           bool per_channel, bool pow2_scales, std::size_t block_size,
           bool redequant_round, const std::string& rank_criterion, std::uint64_t seed,
           const std::string& name) {
            const Matrix wm = matrix_from(w);
            const QuantizerConfig cfg = config_from_kwargs(
                group_size, reorder, compensation, scale_search, search_grid,
                max_shrink, damp, fp8_variant, per_channel, pow2_scales, block_size,
                redequant_round, rank_criterion, seed);
            if (hessian.is_none())
                return quantize_layer(wm, nullptr, cfg, name);
            const Matrix hm = matrix_from(
                hessian.cast<py::array_t<double, py::array::c_style | py::array::forcecast>>());
            HessianState state = HessianState::init(hm.rows);
            state.h = hm;
            const HessianState fin = finalize_hessian(state, cfg.damp_factor);
            return quantize_layer(wm, &fin, cfg, name);
        },
        py::arg("weights"), py::arg("hessian") = py::none(),
        py::kw_only(), py::arg("group_size") = 128, py::arg("reorder") = "gar",
        py::arg("compensation") = "dual", py::arg("scale_search") = true,
        py::arg("search_grid") = 100, py::arg("max_shrink") = 0.20,
        py::arg("damp") = 0.01, py::arg("fp8_variant") = "gaudi2",
        py::arg("per_channel") = false, py::arg("pow2_scales") = false,
        py::arg("block_size") = 128, py::arg("redequant_round") = false,
        py::arg("rank_criterion") = "max-diag", py::arg("seed") = 0,
        py::arg("name") = "layer",
        "Quantize one layer. `hessian` is X @ X.T over calibration "
        "activations; omit it only for compensation='none', reorder='none'.");

    m.def(
        "evaluate",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
           const QuantizedLayer& layer,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const std::vector<std::string>& modes, const py::object& act_scale,
           std::optional<bool> redequant) {
            const Matrix wm = matrix_from(w);
            const Matrix xm = matrix_from(x);
            std::vector<SimMode> parsed;
            for (const auto& s : modes) parsed.push_back(sim_mode_from_string(s));

            Fp8TensorScale sx;
            if (act_scale.is_none()) {
                const Matrix batches[] = {xm};
                sx = calibrate_activation_scale(batches, layer.config.fp8_format(),
                                                layer.config.pow2_scales);
            } else {
                sx.values = {act_scale.cast<double>()};
            }

            SimInputs in;
            in.layer = &layer;
            in.act_scale = &sx;
            in.fmt = layer.config.fp8_format();
            in.redequant = redequant.value_or(layer.config.redequant_round);

            EvalReport report;
            evaluate_layer(report, layer.name, wm, xm, parsed, in);
            py::list out;
            for (const auto& r : report.records) {
                py::dict d;
                d["layer"] = r.layer;
                d["mode"] = r.mode;
                d["relative_output_error"] = r.relative_output_error;
                d["weight_mse"] = r.weight_mse;
                d["max_abs_error"] = r.max_abs_error;
                d["activation_saturation_rate"] = r.activation_saturation_rate;
                out.append(std::move(d));
            }
            return out;
        },
        py::arg("weights"), py::arg("layer"), py::arg("activations"),
        py::arg("modes") = std::vector<std::string>{"bf16", "w8a8", "w4a16", "w4a8"},
        py::arg("act_scale") = py::none(), py::arg("redequant") = py::none(),
        "Simulated forward-path error report for one layer. Without an "
        "explicit act_scale the scale is calibrated from the given "
        "activations.");

    m.def(
        "write_container",
        [](const std::string& dir, const py::dict& tensors, const std::string& dtype) {
            TensorContainer::Writer writer(dir);
            const Dtype dt = dtype_from_string(dtype);
            for (const auto& item : tensors) {
                const auto name = item.first.cast<std::string>();
                const auto arr =
                    item.second
                        .cast<py::array_t<double, py::array::c_style | py::array::forcecast>>();
                writer.add_matrix(name, matrix_from(arr), dt);
            }
            writer.finish();
        },
        py::arg("dir"), py::arg("tensors"), py::arg("dtype") = "f32",
        "Write a dict of 2-D arrays as a tensor container directory.");

    m.def(
        "read_container",
        [](const std::string& dir) {
            const auto c = TensorContainer::open(dir);
            py::dict out;
            for (const auto& t : c.tensors())
                if ((t.dtype == Dtype::f32 || t.dtype == Dtype::bf16) &&
                    t.shape.size() == 2)
                    out[py::str(t.name)] = array_from(c.read_matrix(t.name));
            return out;
        },
        py::arg("dir"), "Read every 2-D float tensor of a container directory.");
}
