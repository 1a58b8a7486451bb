// dpq: INT4-weight / FP8-compute post-training quantization toolkit.
//
// Subcommands:
//   calibrate  accumulate per-layer Hessians and static activation scales
//   quantize   produce packed INT4 artifacts with group params and manifest
//   eval       run simulated forward paths and write an error report
//   compare    tabulate reports side by side

#include "dpq/calib.hpp"
#include "dpq/container.hpp"
#include "dpq/errors.hpp"
#include "dpq/manifest.hpp"
#include "dpq/quantizer.hpp"
#include "dpq/simulate.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

using namespace dpq;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCalibFile = "calib.json";

unsigned worker_count(std::size_t n_items) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("DPQ_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0) hw = static_cast<unsigned>(v);
    }
    return static_cast<unsigned>(
        std::min<std::size_t>(hw, std::max<std::size_t>(n_items, 1)));
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const unsigned workers = worker_count(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned t = 0; t < workers; ++t) {
        threads.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : threads) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// Layers are the 2-D float tensors of the weights container, in manifest
// order.
std::vector<TensorInfo> weight_layers(const TensorContainer& weights) {
    std::vector<TensorInfo> out;
    for (const auto& t : weights.tensors())
        if ((t.dtype == Dtype::f32 || t.dtype == Dtype::bf16) && t.shape.size() == 2)
            out.push_back(t);
    if (out.empty())
        throw ValidationError("weights container has no 2-D float tensors");
    return out;
}

// Activation batches for a layer: a tensor named exactly `<layer>` plus any
// `<layer>.<k>` with a numeric suffix, ordered bare first then by k.
std::vector<std::string> activation_batch_names(const TensorContainer& acts,
                                                const std::string& layer) {
    std::vector<std::pair<long, std::string>> found;
    for (const auto& t : acts.tensors()) {
        if (t.name == layer) {
            found.emplace_back(-1, t.name);
        } else if (t.name.size() > layer.size() + 1 &&
                   t.name.compare(0, layer.size(), layer) == 0 &&
                   t.name[layer.size()] == '.') {
            const std::string suffix = t.name.substr(layer.size() + 1);
            if (!suffix.empty() &&
                suffix.find_first_not_of("0123456789") == std::string::npos)
                found.emplace_back(std::stol(suffix), t.name);
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<std::string> names;
    for (auto& [k, n] : found) names.push_back(std::move(n));
    return names;
}

std::vector<Matrix> load_activation_batches(const TensorContainer& acts,
                                            const std::string& layer,
                                            std::size_t expected_dim) {
    std::vector<Matrix> batches;
    for (const auto& name : activation_batch_names(acts, layer)) {
        Matrix x = acts.read_matrix(name);
        if (x.rows != expected_dim)
            throw ValidationError("tensor '" + name + "': has " +
                                  std::to_string(x.rows) + " feature rows, layer '" +
                                  layer + "' expects " + std::to_string(expected_dim));
        if (!all_finite(x))
            throw ValidationError("tensor '" + name + "': non-finite activations");
        batches.push_back(std::move(x));
    }
    if (batches.empty())
        throw ValidationError("no activation tensors found for layer '" + layer +
                              "' (expected '" + layer + "' or '" + layer + ".<k>')");
    return batches;
}

Matrix concat_columns(const std::vector<Matrix>& batches) {
    std::size_t cols = 0;
    for (const auto& b : batches) cols += b.cols;
    Matrix out(batches[0].rows, cols);
    std::size_t at = 0;
    for (const auto& b : batches) {
        for (std::size_t r = 0; r < b.rows; ++r)
            std::copy(b.row_ptr(r), b.row_ptr(r) + b.cols, out.row_ptr(r) + at);
        at += b.cols;
    }
    return out;
}

// ------------------------------------------------------------------ calibrate

struct CalibrateArgs {
    std::string weights, acts, out;
    std::string scale_acts; // defaults to --acts
    double damp = 0.01;
    std::string fp8_variant = "gaudi2";
    bool pow2_scales = false;
};

int cmd_calibrate(const CalibrateArgs& args) {
    const auto weights = TensorContainer::open(args.weights);
    const auto acts = TensorContainer::open(args.acts);
    const bool separate_scale_acts =
        !args.scale_acts.empty() && args.scale_acts != args.acts;
    const auto scale_acts =
        separate_scale_acts ? TensorContainer::open(args.scale_acts) : acts;
    const Fp8Format fmt = fp8_format_for(fp8_variant_from_string(args.fp8_variant));

    const auto layers = weight_layers(weights);
    struct PerLayer {
        HessianState hessian;
        double act_scale = 0.0;
    };
    std::vector<PerLayer> results(layers.size());

    parallel_for(layers.size(), [&](std::size_t i) {
        const TensorInfo& layer = layers[i];
        const std::size_t d_in = layer.shape[1];
        HessianState state = HessianState::init(d_in);
        for (const Matrix& x : load_activation_batches(acts, layer.name, d_in))
            accumulate_hessian(state, x);
        const auto scale_batches =
            load_activation_batches(scale_acts, layer.name, d_in);
        results[i].act_scale =
            calibrate_activation_scale(scale_batches, fmt, args.pow2_scales).scalar();
        results[i].hessian = std::move(state);
    });

    fs::create_directories(args.out);
    TensorContainer::Writer writer(args.out);
    json layer_meta = json::object();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        writer.add_matrix(layers[i].name + ".hessian", results[i].hessian.h, Dtype::f32);
        layer_meta[layers[i].name] = {
            {"dim", results[i].hessian.dim},
            {"sample_count", results[i].hessian.sample_count},
            {"activation_scale", results[i].act_scale}};
    }
    writer.finish();

    json doc{{"schema_version", 1},
             {"tool_version", kToolVersion},
             {"damp_factor", args.damp},
             {"fp8_variant", args.fp8_variant},
             {"pow2_scales", args.pow2_scales},
             {"hessian_acts", args.acts},
             {"scale_acts", separate_scale_acts ? args.scale_acts : args.acts},
             {"layers", layer_meta}};
    atomic_write_file(fs::path(args.out) / kCalibFile, doc.dump(2) + "\n");

    std::printf("calibrated %zu layer(s) into %s\n", layers.size(), args.out.c_str());
    return kExitOk;
}

// ------------------------------------------------------------------- quantize

struct QuantizeArgs {
    std::string weights, hessians, out;
    QuantizerConfig cfg;
    std::string reorder = "gar";
    std::string compensation = "dual";
    std::string fp8_variant = "gaudi2";
    std::string rank_criterion = "max-diag";
    bool per_channel_fp8 = false;
};

json load_calib_meta(const fs::path& hessians_dir) {
    const fs::path path = hessians_dir / kCalibFile;
    std::ifstream in(path);
    if (!in) return json::object();
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ValidationError("malformed " + path.string() + ": " + e.what());
    }
    return doc;
}

int cmd_quantize(QuantizeArgs args) {
    args.cfg.reorder_mode = reorder_mode_from_string(args.reorder);
    args.cfg.compensation = compensation_from_string(args.compensation);
    args.cfg.fp8_variant = fp8_variant_from_string(args.fp8_variant);
    args.cfg.rank_criterion = rank_criterion_from_string(args.rank_criterion);
    args.cfg.fp8_granularity = args.per_channel_fp8 ? ScaleGranularity::per_channel
                                                    : ScaleGranularity::per_tensor;
    args.cfg.validate();

    const bool needs_hessians =
        args.cfg.compensation != CompensationMode::none ||
        args.cfg.reorder_mode != ReorderMode::none;
    if (needs_hessians && args.hessians.empty())
        throw ValidationError(
            "--hessians is required unless --compensation none --reorder none");

    const auto weights = TensorContainer::open(args.weights);
    std::optional<TensorContainer> hessians;
    json calib_meta = json::object();
    if (!args.hessians.empty()) {
        hessians = TensorContainer::open(args.hessians);
        calib_meta = load_calib_meta(args.hessians);
    }

    const auto layers = weight_layers(weights);
    std::vector<QuantizedLayer> quantized(layers.size());

    parallel_for(layers.size(), [&](std::size_t i) {
        const TensorInfo& info = layers[i];
        const Matrix w = weights.read_matrix(info.name);
        if (hessians.has_value()) {
            const std::string hname = info.name + ".hessian";
            if (!hessians->has(hname))
                throw ValidationError("hessian tensor missing: " + hname);
            HessianState state = HessianState::init(w.cols);
            state.h = hessians->read_matrix(hname);
            if (state.h.rows != w.cols || state.h.cols != w.cols)
                throw ValidationError("tensor '" + hname + "': shape does not match " +
                                      info.name);
            if (calib_meta.contains("layers") &&
                calib_meta["layers"].contains(info.name))
                state.sample_count =
                    calib_meta["layers"][info.name].value("sample_count", 0ULL);
            const HessianState fin = finalize_hessian(state, args.cfg.damp_factor);
            quantized[i] = quantize_layer(w, &fin, args.cfg, info.name);
        } else {
            quantized[i] = quantize_layer(w, nullptr, args.cfg, info.name);
        }
    });

    fs::create_directories(args.out);
    TensorContainer::Writer writer(args.out);
    QuantManifest manifest;
    manifest.config = args.cfg;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const QuantizedLayer& q = quantized[i];
        const std::size_t ng = q.packed.groups_per_row();

        writer.add_u4packed(q.name + ".packed", q.rows(), q.cols(), q.packed.data);
        Matrix scales(q.rows(), ng);
        std::vector<std::uint8_t> zeros(q.rows() * ng);
        for (std::size_t k = 0; k < q.packed.params.size(); ++k) {
            scales.data[k] = q.packed.params[k].scale;
            zeros[k] = static_cast<std::uint8_t>(q.packed.params[k].zero_point);
        }
        writer.add_matrix(q.name + ".scales", scales, Dtype::f32);
        writer.add_u8(q.name + ".zeros", {q.rows(), ng}, zeros);
        writer.add_vector(q.name + ".fp8_scale", q.packed.fp8_scale.values, Dtype::f32);

        LayerArtifactEntry entry;
        entry.name = q.name;
        entry.weight_tensor = q.name;
        entry.packed_tensor = q.name + ".packed";
        entry.scales_tensor = q.name + ".scales";
        entry.zeros_tensor = q.name + ".zeros";
        entry.fp8_scale_tensor = q.name + ".fp8_scale";
        entry.rows = q.rows();
        entry.cols = q.cols();
        entry.reorder_mode = q.reorder_mode;
        if (q.reorder_mode != ReorderMode::none) {
            entry.permutation = q.permutation.perm;
            entry.group_ranks = q.permutation.group_ranks;
        }
        entry.reconstruction_error = q.reconstruction_error;
        if (calib_meta.contains("layers") && calib_meta["layers"].contains(q.name))
            entry.activation_scale =
                calib_meta["layers"][q.name].value("activation_scale", 0.0);
        manifest.layers.push_back(std::move(entry));
    }
    writer.finish();

    const auto container = TensorContainer::open(args.out);
    manifest.content_hash = compute_content_hash(manifest, container);
    manifest.save(args.out);

    std::printf("quantized %zu layer(s) into %s (hash %s)\n", layers.size(),
                args.out.c_str(), manifest.content_hash.c_str());
    return kExitOk;
}

// ----------------------------------------------------------------------- eval

struct EvalArgs {
    std::string weights, artifact, acts, report;
    std::string modes = "bf16,w8a8,w4a16,w4a8";
    std::string redequant = "auto"; // auto | on | off
};

std::vector<SimMode> parse_modes(const std::string& list) {
    std::vector<SimMode> modes;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) modes.push_back(sim_mode_from_string(item));
    if (modes.empty()) throw ValidationError("--modes list is empty");
    return modes;
}

int cmd_eval(const EvalArgs& args) {
    const auto weights = TensorContainer::open(args.weights);
    const auto container = TensorContainer::open(args.artifact);
    const QuantManifest manifest = QuantManifest::load(args.artifact);
    validate_artifact(manifest, container);
    const auto acts = TensorContainer::open(args.acts);
    const auto modes = parse_modes(args.modes);

    bool redequant = manifest.config.redequant_round;
    if (args.redequant == "on") redequant = true;
    else if (args.redequant == "off") redequant = false;
    else if (args.redequant != "auto")
        throw ValidationError("--redequant must be auto, on or off");

    const bool wants_a8 =
        std::any_of(modes.begin(), modes.end(), [](SimMode m) {
            return m == SimMode::w8a8 || m == SimMode::w4a8;
        });

    EvalReport report;
    std::mutex report_mutex;
    parallel_for(manifest.layers.size(), [&](std::size_t i) {
        const LayerArtifactEntry& entry = manifest.layers[i];
        if (!weights.has(entry.weight_tensor))
            throw ValidationError("weight tensor missing: " + entry.weight_tensor);
        const Matrix w = weights.read_matrix(entry.weight_tensor);
        if (w.rows != entry.rows || w.cols != entry.cols)
            throw ValidationError("tensor '" + entry.weight_tensor +
                                  "': shape does not match the artifact");
        const QuantizedLayer layer = load_layer_artifact(container, manifest, entry);
        const Matrix x = concat_columns(
            load_activation_batches(acts, entry.name, entry.cols));

        Fp8TensorScale sx;
        if (entry.activation_scale > 0.0) {
            sx.values = {entry.activation_scale};
        } else if (wants_a8) {
            throw ValidationError(
                "layer '" + entry.name +
                "' has no calibrated activation scale; run calibrate and "
                "quantize with --hessians, or drop the a8 modes");
        }

        SimInputs in;
        in.layer = &layer;
        in.act_scale = &sx;
        in.fmt = manifest.config.fp8_format();
        in.redequant = redequant;

        EvalReport local;
        evaluate_layer(local, entry.name, w, x, modes, in);
        std::lock_guard<std::mutex> lock(report_mutex);
        for (auto& rec : local.records) report.add(std::move(rec));
    });

    // deterministic record order: by layer then mode, as listed
    std::sort(report.records.begin(), report.records.end(),
              [&](const LayerEvalRecord& a, const LayerEvalRecord& b) {
                  if (a.layer != b.layer) return a.layer < b.layer;
                  return a.mode < b.mode;
              });
    report.finalize_aggregates();

    json doc{{"schema_version", 1},
             {"tool_version", kToolVersion},
             {"artifact", args.artifact},
             {"redequant_round", redequant},
             {"config", config_to_json(manifest.config)}};
    doc["layers"] = json::array();
    for (const auto& r : report.records)
        doc["layers"].push_back(
            {{"layer", r.layer},
             {"mode", r.mode},
             {"relative_output_error", r.relative_output_error},
             {"weight_mse", r.weight_mse},
             {"max_abs_error", r.max_abs_error},
             {"activation_saturation_rate", r.activation_saturation_rate}});
    doc["aggregates"] = report.aggregates;
    atomic_write_file(args.report, doc.dump(2) + "\n");

    std::printf("evaluated %zu layer(s), report written to %s\n",
                manifest.layers.size(), args.report.c_str());
    return kExitOk;
}

// -------------------------------------------------------------------- compare

struct CompareArgs {
    std::vector<std::string> reports;
    std::string json_out;
};

int cmd_compare(const CompareArgs& args) {
    struct Row {
        std::string label;
        std::string compensation;
        std::string reorder;
        std::map<std::string, double> medians;
    };
    std::vector<Row> rows;
    std::vector<std::string> mode_order;

    for (const auto& file : args.reports) {
        std::ifstream in(file);
        if (!in) throw IoError("cannot open report: " + file);
        json doc;
        try {
            in >> doc;
        } catch (const json::exception& e) {
            throw ValidationError("malformed report " + file + ": " + e.what());
        }
        Row row;
        row.label = fs::path(file).stem().string();
        if (doc.contains("config")) {
            row.compensation = doc["config"].value("compensation", "?");
            row.reorder = doc["config"].value("reorder", "?");
        }
        if (!doc.contains("aggregates"))
            throw ValidationError("report " + file + " has no aggregates");
        for (const auto& [mode, metrics] : doc["aggregates"].items()) {
            row.medians[mode] = metrics.value("median_relative_output_error", 0.0);
            if (std::find(mode_order.begin(), mode_order.end(), mode) ==
                mode_order.end())
                mode_order.push_back(mode);
        }
        rows.push_back(std::move(row));
    }
    std::sort(mode_order.begin(), mode_order.end());

    std::printf("%-28s %-11s %-8s", "report", "comp", "reorder");
    for (const auto& m : mode_order) std::printf(" %12s", m.c_str());
    std::printf("\n");
    for (const auto& row : rows) {
        std::printf("%-28s %-11s %-8s", row.label.c_str(), row.compensation.c_str(),
                    row.reorder.c_str());
        for (const auto& m : mode_order) {
            auto it = row.medians.find(m);
            if (it == row.medians.end())
                std::printf(" %12s", "-");
            else
                std::printf(" %12.4e", it->second);
        }
        std::printf("\n");
    }

    if (!args.json_out.empty()) {
        json doc{{"schema_version", 1}, {"metric", "median_relative_output_error"}};
        doc["rows"] = json::array();
        for (const auto& row : rows) {
            json r{{"report", row.label},
                   {"compensation", row.compensation},
                   {"reorder", row.reorder}};
            for (const auto& [m, v] : row.medians) r[m] = v;
            doc["rows"].push_back(std::move(r));
        }
        atomic_write_file(args.json_out, doc.dump(2) + "\n");
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dpq: INT4-weight / FP8-compute post-training quantization toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("dpq ") + kToolVersion);

    CalibrateArgs cal;
    auto* calibrate = app.add_subcommand(
        "calibrate", "accumulate layer Hessians and static activation scales");
    calibrate->add_option("--weights", cal.weights, "weights container directory")
        ->required();
    calibrate->add_option("--acts", cal.acts, "calibration activations directory")
        ->required();
    calibrate->add_option("--out", cal.out, "output directory")->required();
    calibrate->add_option("--damp", cal.damp, "dampening fraction of mean(diag H)");
    calibrate->add_option("--scale-acts", cal.scale_acts,
                          "separate activations for the activation scales");
    calibrate->add_option("--fp8-variant", cal.fp8_variant, "gaudi2 | gaudi3");
    calibrate->add_flag("--pow2-scales", cal.pow2_scales,
                        "round activation scales up to powers of two");

    QuantizeArgs qa;
    auto* quantize = app.add_subcommand("quantize", "quantize layers to packed INT4");
    quantize->add_option("--weights", qa.weights, "weights container directory")
        ->required();
    quantize->add_option("--hessians", qa.hessians,
                         "calibrate output directory (hessians + scales)");
    quantize->add_option("--out", qa.out, "artifact output directory")->required();
    quantize->add_option("--group-size", qa.cfg.group_size, "columns per group");
    quantize->add_option("--reorder", qa.reorder, "none | gar | full");
    quantize->add_option("--compensation", qa.compensation, "dual | int4-only | none");
    quantize->add_option("--fp8-variant", qa.fp8_variant, "gaudi2 | gaudi3");
    quantize->add_flag("--pow2-scales", qa.cfg.pow2_scales,
                       "round FP8 scales up to powers of two");
    quantize->add_flag("--scale-search,!--no-scale-search", qa.cfg.scale_search,
                       "MSE search over shrink factors for group params");
    quantize->add_flag("--per-channel-fp8", qa.per_channel_fp8,
                       "per-output-channel FP8 weight scales");
    quantize->add_option("--seed", qa.cfg.seed, "seed recorded in the manifest");
    quantize->add_option("--damp", qa.cfg.damp_factor,
                         "dampening fraction of mean(diag H)");
    quantize->add_option("--block-size", qa.cfg.block_size, "lazy update block width");
    quantize->add_option("--search-grid", qa.cfg.search_grid,
                         "number of shrink factors to try");
    quantize->add_option("--max-shrink", qa.cfg.max_shrink,
                         "smallest shrink factor, in (0,1]");
    quantize->add_flag("--redequant-round", qa.cfg.redequant_round,
                       "snap dequantized INT4 values back onto the FP8 grid");
    quantize->add_option("--rank-criterion", qa.rank_criterion,
                         "max-diag | top10-mean");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "simulated-inference error report");
    eval->add_option("--weights", ev.weights, "weights container directory")
        ->required();
    eval->add_option("--artifact", ev.artifact, "quantize output directory")
        ->required();
    eval->add_option("--acts", ev.acts, "evaluation activations directory")
        ->required();
    eval->add_option("--modes", ev.modes, "comma list: bf16,w8a8,w4a16,w4a8");
    eval->add_option("--report", ev.report, "output report JSON path")->required();
    eval->add_option("--redequant", ev.redequant,
                     "w4a8 dequant grid snap: auto | on | off");

    CompareArgs cmp;
    auto* compare = app.add_subcommand("compare", "tabulate eval reports");
    compare->add_option("--reports", cmp.reports, "report JSON files")
        ->required()
        ->expected(-1);
    compare->add_option("--json", cmp.json_out, "also write the table as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (calibrate->parsed()) return cmd_calibrate(cal);
        if (quantize->parsed()) return cmd_quantize(qa);
        if (eval->parsed()) return cmd_eval(ev);
        if (compare->parsed()) return cmd_compare(cmp);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return kExitNumerical;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
    return kExitOk;
}
