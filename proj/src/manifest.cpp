#include "dpq/manifest.hpp"

#include "dpq/errors.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace dpq {

using nlohmann::json;

std::string to_string(Fp8Variant v) {
    switch (v) {
    case Fp8Variant::ieee_reserved: return "gaudi2";
    case Fp8Variant::extended: return "gaudi3";
    case Fp8Variant::unbounded: return "unbounded";
    }
    return "gaudi2";
}

Fp8Variant fp8_variant_from_string(const std::string& s) {
    if (s == "gaudi2" || s == "ieee-reserved") return Fp8Variant::ieee_reserved;
    if (s == "gaudi3" || s == "extended") return Fp8Variant::extended;
    if (s == "unbounded") return Fp8Variant::unbounded;
    throw ValidationError("unknown fp8 variant: " + s);
}

std::string to_string(ScaleGranularity g) {
    return g == ScaleGranularity::per_tensor ? "per-tensor" : "per-channel";
}

ScaleGranularity granularity_from_string(const std::string& s) {
    if (s == "per-tensor" || s == "per_tensor") return ScaleGranularity::per_tensor;
    if (s == "per-channel" || s == "per_channel") return ScaleGranularity::per_channel;
    throw ValidationError("unknown scale granularity: " + s);
}

std::string to_string(GroupRankCriterion c) {
    return c == GroupRankCriterion::max_diag ? "max-diag" : "top10-mean";
}

GroupRankCriterion rank_criterion_from_string(const std::string& s) {
    if (s == "max-diag" || s == "max_diag") return GroupRankCriterion::max_diag;
    if (s == "top10-mean" || s == "top10_mean")
        return GroupRankCriterion::top_fraction_mean;
    throw ValidationError("unknown group rank criterion: " + s);
}

json config_to_json(const QuantizerConfig& cfg) {
    return json{{"group_size", cfg.group_size},
                {"reorder", to_string(cfg.reorder_mode)},
                {"scale_search", cfg.scale_search},
                {"search_grid", cfg.search_grid},
                {"max_shrink", cfg.max_shrink},
                {"damp_factor", cfg.damp_factor},
                {"fp8_variant", to_string(cfg.fp8_variant)},
                {"fp8_granularity", to_string(cfg.fp8_granularity)},
                {"pow2_scales", cfg.pow2_scales},
                {"compensation", to_string(cfg.compensation)},
                {"block_size", cfg.block_size},
                {"redequant_round", cfg.redequant_round},
                {"rank_criterion", to_string(cfg.rank_criterion)},
                {"seed", cfg.seed}};
}

QuantizerConfig config_from_json(const json& j) {
    QuantizerConfig cfg;
    try {
        cfg.group_size = j.at("group_size").get<std::size_t>();
        cfg.reorder_mode = reorder_mode_from_string(j.at("reorder").get<std::string>());
        cfg.scale_search = j.at("scale_search").get<bool>();
        cfg.search_grid = j.at("search_grid").get<int>();
        cfg.max_shrink = j.at("max_shrink").get<double>();
        cfg.damp_factor = j.at("damp_factor").get<double>();
        cfg.fp8_variant = fp8_variant_from_string(j.at("fp8_variant").get<std::string>());
        cfg.fp8_granularity =
            granularity_from_string(j.at("fp8_granularity").get<std::string>());
        cfg.pow2_scales = j.at("pow2_scales").get<bool>();
        cfg.compensation =
            compensation_from_string(j.at("compensation").get<std::string>());
        cfg.block_size = j.at("block_size").get<std::size_t>();
        cfg.redequant_round = j.at("redequant_round").get<bool>();
        cfg.rank_criterion =
            rank_criterion_from_string(j.at("rank_criterion").get<std::string>());
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

json QuantManifest::to_json() const {
    json doc;
    doc["schema_version"] = schema_version;
    doc["tool_version"] = tool_version;
    doc["config"] = config_to_json(config);
    doc["content_hash"] = content_hash;
    doc["layers"] = json::array();
    for (const auto& l : layers) {
        json e{{"name", l.name},
               {"weight_tensor", l.weight_tensor},
               {"packed_tensor", l.packed_tensor},
               {"scales_tensor", l.scales_tensor},
               {"zeros_tensor", l.zeros_tensor},
               {"fp8_scale_tensor", l.fp8_scale_tensor},
               {"rows", l.rows},
               {"cols", l.cols},
               {"reorder", to_string(l.reorder_mode)},
               {"reconstruction_error", l.reconstruction_error}};
        if (l.activation_scale > 0.0) e["activation_scale"] = l.activation_scale;
        if (!l.permutation.empty()) e["permutation"] = l.permutation;
        if (!l.group_ranks.empty()) e["group_ranks"] = l.group_ranks;
        doc["layers"].push_back(std::move(e));
    }
    return doc;
}

QuantManifest QuantManifest::from_json(const json& doc) {
    QuantManifest m;
    try {
        m.schema_version = doc.at("schema_version").get<int>();
        m.tool_version = doc.at("tool_version").get<std::string>();
        m.config = config_from_json(doc.at("config"));
        m.content_hash = doc.at("content_hash").get<std::string>();
        for (const auto& e : doc.at("layers")) {
            LayerArtifactEntry l;
            l.name = e.at("name").get<std::string>();
            l.weight_tensor = e.at("weight_tensor").get<std::string>();
            l.packed_tensor = e.at("packed_tensor").get<std::string>();
            l.scales_tensor = e.at("scales_tensor").get<std::string>();
            l.zeros_tensor = e.at("zeros_tensor").get<std::string>();
            l.fp8_scale_tensor = e.at("fp8_scale_tensor").get<std::string>();
            l.rows = e.at("rows").get<std::size_t>();
            l.cols = e.at("cols").get<std::size_t>();
            l.reorder_mode = reorder_mode_from_string(e.at("reorder").get<std::string>());
            l.reconstruction_error = e.at("reconstruction_error").get<double>();
            if (e.contains("activation_scale"))
                l.activation_scale = e["activation_scale"].get<double>();
            if (e.contains("permutation"))
                l.permutation = e["permutation"].get<std::vector<std::uint32_t>>();
            if (e.contains("group_ranks"))
                l.group_ranks = e["group_ranks"].get<std::vector<double>>();
            m.layers.push_back(std::move(l));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed quant manifest: ") + e.what());
    }
    return m;
}

void QuantManifest::save(const std::filesystem::path& dir) const {
    atomic_write_file(dir / kQuantManifestFile, to_json().dump(2) + "\n");
}

QuantManifest QuantManifest::load(const std::filesystem::path& dir) {
    const auto path = dir / kQuantManifestFile;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open quant manifest: " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ValidationError("malformed quant manifest " + path.string() + ": " +
                              e.what());
    }
    return from_json(doc);
}

const LayerArtifactEntry& QuantManifest::layer(const std::string& name) const {
    for (const auto& l : layers)
        if (l.name == name) return l;
    throw ValidationError("layer not found in quant manifest: " + name);
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[std::size_t(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

std::string compute_content_hash(const QuantManifest& m, const TensorContainer& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const std::string cfg = config_to_json(m.config).dump();
    h = fnv1a64(cfg.data(), cfg.size(), h);
    for (const auto& l : m.layers) {
        h = fnv1a64(l.name.data(), l.name.size(), h);
        for (const std::string* t : {&l.packed_tensor, &l.scales_tensor,
                                     &l.zeros_tensor, &l.fp8_scale_tensor}) {
            const auto bytes = c.read_bytes(*t);
            h = fnv1a64(bytes.data(), bytes.size(), h);
        }
        if (!l.permutation.empty())
            h = fnv1a64(l.permutation.data(),
                        l.permutation.size() * sizeof(std::uint32_t), h);
    }
    return hex64(h);
}

void validate_artifact(const QuantManifest& m, const TensorContainer& c) {
    for (const auto& l : m.layers) {
        for (const std::string* t : {&l.packed_tensor, &l.scales_tensor,
                                     &l.zeros_tensor, &l.fp8_scale_tensor}) {
            if (!c.has(*t))
                throw ValidationError("artifact tensor missing from container: " + *t);
        }
        const std::size_t n_groups =
            (l.cols + m.config.group_size - 1) / m.config.group_size;

        const TensorInfo& packed = c.info(l.packed_tensor);
        if (packed.dtype != Dtype::u4packed || packed.shape.size() != 2 ||
            packed.shape[0] != l.rows || packed.shape[1] != l.cols)
            throw ValidationError("tensor '" + l.packed_tensor +
                                  "': shape/dtype does not match manifest entry");

        const TensorInfo& scales = c.info(l.scales_tensor);
        std::size_t scale_count = 1;
        for (std::size_t d : scales.shape) scale_count *= d;
        if (scale_count != l.rows * n_groups)
            throw ValidationError("tensor '" + l.scales_tensor + "': has " +
                                  std::to_string(scale_count) +
                                  " params, expected rows*ceil(cols/group_size) = " +
                                  std::to_string(l.rows * n_groups));

        const TensorInfo& zeros = c.info(l.zeros_tensor);
        std::size_t zero_count = 1;
        for (std::size_t d : zeros.shape) zero_count *= d;
        if (zero_count != l.rows * n_groups)
            throw ValidationError("tensor '" + l.zeros_tensor +
                                  "': zero-point count mismatch");

        const TensorInfo& fscale = c.info(l.fp8_scale_tensor);
        std::size_t fcount = 1;
        for (std::size_t d : fscale.shape) fcount *= d;
        const std::size_t expected =
            m.config.fp8_granularity == ScaleGranularity::per_tensor ? 1 : l.rows;
        if (fcount != expected)
            throw ValidationError("tensor '" + l.fp8_scale_tensor +
                                  "': scale count mismatch");

        if (l.reorder_mode != ReorderMode::none && l.permutation.size() != l.cols)
            throw ValidationError("layer '" + l.name +
                                  "': permutation record length mismatch");
    }
    const std::string actual = compute_content_hash(m, c);
    if (actual != m.content_hash)
        throw ValidationError("artifact content hash mismatch: manifest says " +
                              m.content_hash + ", payload hashes to " + actual);
}

QuantizedLayer load_layer_artifact(const TensorContainer& c, const QuantManifest& m,
                                   const LayerArtifactEntry& entry) {
    QuantizedLayer layer;
    layer.name = entry.name;
    layer.config = m.config;
    layer.reorder_mode = entry.reorder_mode;
    layer.reconstruction_error = entry.reconstruction_error;

    layer.packed.rows = entry.rows;
    layer.packed.cols = entry.cols;
    layer.packed.group_size = m.config.group_size;
    layer.packed.data = c.read_bytes(entry.packed_tensor);

    const Matrix scales = c.read_matrix(entry.scales_tensor);
    const auto zero_bytes = c.read_bytes(entry.zeros_tensor);
    const std::size_t n_groups = layer.packed.groups_per_row();
    if (scales.size() != entry.rows * n_groups ||
        zero_bytes.size() != entry.rows * n_groups)
        throw ValidationError("layer '" + entry.name + "': params count mismatch");
    layer.packed.params.resize(entry.rows * n_groups);
    for (std::size_t r = 0; r < entry.rows; ++r) {
        for (std::size_t g = 0; g < n_groups; ++g) {
            Int4GroupParams& p = layer.packed.params[r * n_groups + g];
            p.scale = scales.data[r * n_groups + g];
            p.zero_point = zero_bytes[r * n_groups + g];
            p.row_index = int(r);
            p.group_index = int(g);
            if (!(p.scale > 0.0))
                throw ValidationError("tensor '" + entry.scales_tensor +
                                      "': non-positive scale");
            if (p.zero_point > kInt4QMax)
                throw ValidationError("tensor '" + entry.zeros_tensor +
                                      "': zero-point out of [0,15]");
        }
    }

    const Matrix fscale = c.read_matrix(entry.fp8_scale_tensor);
    layer.packed.fp8_scale.granularity = m.config.fp8_granularity;
    layer.packed.fp8_scale.pow2_rounded = m.config.pow2_scales;
    layer.packed.fp8_scale.values.assign(fscale.data.begin(), fscale.data.end());

    if (!entry.permutation.empty()) {
        GarPermutation& p = layer.permutation;
        p.mode = entry.reorder_mode;
        p.group_size = m.config.group_size;
        p.perm = entry.permutation;
        p.inverse.assign(p.perm.size(), 0);
        for (std::size_t i = 0; i < p.perm.size(); ++i)
            p.inverse[p.perm[i]] = static_cast<std::uint32_t>(i);
        p.group_ranks = entry.group_ranks;
    } else {
        layer.permutation = identity_permutation(entry.cols);
        layer.permutation.mode = entry.reorder_mode;
    }
    return layer;
}

} // namespace dpq
