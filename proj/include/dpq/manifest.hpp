#pragma once

#include "dpq/container.hpp"
#include "dpq/quantizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dpq {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kQuantManifestFile = "quant_manifest.json";

std::string to_string(Fp8Variant v);
Fp8Variant fp8_variant_from_string(const std::string& s);
std::string to_string(ScaleGranularity g);
ScaleGranularity granularity_from_string(const std::string& s);
std::string to_string(GroupRankCriterion c);
GroupRankCriterion rank_criterion_from_string(const std::string& s);

nlohmann::json config_to_json(const QuantizerConfig& cfg);
QuantizerConfig config_from_json(const nlohmann::json& j);

/// One quantized layer inside the artifact directory.
struct LayerArtifactEntry {
    std::string name;
    std::string weight_tensor;
    std::string packed_tensor;
    std::string scales_tensor;
    std::string zeros_tensor;
    std::string fp8_scale_tensor;
    std::size_t rows = 0;
    std::size_t cols = 0;
    double activation_scale = 0.0; // 0 = not calibrated
    ReorderMode reorder_mode = ReorderMode::none;
    std::vector<std::uint32_t> permutation; // original -> position; empty = identity
    std::vector<double> group_ranks;
    double reconstruction_error = 0.0;
};

struct QuantManifest {
    int schema_version = 1;
    std::string tool_version = kToolVersion;
    QuantizerConfig config;
    std::string content_hash;
    std::vector<LayerArtifactEntry> layers;

    nlohmann::json to_json() const;
    static QuantManifest from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& dir) const;
    static QuantManifest load(const std::filesystem::path& dir);

    const LayerArtifactEntry& layer(const std::string& name) const;
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed);
std::string hex64(std::uint64_t v);

/// Hash over the canonical config serialization and every layer payload.
std::string compute_content_hash(const QuantManifest& m, const TensorContainer& c);

/// Structural validation: referenced tensors exist with consistent shapes,
/// params count matches rows * ceil(cols / group_size), the content hash
/// matches. Throws ValidationError naming the offending tensor.
void validate_artifact(const QuantManifest& m, const TensorContainer& c);

/// Reassemble an in-memory quantized layer from artifact tensors.
QuantizedLayer load_layer_artifact(const TensorContainer& c, const QuantManifest& m,
                                   const LayerArtifactEntry& entry);

} // namespace dpq
