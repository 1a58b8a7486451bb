#include "dpq/container.hpp"

#include "dpq/errors.hpp"
#include "dpq/manifest.hpp"
#include "support/test_util.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace dpq;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("dpq_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_SUITE_BEGIN("cli_io");

TEST_CASE("container round-trips f32 and bf16 matrices byte-exactly") {
    TempDir tmp;
    auto g = test::rng(55);
    Matrix w = test::random_gaussian(g, 6, 10);
    // store BF16-representable values so both dtypes round-trip exactly
    for (double& v : w.data) v = round_to_bf16(v);

    {
        TensorContainer::Writer writer(tmp.path);
        writer.add_matrix("layer0", w, Dtype::f32);
        writer.add_matrix("layer0.bf16", w, Dtype::bf16);
        writer.add_vector("scales", {0.5, 0.25}, Dtype::f32);
        writer.finish();
    }

    const auto c = TensorContainer::open(tmp.path);
    REQUIRE(c.tensors().size() == 3);
    const Matrix w32 = c.read_matrix("layer0");
    const Matrix w16 = c.read_matrix("layer0.bf16");
    CHECK(w16.data == w.data);
    for (std::size_t i = 0; i < w.size(); ++i)
        CHECK(w32.data[i] == doctest::Approx(w.data[i]).epsilon(1e-6));

    // writing the same content again produces identical bytes
    TempDir tmp2;
    {
        TensorContainer::Writer writer(tmp2.path);
        writer.add_matrix("layer0", w, Dtype::f32);
        writer.add_matrix("layer0.bf16", w, Dtype::bf16);
        writer.add_vector("scales", {0.5, 0.25}, Dtype::f32);
        writer.finish();
    }
    for (const char* name : {"layer0.bin", "layer0.bf16.bin", "manifest.json"})
        CHECK(file_bytes(tmp.path / name) == file_bytes(tmp2.path / name));
}

TEST_CASE("container validates blob sizes and duplicate names") {
    TempDir tmp;
    {
        TensorContainer::Writer writer(tmp.path);
        writer.add_u4packed("w.packed", 2, 3, std::vector<std::uint8_t>{1, 2, 3, 4});
        writer.finish();
    }
    auto c = TensorContainer::open(tmp.path);
    CHECK(c.read_bytes("w.packed").size() == 4);
    CHECK_THROWS_WITH_AS(c.read_bytes("missing"),
                         doctest::Contains("missing"), ValidationError);

    // corrupt the blob length on disk
    std::ofstream(tmp.path / "w.packed.bin", std::ios::binary) << "xy";
    CHECK_THROWS_WITH_AS(c.read_bytes("w.packed"),
                         doctest::Contains("w.packed"), ValidationError);

    TensorContainer::Writer dup(tmp.path);
    dup.add_u8("z", {2}, {1, 2});
    CHECK_THROWS_AS(dup.add_u8("z", {2}, {3, 4}), ValidationError);

    TensorContainer::Writer wrong(tmp.path);
    CHECK_THROWS_AS(wrong.add_u4packed("bad", 2, 3, {1, 2, 3}), ValidationError);
}

TEST_CASE("malformed container manifests fail with a diagnostic") {
    TempDir tmp;
    atomic_write_file(tmp.path / "manifest.json", std::string("{ not json"));
    CHECK_THROWS_AS(TensorContainer::open(tmp.path), ValidationError);
    CHECK_THROWS_AS(TensorContainer::open(tmp.path / "nope"), IoError);
}

TEST_CASE("config serialization round-trips") {
    QuantizerConfig cfg;
    cfg.group_size = 64;
    cfg.reorder_mode = ReorderMode::full;
    cfg.compensation = CompensationMode::int4_only;
    cfg.fp8_variant = Fp8Variant::extended;
    cfg.fp8_granularity = ScaleGranularity::per_channel;
    cfg.pow2_scales = true;
    cfg.scale_search = false;
    cfg.search_grid = 7;
    cfg.max_shrink = 0.5;
    cfg.damp_factor = 0.02;
    cfg.block_size = 32;
    cfg.redequant_round = true;
    cfg.rank_criterion = GroupRankCriterion::top_fraction_mean;
    cfg.seed = 1234567;

    const QuantizerConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.group_size == cfg.group_size);
    CHECK(back.reorder_mode == cfg.reorder_mode);
    CHECK(back.compensation == cfg.compensation);
    CHECK(back.fp8_variant == cfg.fp8_variant);
    CHECK(back.fp8_granularity == cfg.fp8_granularity);
    CHECK(back.pow2_scales == cfg.pow2_scales);
    CHECK(back.scale_search == cfg.scale_search);
    CHECK(back.search_grid == cfg.search_grid);
    CHECK(back.max_shrink == cfg.max_shrink);
    CHECK(back.damp_factor == cfg.damp_factor);
    CHECK(back.block_size == cfg.block_size);
    CHECK(back.redequant_round == cfg.redequant_round);
    CHECK(back.rank_criterion == cfg.rank_criterion);
    CHECK(back.seed == cfg.seed);
}

TEST_CASE("artifact save, validate and reload") {
    TempDir tmp;
    auto g = test::rng(56);
    const Matrix w = test::random_gaussian(g, 6, 32);
    const Matrix x = test::correlated_activations(g, 32, 48, 0.5);
    HessianState state = HessianState::init(32);
    accumulate_hessian(state, x);
    const HessianState fin = finalize_hessian(state, 0.01);

    QuantizerConfig cfg;
    cfg.group_size = 8;
    cfg.block_size = 8;
    cfg.reorder_mode = ReorderMode::gar;
    const QuantizedLayer layer = dpq_quantize_layer(w, fin, cfg, "fc0");

    QuantManifest manifest;
    manifest.config = cfg;
    LayerArtifactEntry entry;
    entry.name = "fc0";
    entry.weight_tensor = "fc0";
    entry.packed_tensor = "fc0.packed";
    entry.scales_tensor = "fc0.scales";
    entry.zeros_tensor = "fc0.zeros";
    entry.fp8_scale_tensor = "fc0.fp8_scale";
    entry.rows = 6;
    entry.cols = 32;
    entry.reorder_mode = layer.reorder_mode;
    entry.permutation = layer.permutation.perm;
    entry.group_ranks = layer.permutation.group_ranks;
    entry.reconstruction_error = layer.reconstruction_error;
    manifest.layers.push_back(entry);

    {
        TensorContainer::Writer writer(tmp.path);
        writer.add_u4packed("fc0.packed", 6, 32, layer.packed.data);
        const std::size_t ng = layer.packed.groups_per_row();
        Matrix scales(6, ng);
        std::vector<std::uint8_t> zeros(6 * ng);
        for (std::size_t i = 0; i < layer.packed.params.size(); ++i) {
            scales.data[i] = layer.packed.params[i].scale;
            zeros[i] = std::uint8_t(layer.packed.params[i].zero_point);
        }
        writer.add_matrix("fc0.scales", scales, Dtype::f32);
        writer.add_u8("fc0.zeros", {6, ng}, zeros);
        writer.add_vector("fc0.fp8_scale", layer.packed.fp8_scale.values, Dtype::f32);
        writer.finish();
    }

    auto container = TensorContainer::open(tmp.path);
    manifest.content_hash = compute_content_hash(manifest, container);
    manifest.save(tmp.path);

    const QuantManifest loaded = QuantManifest::load(tmp.path);
    validate_artifact(loaded, container);

    const QuantizedLayer back =
        load_layer_artifact(container, loaded, loaded.layer("fc0"));
    CHECK(back.packed.data == layer.packed.data);
    CHECK(back.permutation.perm == layer.permutation.perm);
    // f32 storage of scales: reconstructions agree to f32 precision
    CHECK(test::relative_fro_diff(dequantize_weights_bf16(back),
                                  dequantize_weights_bf16(layer)) < 1e-5);

    // a params-count mismatch is rejected and names the tensor
    QuantManifest broken = loaded;
    broken.layers[0].cols = 24;
    CHECK_THROWS_WITH_AS(validate_artifact(broken, container),
                         doctest::Contains("fc0.packed"), ValidationError);

    // tampering with the payload breaks the content hash
    QuantManifest tampered = loaded;
    tampered.layers[0].permutation[0] ^= 1;
    bool hash_or_perm_error = false;
    try {
        validate_artifact(tampered, container);
    } catch (const ValidationError&) {
        hash_or_perm_error = true;
    }
    CHECK(hash_or_perm_error);
}

TEST_SUITE_END();
