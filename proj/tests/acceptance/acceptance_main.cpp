// Acceptance suite: runs every release criterion at its stated tolerance
// and prints one pass/fail line per criterion. Exits nonzero if any fail.

#include "dpq/calib.hpp"
#include "dpq/container.hpp"
#include "dpq/gar.hpp"
#include "dpq/linalg.hpp"
#include "dpq/manifest.hpp"
#include "dpq/numerics.hpp"
#include "dpq/quant.hpp"
#include "dpq/quantizer.hpp"
#include "dpq/simulate.hpp"
#include "support/test_util.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace dpq;
namespace fs = std::filesystem;

namespace {

struct Checker {
    std::vector<std::string> failures;
    void require(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

double relative_objective(const Matrix& w, const QuantizedLayer& layer,
                          const Matrix& h) {
    const Matrix what = dequantize_weights_bf16(layer);
    Matrix delta(w.rows, w.cols);
    for (std::size_t i = 0; i < w.size(); ++i)
        delta.data[i] = w.data[i] - what.data[i];
    const Matrix dh = matmul(delta, h);
    double num = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i)
        num += delta.data[i] * dh.data[i];
    const Matrix wh = matmul(w, h);
    double den = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        den += w.data[i] * wh.data[i];
    return num / den;
}

// ---------------------------------------------------------------- 1
void criterion_grid_idempotence(Checker& c) {
    for (const Fp8Format& fmt : {Fp8Format::gaudi2(), Fp8Format::gaudi3()}) {
        const auto grid = enumerate_grid(fmt);
        c.require(!grid.empty(), "grid is empty");
        for (double g : grid)
            if (round_to_fp8(g, fmt) != g) {
                c.require(false, "grid value " + fmt_double(g) + " does not round-trip");
                break;
            }
        c.require(grid.back() == fmt.max_magnitude,
                  "grid maximum is " + fmt_double(grid.back()) + ", expected " +
                      fmt_double(fmt.max_magnitude));
        c.require(grid.front() == -fmt.max_magnitude, "grid minimum mismatch");
    }
    c.require(enumerate_grid(Fp8Format::gaudi2()).back() == 240.0, "gaudi2 max != 240");
    c.require(enumerate_grid(Fp8Format::gaudi3()).back() == 448.0, "gaudi3 max != 448");
}

// ---------------------------------------------------------------- 2
void criterion_packing(Checker& c) {
    for (int b = 0; b < 256; ++b) {
        const std::vector<std::uint8_t> bytes{std::uint8_t(b)};
        if (pack_nibbles(unpack_nibbles(bytes, 1, 2), 1, 2) != bytes) {
            c.require(false, "byte " + std::to_string(b) + " does not round-trip");
            break;
        }
    }
    auto g = test::rng(2024);
    std::uniform_int_distribution<int> nib(0, 15);
    std::uniform_int_distribution<std::size_t> dim(1, 17);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t rows = dim(g), cols = dim(g);
        std::vector<int> vals(rows * cols);
        for (int& v : vals) v = nib(g);
        if (unpack_nibbles(pack_nibbles(vals, rows, cols), rows, cols) != vals) {
            c.require(false, "random tensor round-trip failed at trial " +
                                 std::to_string(trial));
            return;
        }
    }
}

// ---------------------------------------------------------------- 3
void criterion_cholesky_oracle(Checker& c) {
    auto g = test::rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix x = test::random_gaussian(g, 64, 96);
        HessianState s = HessianState::init(64);
        accumulate_hessian(s, x);
        const HessianState f = finalize_hessian(s, 0.01);
        const Matrix oracle =
            test::gauss_jordan_inverse(test::dampened_copy(s.h, 0.01));
        const Matrix prod = matmul(transpose(f.inv_factor), f.inv_factor);
        worst = std::max(worst, test::relative_fro_diff(prod, oracle));
    }
    c.require(worst <= 1e-6,
              "factor reconstruction error " + fmt_double(worst) + " > 1e-6");
}

// ---------------------------------------------------------------- 4
void criterion_identity_hessian(Checker& c) {
    QuantizerConfig cfg;
    cfg.group_size = 32;
    cfg.block_size = 32;
    cfg.reorder_mode = ReorderMode::none;
    cfg.scale_search = false;
    const HessianState hess = test::identity_hessian(128);
    for (int trial = 0; trial < 20; ++trial) {
        auto g = test::rng(4000 + std::uint64_t(trial));
        const Matrix w = test::random_gaussian(g, 64, 128);
        const auto layer = dpq_quantize_layer(w, hess, cfg);
        const auto oracle =
            test::elementwise_two_level_rtn(w, cfg.fp8_format(), cfg.group_size);
        if (layer.packed.data != pack_nibbles(oracle.nibbles, 64, 128)) {
            c.require(false, "nibbles differ from the elementwise oracle at trial " +
                                 std::to_string(trial));
            return;
        }
        for (std::size_t i = 0; i < oracle.params.size(); ++i) {
            if (layer.packed.params[i].scale != oracle.params[i].scale ||
                layer.packed.params[i].zero_point != oracle.params[i].zero_point) {
                c.require(false, "group params differ at trial " + std::to_string(trial));
                return;
            }
        }
    }
}

// ---------------------------------------------------------------- 5
void criterion_dense_reference(Checker& c) {
    QuantizerConfig cfg;
    cfg.group_size = 8;
    cfg.block_size = 8;
    cfg.reorder_mode = ReorderMode::none;
    cfg.scale_search = false;
    double worst = 0.0;
    for (int seed = 0; seed < 10; ++seed) {
        auto g = test::rng(5000 + std::uint64_t(seed));
        const Matrix w = test::random_gaussian(g, 16, 32);
        const Matrix x = test::correlated_activations(g, 32, 96, 0.7);
        HessianState state = HessianState::init(32);
        accumulate_hessian(state, x);
        const auto layer =
            dpq_quantize_layer(w, finalize_hessian(state, cfg.damp_factor), cfg);
        const auto ref = test::dense_reference_quantize(
            w, state.h, cfg.group_size, cfg.damp_factor, cfg.fp8_format());
        worst = std::max(worst, test::relative_fro_diff(dequantize_weights_bf16(layer),
                                                        ref.recon_bf16));
    }
    c.require(worst <= 1e-6,
              "blocked vs dense reference divergence " + fmt_double(worst) + " > 1e-6");
}

// ---------------------------------------------------------------- 6
void criterion_compensation_ordering(Checker& c) {
    QuantizerConfig cfg;
    cfg.group_size = 128;
    cfg.block_size = 128;
    cfg.reorder_mode = ReorderMode::gar;
    cfg.redequant_round = true; // hardware-faithful INT4->FP8 dequant snap
    std::vector<double> e_dpq, e_naive, e_rtn;
    int dpq_beats_rtn = 0;
    for (int seed = 0; seed < 20; ++seed) {
        auto g = test::rng(6000 + std::uint64_t(seed));
        const Matrix w = test::random_gaussian(g, 256, 512);
        const Matrix x = test::correlated_activations(g, 512, 2048, 0.9);
        HessianState state = HessianState::init(512);
        accumulate_hessian(state, x);
        const HessianState fin = finalize_hessian(state, cfg.damp_factor);

        QuantizerConfig dpq_cfg = cfg;
        dpq_cfg.compensation = CompensationMode::dual;
        QuantizerConfig naive_cfg = cfg;
        naive_cfg.compensation = CompensationMode::int4_only;
        QuantizerConfig rtn_cfg = cfg;
        rtn_cfg.compensation = CompensationMode::none;

        const double dpq_err =
            relative_objective(w, quantize_layer(w, &fin, dpq_cfg), state.h);
        const double naive_err =
            relative_objective(w, quantize_layer(w, &fin, naive_cfg), state.h);
        const double rtn_err =
            relative_objective(w, quantize_layer(w, &fin, rtn_cfg), state.h);
        e_dpq.push_back(dpq_err);
        e_naive.push_back(naive_err);
        e_rtn.push_back(rtn_err);
        if (dpq_err < rtn_err) ++dpq_beats_rtn;
    }
    const double m_dpq = median(e_dpq), m_naive = median(e_naive), m_rtn = median(e_rtn);
    c.require(m_dpq < m_naive, "median dpq " + fmt_double(m_dpq) +
                                   " !< median int4-only " + fmt_double(m_naive));
    c.require(m_naive < m_rtn, "median int4-only " + fmt_double(m_naive) +
                                   " !< median rtn " + fmt_double(m_rtn));
    c.require(dpq_beats_rtn >= 18, "dpq beat rtn in only " +
                                       std::to_string(dpq_beats_rtn) + "/20 trials");
}

// ---------------------------------------------------------------- 7
namespace cond_est {

double largest_eigenvalue(const Matrix& h, std::mt19937_64& g) {
    std::normal_distribution<double> dist;
    std::vector<double> v(h.rows);
    for (double& e : v) e = dist(g);
    double lambda = 0.0;
    for (int it = 0; it < 60; ++it) {
        std::vector<double> next(h.rows, 0.0);
        for (std::size_t i = 0; i < h.rows; ++i)
            for (std::size_t j = 0; j < h.cols; ++j)
                next[i] += h(i, j) * v[j];
        double norm = 0.0;
        for (double e : next) norm += e * e;
        norm = std::sqrt(norm);
        lambda = norm;
        for (std::size_t i = 0; i < h.rows; ++i) v[i] = next[i] / norm;
    }
    return lambda;
}

double smallest_eigenvalue(const Matrix& h, std::mt19937_64& g) {
    Matrix chol = h;
    cholesky_lower_inplace(chol);
    std::normal_distribution<double> dist;
    std::vector<double> v(h.rows), y(h.rows);
    for (double& e : v) e = dist(g);
    double inv_lambda = 0.0;
    for (int it = 0; it < 60; ++it) {
        // solve (L L^T) next = v
        for (std::size_t i = 0; i < h.rows; ++i) {
            double sum = v[i];
            for (std::size_t k = 0; k < i; ++k) sum -= chol(i, k) * y[k];
            y[i] = sum / chol(i, i);
        }
        std::vector<double> next(h.rows, 0.0);
        for (std::size_t ii = h.rows; ii-- > 0;) {
            double sum = y[ii];
            for (std::size_t k = ii + 1; k < h.rows; ++k)
                sum -= chol(k, ii) * next[k];
            next[ii] = sum / chol(ii, ii);
        }
        double norm = 0.0;
        for (double e : next) norm += e * e;
        norm = std::sqrt(norm);
        inv_lambda = norm;
        for (std::size_t i = 0; i < h.rows; ++i) v[i] = next[i] / norm;
    }
    return 1.0 / inv_lambda;
}

} // namespace cond_est

void criterion_reorder_ablation(Checker& c) {
    QuantizerConfig cfg;
    cfg.group_size = 128;
    cfg.block_size = 128;
    cfg.compensation = CompensationMode::dual;
    cfg.redequant_round = true;
    std::vector<double> e_full, e_gar, e_none;
    int gar_beats_none = 0;
    for (int seed = 0; seed < 20; ++seed) {
        auto g = test::rng(7000 + std::uint64_t(seed));
        const Matrix w = test::random_gaussian(g, 128, 512);
        // log-spaced feature scales spread the Hessian diagonal over several
        // orders of magnitude
        std::vector<double> sigma(512);
        std::uniform_real_distribution<double> jitter(0.0, 0.25);
        for (std::size_t i = 0; i < sigma.size(); ++i)
            sigma[i] = std::pow(10.0, 1.75 * double(i) / 511.0 + jitter(g));
        std::shuffle(sigma.begin(), sigma.end(), g);
        const Matrix x = test::correlated_activations(g, 512, 1024, 0.5, sigma);
        HessianState state = HessianState::init(512);
        accumulate_hessian(state, x);
        const double cond = cond_est::largest_eigenvalue(state.h, g) /
                            cond_est::smallest_eigenvalue(state.h, g);
        c.require(cond >= 1e3, "hessian condition number " + fmt_double(cond) +
                                   " < 1e3 at seed " + std::to_string(seed));
        const HessianState fin = finalize_hessian(state, cfg.damp_factor);

        QuantizerConfig full_cfg = cfg;
        full_cfg.reorder_mode = ReorderMode::full;
        QuantizerConfig gar_cfg = cfg;
        gar_cfg.reorder_mode = ReorderMode::gar;
        QuantizerConfig none_cfg = cfg;
        none_cfg.reorder_mode = ReorderMode::none;

        const double full_err =
            relative_objective(w, quantize_layer(w, &fin, full_cfg), state.h);
        const double gar_err =
            relative_objective(w, quantize_layer(w, &fin, gar_cfg), state.h);
        const double none_err =
            relative_objective(w, quantize_layer(w, &fin, none_cfg), state.h);
        e_full.push_back(full_err);
        e_gar.push_back(gar_err);
        e_none.push_back(none_err);
        if (gar_err < none_err) ++gar_beats_none;
    }
    const double m_full = median(e_full), m_gar = median(e_gar), m_none = median(e_none);
    c.require(m_full <= m_gar, "median full " + fmt_double(m_full) +
                                   " !<= median gar " + fmt_double(m_gar));
    c.require(m_gar <= m_none, "median gar " + fmt_double(m_gar) +
                                   " !<= median unordered " + fmt_double(m_none));
    c.require(gar_beats_none >= 15, "gar beat unordered in only " +
                                        std::to_string(gar_beats_none) + "/20 trials");
}

// ---------------------------------------------------------------- 8
void criterion_gar_structure(Checker& c) {
    auto g = test::rng(8);
    const Matrix w = test::random_gaussian(g, 256, 512);
    const Matrix x = test::correlated_activations(g, 512, 768, 0.6);
    HessianState state = HessianState::init(512);
    accumulate_hessian(state, x);
    QuantizerConfig cfg;
    cfg.group_size = 128;
    cfg.reorder_mode = ReorderMode::gar;
    const auto layer = dpq_quantize_layer(w, finalize_hessian(state, 0.01), cfg);

    c.require(layer.packed.params.size() == 256 * 4, "params count mismatch");
    // every original 128-column group maps onto one aligned permuted block
    const auto& p = layer.permutation;
    for (std::size_t grp = 0; grp < 4; ++grp) {
        std::uint32_t lo = p.perm[grp * 128], hi = lo;
        for (std::size_t i = grp * 128; i < (grp + 1) * 128; ++i) {
            lo = std::min(lo, p.perm[i]);
            hi = std::max(hi, p.perm[i]);
        }
        c.require(hi - lo == 127 && lo % 128 == 0,
                  "group " + std::to_string(grp) + " not block-aligned");
    }
    // dequantization indexes params purely by original column / group_size
    for (std::size_t r = 0; r < 256; r += 51)
        for (std::size_t col = 0; col < 512; ++col)
            if (&layer.param_for(r, col) != &layer.packed.param(r, col / 128)) {
                c.require(false, "param lookup is not original-order aligned");
                return;
            }
}

// ---------------------------------------------------------------- 9
void criterion_mode_monotonicity(Checker& c) {
    std::vector<double> e_bf16, e_w8a8, e_w4a16, e_w4a8;
    for (int seed = 0; seed < 20; ++seed) {
        auto g = test::rng(9000 + std::uint64_t(seed));
        const Matrix w = test::random_gaussian(g, 64, 128);
        const Matrix x_calib = test::correlated_activations(g, 128, 512, 0.6);
        const Matrix x_eval = test::correlated_activations(g, 128, 256, 0.6);
        HessianState state = HessianState::init(128);
        accumulate_hessian(state, x_calib);
        QuantizerConfig cfg;
        cfg.group_size = 32;
        cfg.block_size = 32;
        const auto layer = dpq_quantize_layer(w, finalize_hessian(state, 0.01), cfg);
        const Matrix batches[] = {x_calib};
        const auto sx = calibrate_activation_scale(batches, cfg.fp8_format(), false);

        SimInputs in;
        in.layer = &layer;
        in.act_scale = &sx;
        in.fmt = cfg.fp8_format();
        EvalReport report;
        const SimMode modes[] = {SimMode::bf16, SimMode::w8a8, SimMode::w4a16,
                                 SimMode::w4a8};
        evaluate_layer(report, "layer", w, x_eval, modes, in);
        for (const auto& rec : report.records) {
            if (rec.mode == "bf16") e_bf16.push_back(rec.relative_output_error);
            if (rec.mode == "w8a8") e_w8a8.push_back(rec.relative_output_error);
            if (rec.mode == "w4a16") e_w4a16.push_back(rec.relative_output_error);
            if (rec.mode == "w4a8") e_w4a8.push_back(rec.relative_output_error);
        }
    }
    c.require(median(e_bf16) <= median(e_w8a8), "median bf16 > median w8a8");
    c.require(median(e_w8a8) <= median(e_w4a8), "median w8a8 > median w4a8");
    c.require(median(e_bf16) <= median(e_w4a16), "median bf16 > median w4a16");
    c.require(median(e_w4a16) <= median(e_w4a8), "median w4a16 > median w4a8");
}

// ---------------------------------------------------------------- 10
#ifndef DPQ_CLI_PATH
#define DPQ_CLI_PATH "dpq"
#endif

struct TempTree {
    fs::path root;
    TempTree() {
        root = fs::temp_directory_path() /
               ("dpq_accept_" + std::to_string(std::random_device{}()));
        fs::create_directories(root);
    }
    ~TempTree() {
        std::error_code ec;
        fs::remove_all(root, ec);
    }
};

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd =
        std::string("\"") + DPQ_CLI_PATH + "\" " + args + " >> " + log.string() + " 2>&1";
    return std::system(cmd.c_str());
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion_cli_determinism(Checker& c) {
    TempTree tmp;
    const fs::path log = tmp.root / "cli.log";
    auto g = test::rng(10);

    {
        TensorContainer::Writer weights(tmp.root / "weights");
        weights.add_matrix("fc0", test::random_gaussian(g, 32, 64), Dtype::f32);
        weights.add_matrix("fc1", test::random_gaussian(g, 16, 64), Dtype::f32);
        weights.finish();
        TensorContainer::Writer acts(tmp.root / "acts");
        acts.add_matrix("fc0", test::correlated_activations(g, 64, 256, 0.6), Dtype::f32);
        acts.add_matrix("fc1", test::correlated_activations(g, 64, 256, 0.6), Dtype::f32);
        acts.finish();
    }

    int rc = run_cli("calibrate --weights " + (tmp.root / "weights").string() +
                         " --acts " + (tmp.root / "acts").string() + " --out " +
                         (tmp.root / "hess").string(),
                     log);
    c.require(rc == 0, "calibrate exited with " + std::to_string(rc));

    const std::string quant_args =
        "quantize --weights " + (tmp.root / "weights").string() + " --hessians " +
        (tmp.root / "hess").string() + " --group-size 32 --reorder gar --seed 7";
    rc = run_cli(quant_args + " --out " + (tmp.root / "out1").string(), log);
    c.require(rc == 0, "first quantize exited with " + std::to_string(rc));
    rc = run_cli(quant_args + " --out " + (tmp.root / "out2").string(), log);
    c.require(rc == 0, "second quantize exited with " + std::to_string(rc));
    if (!c.failures.empty()) return;

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(tmp.root / "out1"))
        files.push_back(e.path().filename());
    c.require(!files.empty(), "quantize produced no files");
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        if (slurp(tmp.root / "out1" / f) != slurp(tmp.root / "out2" / f)) {
            c.require(false, "artifact file differs between runs: " + f.string());
            return;
        }
        if (!fs::exists(tmp.root / "out2" / f)) {
            c.require(false, "file missing from second run: " + f.string());
            return;
        }
    }
}

struct Criterion {
    int id;
    const char* title;
    std::function<void(Checker&)> fn;
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "E4M3 exhaustive idempotence and grid maxima (240 / 448)",
         criterion_grid_idempotence},
        {2, "INT4 packing byte and tensor round-trips", criterion_packing},
        {3, "Cholesky factor vs dense inverse oracle (<= 1e-6)",
         criterion_cholesky_oracle},
        {4, "identity-Hessian quantization equals the elementwise RTN oracle",
         criterion_identity_hessian},
        {5, "blocked Cholesky path matches the dense reference (<= 1e-6)",
         criterion_dense_reference},
        {6, "error ordering: dpq < int4-only < rtn, dpq beats rtn >= 18/20",
         criterion_compensation_ordering},
        {7, "reorder ablation: full <= gar <= unordered, gar wins >= 15/20",
         criterion_reorder_ablation},
        {8, "gar artifacts keep one scale/zero-point per original group",
         criterion_gar_structure},
        {9, "mode monotonicity: bf16 <= w8a8 <= w4a8 and bf16 <= w4a16 <= w4a8",
         criterion_mode_monotonicity},
        {10, "CLI quantize is byte-identical across runs", criterion_cli_determinism},
    };

    int only = 0;
    if (argc > 1) only = std::atoi(argv[1]);

    int failed = 0;
    for (const auto& crit : criteria) {
        if (only != 0 && crit.id != only) continue;
        Checker c;
        const auto start = std::chrono::steady_clock::now();
        try {
            crit.fn(c);
        } catch (const std::exception& e) {
            c.require(false, std::string("exception: ") + e.what());
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                .count();
        if (c.failures.empty()) {
            std::printf("[PASS] criterion %2d: %s (%.2f s)\n", crit.id, crit.title, secs);
        } else {
            ++failed;
            std::printf("[FAIL] criterion %2d: %s (%.2f s)\n", crit.id, crit.title, secs);
            for (const auto& f : c.failures)
                std::printf("       - %s\n", f.c_str());
        }
        std::fflush(stdout);
    }
    if (failed != 0) std::printf("%d criterion(s) failed\n", failed);
    return failed == 0 ? 0 : 1;
}
