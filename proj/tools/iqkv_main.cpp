// iqkv command-line harness: kernel latency benches, quantization latency and
// error reports, a full decode simulation, and cache snapshot dump/load.
//
// Exit codes: 0 success, 1 invariant or verification failure, 2 usage error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iqkv/iqkv.hpp"

namespace {

// JSON config files mirroring the flag names (flags given on the command line
// win over config values).
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j = nlohmann::json::parse(input);
        std::vector<CLI::ConfigItem> items;
        for (auto it = j.begin(); it != j.end(); ++it) {
            CLI::ConfigItem item;
            item.name = it.key();
            if (it->is_boolean())
                item.inputs = {*it ? std::string("true") : std::string("false")};
            else if (it->is_string())
                item.inputs = {it->get<std::string>()};
            else if (it->is_array())
                for (const auto& e : *it) item.inputs.push_back(e.dump());
            else
                item.inputs = {it->dump()};
            items.push_back(item);
        }
        return items;
    }
};

struct CommonOpts {
    std::uint64_t seed = 0;
    int bits = 2;
    int group_size = 32;
    std::string mode = "hybrid";
    std::size_t w_sink = 32;
    std::size_t w_recent = 96;
    std::string normalize = "on";
    std::string out_path;
    std::string format = "csv";

    iqkv::QuantConfig quant() const {
        iqkv::QuantConfig q;
        q.bits = bits;
        q.group_size = group_size;
        q.mode = iqkv::mode_from_name(mode);
        return q;
    }

    iqkv::WindowConfig windows() const { return {w_sink, w_recent}; }
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->option_defaults()->always_capture_default();
    cmd->add_option("--seed", o.seed, "RNG seed; everything except wall-clock is deterministic");
    cmd->add_option("--bits", o.bits, "code width in bits")->check(CLI::Range(1, 8));
    cmd->add_option("--group-size", o.group_size, "quantization group size")
        ->check(CLI::IsMember({8, 16, 32}));
    cmd->add_option("--mode", o.mode, "quantization mode")
        ->check(CLI::IsMember({"asym", "sym", "hybrid", "hybrid-prefill"}));
    cmd->add_option("--w-sink", o.w_sink, "sink window tokens");
    cmd->add_option("--w-recent", o.w_recent, "recent window tokens");
    cmd->add_option("--normalize", o.normalize, "per-channel key normalization")
        ->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--out", o.out_path, "write the report here instead of stdout");
    cmd->add_option("--format", o.format, "report format")->check(CLI::IsMember({"csv", "md"}));
    cmd->set_config("--config", "", "JSON config mirroring the flag names");
    cmd->config_formatter(std::make_shared<JsonConfig>());
}

void emit(const iqkv::Table& table, const CommonOpts& o) {
    const std::string text = o.format == "md" ? table.markdown() : table.csv();
    if (o.out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream f(o.out_path);
    if (!f) throw std::runtime_error("cannot open output file: " + o.out_path);
    f << text;
}

std::vector<iqkv::ModelPreset> resolve_models(const std::vector<std::string>& names, std::size_t d,
                                              std::size_t heads) {
    if (names.empty()) return iqkv::model_presets();
    std::vector<iqkv::ModelPreset> out;
    for (const auto& n : names) {
        if (n == "custom") {
            if (d == 0 || heads == 0)
                throw CLI::ValidationError("--model custom requires --d and --heads");
            out.push_back({"custom", d, heads});
        } else {
            out.push_back(iqkv::preset_by_name(n));
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized KV cache bench and inspection tool"};
    app.require_subcommand(1);

    CommonOpts matmul_opts, quant_opts, error_opts, sim_opts, dump_opts, load_opts;

    // bench-matmul
    auto* matmul = app.add_subcommand(
        "bench-matmul",
        "time full-precision GEMV vs fused quantized GEMV (inner/outer grouping); csv columns: "
        "model,method,seq_len,median_ms,speedup_vs_ref_pct,speedup_vs_outer_pct");
    add_common(matmul, matmul_opts);
    std::vector<std::string> matmul_models;
    std::vector<std::size_t> matmul_seqs;
    std::size_t matmul_d = 0, matmul_heads = 0;
    int matmul_warmup = 100, matmul_reps = 1000;
    std::uint64_t matmul_max_bytes = 4ull << 30;
    matmul->add_option("--model", matmul_models,
                       "model preset(s): llama-3.2-1b, llama-3.1-8b, llama-2-13b, custom");
    matmul->add_option("--seq-lens", matmul_seqs, "sequence length grid (default 512..131072)");
    matmul->add_option("--d", matmul_d, "model width for --model custom");
    matmul->add_option("--heads", matmul_heads, "head count for --model custom");
    matmul->add_option("--warmup", matmul_warmup, "unmeasured warmup runs");
    matmul->add_option("--reps", matmul_reps, "measured runs (median reported)");
    matmul->add_option("--max-bytes", matmul_max_bytes, "skip shapes above this working-set size");

    // bench-quant
    auto* quant = app.add_subcommand(
        "bench-quant",
        "time quantize_matrix in symmetric vs hybrid mode; csv columns: "
        "model,seq_len,sym_ms,hybrid_ms,ratio");
    add_common(quant, quant_opts);
    std::vector<std::string> quant_models;
    std::vector<std::size_t> quant_seqs;
    std::size_t quant_d = 0, quant_heads = 0;
    int quant_warmup = 100, quant_reps = 1000;
    std::uint64_t quant_max_bytes = 4ull << 30;
    quant->add_option("--model", quant_models, "model preset(s)");
    quant->add_option("--seq-lens", quant_seqs, "sequence length grid");
    quant->add_option("--d", quant_d, "model width for --model custom");
    quant->add_option("--heads", quant_heads, "head count for --model custom");
    quant->add_option("--warmup", quant_warmup, "unmeasured warmup runs");
    quant->add_option("--reps", quant_reps, "measured runs (median reported)");
    quant->add_option("--max-bytes", quant_max_bytes, "skip shapes above this size");

    // error-report
    auto* err = app.add_subcommand(
        "error-report",
        "per-mode reconstruction SSE and normalization effect; csv columns: "
        "sse_asym,sse_sym,sse_hybrid,hybrid_sym_fraction,sse_norm_off,sse_norm_on");
    add_common(err, error_opts);
    std::string err_dist = "gaussian";
    double err_sigma = 1.0, err_outlier_scale = 50.0;
    std::size_t err_outlier_channels = 4, err_rows = 256, err_cols = 256;
    std::string err_axis = "inner";
    err->add_option("--dist", err_dist, "data distribution")
        ->check(CLI::IsMember({"gaussian", "gaussian-outliers"}));
    err->add_option("--sigma", err_sigma, "gaussian sigma");
    err->add_option("--outlier-channels", err_outlier_channels, "amplified channel count");
    err->add_option("--outlier-scale", err_outlier_scale, "amplification factor (>= 1)");
    err->add_option("--rows", err_rows, "matrix rows (tokens)");
    err->add_option("--cols", err_cols, "matrix cols (channels)");
    err->add_option("--axis", err_axis, "grouping axis")->check(CLI::IsMember({"inner", "outer"}));

    // simulate-decode
    auto* sim = app.add_subcommand(
        "simulate-decode",
        "random-weight prefill + decode with per-step error vs a full-precision shadow; "
        "csv columns: step,max_abs_error,k_quantized,v_quantized,k_recent,v_recent,"
        "total_tokens,cache_bytes");
    add_common(sim, sim_opts);
    std::size_t sim_d = 256, sim_heads = 4, sim_prefill = 300, sim_steps = 64;
    std::string sim_model;
    bool sim_no_quant = false;
    sim->add_option("--model", sim_model, "size from a model preset instead of --d/--heads");
    sim->add_option("--d", sim_d, "model width");
    sim->add_option("--heads", sim_heads, "head count");
    sim->add_option("--prefill-len", sim_prefill, "prefill token count");
    sim->add_option("--steps", sim_steps, "decode steps");
    sim->add_flag("--no-quant", sim_no_quant,
                  "disable quantization (windows sized to cover the whole run)");

    // dump
    auto* dump = app.add_subcommand("dump", "build a seeded cache and write its snapshot");
    add_common(dump, dump_opts);
    std::size_t dump_d = 256, dump_prefill = 300, dump_appends = 40;
    dump->add_option("--d", dump_d, "model width");
    dump->add_option("--prefill-len", dump_prefill, "prefill token count");
    dump->add_option("--appends", dump_appends, "decode appends after prefill");
    dump->get_option("--out")->required();

    // load
    auto* load = app.add_subcommand("load", "load a cache snapshot and print its layout");
    add_common(load, load_opts);
    std::string load_dir;
    load->add_option("path", load_dir, "snapshot directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (*matmul) {
            iqkv::BenchSpec spec;
            spec.models = resolve_models(matmul_models, matmul_d, matmul_heads);
            if (!matmul_seqs.empty()) spec.seq_lens = matmul_seqs;
            spec.warmup = matmul_warmup;
            spec.reps = matmul_reps;
            spec.seed = matmul_opts.seed;
            spec.quant = matmul_opts.quant();
            spec.max_bytes = matmul_max_bytes;
            const iqkv::BenchMatmulReport rep = iqkv::cmd_bench_matmul(spec);
            emit(matmul_opts.format == "md" ? rep.to_appendix_table() : rep.to_table(),
                 matmul_opts);
            for (const auto& t : rep.traffic) {
                if (t.outer_scale_loads !=
                    t.inner_scale_loads * static_cast<std::uint64_t>(spec.quant.group_size)) {
                    std::cerr << "traffic model violated for " << t.model << " @" << t.seq_len
                              << "\n";
                    return 1;
                }
                std::cerr << "traffic " << t.model << " @" << t.seq_len
                          << ": scale loads inner=" << t.inner_scale_loads
                          << " outer=" << t.outer_scale_loads << " (ratio exactly "
                          << spec.quant.group_size << ")\n";
            }
        } else if (*quant) {
            iqkv::BenchSpec spec;
            spec.models = resolve_models(quant_models, quant_d, quant_heads);
            if (!quant_seqs.empty()) spec.seq_lens = quant_seqs;
            spec.warmup = quant_warmup;
            spec.reps = quant_reps;
            spec.seed = quant_opts.seed;
            spec.quant = quant_opts.quant();
            spec.max_bytes = quant_max_bytes;
            emit(iqkv::cmd_bench_quant(spec).to_table(), quant_opts);
        } else if (*err) {
            iqkv::SyntheticDataSpec data;
            data.kind = err_dist == "gaussian" ? iqkv::Distribution::Gaussian
                                               : iqkv::Distribution::GaussianChannelOutliers;
            data.sigma = err_sigma;
            data.outlier_channels = err_outlier_channels;
            data.outlier_scale = err_outlier_scale;
            data.seed = error_opts.seed;
            const auto axis =
                err_axis == "inner" ? iqkv::GroupAxis::Inner : iqkv::GroupAxis::Outer;
            emit(iqkv::cmd_error_report(data, error_opts.quant(), axis, err_rows, err_cols)
                     .to_table(),
                 error_opts);
        } else if (*sim) {
            iqkv::ModelDims dims;
            if (!sim_model.empty()) {
                const auto p = iqkv::preset_by_name(sim_model);
                dims = {p.d, p.heads};
            } else {
                dims = {sim_d, sim_heads};
            }
            iqkv::AttentionConfig cfg;
            cfg.quant = sim_opts.quant();
            cfg.windows = sim_opts.windows();
            cfg.normalize = sim_opts.normalize == "on";
            if (sim_no_quant)
                cfg.windows.recent = sim_prefill + sim_steps +
                                     static_cast<std::size_t>(cfg.quant.group_size);
            const iqkv::SimulateResult res =
                iqkv::cmd_simulate_decode(dims, cfg, sim_prefill, sim_steps, sim_opts.seed);
            emit(res.to_table(), sim_opts);
            std::cerr << "simulate-decode: max |quantized - shadow| output error = "
                      << res.max_error << "\n";
            if (!res.ok) return 1;
        } else if (*dump) {
            const iqkv::QuantizedKVCache cache =
                iqkv::build_seeded_cache(dump_opts.quant(), dump_opts.windows(), dump_d,
                                         dump_prefill, dump_appends, dump_opts.seed);
            iqkv::save_cache_snapshot(cache, dump_opts.out_path);
            std::cerr << "wrote snapshot (" << cache.total_tokens() << " tokens) to "
                      << dump_opts.out_path << "\n";
        } else if (*load) {
            const iqkv::QuantizedKVCache cache = iqkv::load_cache_snapshot(load_dir);
            std::cout << "total_tokens=" << cache.total_tokens()
                      << " sink=" << cache.sink_tokens()
                      << " k_quantized=" << cache.k_quantized_tokens()
                      << " v_quantized=" << cache.v_quantized_tokens()
                      << " k_recent=" << cache.k_recent_tokens()
                      << " v_recent=" << cache.v_recent_tokens()
                      << " bits=" << cache.quant_config().bits
                      << " mode=" << iqkv::mode_name(cache.quant_config().mode) << "\n";
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
