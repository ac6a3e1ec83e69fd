// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "minicache/commands.hpp"
#include "minicache/minicache.hpp"

namespace {

using namespace minicache;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<float> t;
    std::optional<float> gamma;
    std::optional<std::string> mode;
    std::optional<std::string> merge;
    std::optional<std::size_t> start_layer;
    std::optional<int> bits;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "flat key = value run configuration");
        app->add_option("--seed", seed, "RNG seed");
        app->add_option("--t", t, "SLERP interpolation parameter");
        app->add_option("--gamma", gamma, "retention threshold");
        app->add_option("--mode", mode, "retention rule: paper|distant");
        app->add_option("--merge", merge, "merge function: slerp|mean|maxnorm");
        app->add_option("--start-layer", start_layer, "first layer eligible for merging");
        app->add_option("--bits", bits, "direction quantization: 0, 4 or 8");
    }

    // Config file first, then command-line overrides.
    RunConfig resolve() const {
        RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
        if (seed) rc.seed = *seed;
        if (t) rc.t = *t;
        if (gamma) rc.gamma = *gamma;
        if (mode) rc.mode = parse_mode(*mode);
        if (merge) rc.merge = parse_merge_fn(*merge);
        if (start_layer) rc.start_layer = *start_layer;
        if (bits) set_run_option(rc, "bits", std::to_string(*bits));
        return rc;
    }
};

void emit(const std::string& text, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
    out << text;
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MiniCache cross-layer KV cache compression tools"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string input, output, stats, dump_out;
    bool histogram = false;
    std::size_t bins = 20;
    std::string t_grid, gamma_grid;
    MemoryInputs mem;

    auto* analyze = app.add_subcommand("analyze", "adjacent-layer angular distance CSV");
    analyze->add_option("dump", input, "KV dump file")->required();
    analyze->add_flag("--histogram", histogram, "emit per-token distance histogram instead");
    analyze->add_option("--bins", bins, "histogram bin count")->check(CLI::PositiveNumber);
    analyze->add_option("-o,--output", output, "output path (default stdout)");

    auto* compress_cmd = app.add_subcommand("compress", "prefill-compress a dump into an archive");
    compress_cmd->add_option("dump", input, "KV dump file")->required();
    compress_cmd->add_option("-o,--output", output, "archive path")->required();
    compress_cmd->add_option("--stats", stats, "JSON stats path (default stdout)");
    flags.attach(compress_cmd);

    auto* restore_cmd = app.add_subcommand("restore", "expand an archive back into a KV dump");
    restore_cmd->add_option("archive", input, "archive file")->required();
    restore_cmd->add_option("-o,--output", output, "dump path")->required();

    auto* simulate_cmd = app.add_subcommand("simulate", "full cache vs MiniCache on the toy decoder");
    simulate_cmd->add_option("-o,--output", output, "JSON report path (default stdout)");
    simulate_cmd->add_option("--dump-out", dump_out, "also write the prefill KV dump");
    flags.attach(simulate_cmd);

    auto* ablate_cmd = app.add_subcommand("ablate", "restoration error over a (t, gamma) grid");
    ablate_cmd->add_option("dump", input, "KV dump file")->required();
    ablate_cmd->add_option("--t-grid", t_grid, "comma separated t values");
    ablate_cmd->add_option("--gamma-grid", gamma_grid, "comma separated gamma values");
    ablate_cmd->add_option("-o,--output", output, "CSV path (default stdout)");
    flags.attach(ablate_cmd);

    auto* memory_cmd = app.add_subcommand("memory", "analytical memory footprint");
    memory_cmd->add_option("--batch", mem.batch, "batch size");
    memory_cmd->add_option("--layers", mem.layers, "layer count");
    memory_cmd->add_option("--hidden", mem.hidden, "hidden width");
    memory_cmd->add_option("--input-len", mem.input_len, "input length");
    memory_cmd->add_option("--output-len", mem.output_len, "output length");
    memory_cmd->add_option("--gamma", mem.gamma, "retention threshold");
    memory_cmd->add_option("--bytes-per-scalar", mem.bytes_per_scalar, "2 for FP16, 4 for f32");
    int mem_bits = 0;
    memory_cmd->add_option("--bits", mem_bits, "direction quantization: 0, 4 or 8");
    memory_cmd->add_option("-o,--output", output, "JSON path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (analyze->parsed()) {
            const KvDump dump = read_dump(input);
            emit(histogram ? histogram_csv(dump, bins) : analyze_csv(dump), output);
        } else if (compress_cmd->parsed()) {
            const RunConfig rc = flags.resolve();
            const CompressResult res = compress(read_dump(input), rc);
            detail::write_file(output, res.archive);
            emit(dump_json(res.stats), stats);
        } else if (restore_cmd->parsed()) {
            const auto caches = decode_archive(detail::read_file(input));
            KvDump out;
            for (const auto& cache : caches) {
                KvDump seq;
                for (std::size_t l = 0; l < cache.num_layers(); ++l) seq.layers.push_back(restore_layer(cache, l));
                if (out.layers.empty()) {
                    out = std::move(seq);
                    out.dims = Dims{0, static_cast<std::uint32_t>(cache.num_layers()),
                                    static_cast<std::uint32_t>(out.layers.front().key.rows()),
                                    static_cast<std::uint32_t>(cache.hidden())};
                } else {
                    for (std::size_t l = 0; l < out.layers.size(); ++l) {
                        for (std::size_t i = 0; i < seq.layers[l].key.rows(); ++i) {
                            out.layers[l].key.append_row(seq.layers[l].key.row(i));
                            out.layers[l].value.append_row(seq.layers[l].value.row(i));
                        }
                    }
                }
                ++out.dims.batch;
            }
            write_dump(out, output);
        } else if (simulate_cmd->parsed()) {
            const SimulationResult res = simulate(flags.resolve());
            if (!dump_out.empty()) write_dump(res.dump, dump_out);
            emit(dump_json(res.report), output);
        } else if (ablate_cmd->parsed()) {
            RunConfig rc = flags.resolve();
            if (!t_grid.empty()) set_run_option(rc, "t_grid", t_grid);
            if (!gamma_grid.empty()) set_run_option(rc, "gamma_grid", gamma_grid);
            emit(ablate_csv(read_dump(input), rc), output);
        } else if (memory_cmd->parsed()) {
            if (mem_bits != 0) {
                mem.quant = QuantConfig{mem_bits, 32};
            }
            emit(dump_json(memory_json(mem)), output);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
