// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Flat "key = value" run configuration. Blank lines and '#' comments are
// ignored; unknown keys are rejected.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "minicache/cache_engine.hpp"
#include "minicache/error.hpp"

namespace minicache {

struct RunConfig {
    float t = 0.6f;
    float gamma = 0.05f;
    float eps_parallel = 1e-6f;
    RetentionMode mode = RetentionMode::PaperFormula;
    bool inclusive = true;
    MergeFn merge = MergeFn::Slerp;
    // Defaults to layers / 2 when unset.
    std::optional<std::size_t> start_layer;
    int bits = 0;
    std::size_t group_size = 32;

    // simulate
    std::uint64_t seed = 0;
    std::size_t layers = 8;
    std::size_t hidden = 32;
    std::size_t prompt_len = 16;
    std::size_t steps = 8;
    bool tied_pairs = false;

    // ablate
    std::vector<float> t_grid{0.0f, 0.25f, 0.5f, 0.6f, 0.75f, 1.0f};
    std::vector<float> gamma_grid{0.0f, 0.01f, 0.02f, 0.05f, 0.1f, 1.0f};

    std::string output;
    std::string stats;

    EngineConfig engine(std::size_t num_layers) const {
        EngineConfig cfg = EngineConfig::for_layers(num_layers);
        if (start_layer) cfg.start_layer = *start_layer;
        cfg.merge.t = t;
        cfg.merge.eps_parallel = eps_parallel;
        cfg.retention.gamma = gamma;
        cfg.retention.mode = mode;
        cfg.retention.inclusive_at_gamma_one = inclusive;
        cfg.merge_fn = merge;
        if (bits != 0) cfg.quant = QuantConfig{bits, group_size};
        cfg.validate();
        return cfg;
    }
};

inline MergeFn parse_merge_fn(std::string_view s) {
    if (s == "slerp") return MergeFn::Slerp;
    if (s == "mean") return MergeFn::Mean;
    if (s == "maxnorm") return MergeFn::MaxNorm;
    throw Error(ErrorCode::InvalidConfig, "merge must be slerp|mean|maxnorm, got '" + std::string(s) + "'");
}

inline RetentionMode parse_mode(std::string_view s) {
    if (s == "paper") return RetentionMode::PaperFormula;
    if (s == "distant") return RetentionMode::DistantFirst;
    throw Error(ErrorCode::InvalidConfig, "mode must be paper|distant, got '" + std::string(s) + "'");
}

inline const char* to_string(RetentionMode m) { return m == RetentionMode::PaperFormula ? "paper" : "distant"; }

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream in(value);
    T out{};
    in >> out;
    if (in.fail() || !in.eof()) throw Error(ErrorCode::InvalidConfig, "bad value for " + key + ": '" + value + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw Error(ErrorCode::InvalidConfig, "bad boolean for " + key + ": '" + value + "'");
}

inline std::vector<float> parse_grid(const std::string& key, const std::string& value) {
    std::vector<float> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<float>(key, trim(item)));
    if (out.empty()) throw Error(ErrorCode::InvalidConfig, key + " is empty");
    return out;
}

// Shortest decimal that parses back to the same float.
inline std::string shortest(float v) {
    char buf[32];
    for (int p = 1; p <= 9; ++p) {
        std::snprintf(buf, sizeof(buf), "%.*g", p, static_cast<double>(v));
        if (std::strtof(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string join_grid(const std::vector<float>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + shortest(v[i]);
    return out;
}

} // namespace detail

/// Applies one key/value to the config; shared by the file parser and CLI
/// overrides.
inline void set_run_option(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_number;
    if (key == "t") c.t = parse_number<float>(key, value);
    else if (key == "gamma") c.gamma = parse_number<float>(key, value);
    else if (key == "eps_parallel") c.eps_parallel = parse_number<float>(key, value);
    else if (key == "mode") c.mode = parse_mode(value);
    else if (key == "inclusive") c.inclusive = detail::parse_bool(key, value);
    else if (key == "merge") c.merge = parse_merge_fn(value);
    else if (key == "start_layer") c.start_layer = parse_number<std::size_t>(key, value);
    else if (key == "bits") c.bits = parse_number<int>(key, value);
    else if (key == "group_size") c.group_size = parse_number<std::size_t>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "layers") c.layers = parse_number<std::size_t>(key, value);
    else if (key == "hidden") c.hidden = parse_number<std::size_t>(key, value);
    else if (key == "prompt_len") c.prompt_len = parse_number<std::size_t>(key, value);
    else if (key == "steps") c.steps = parse_number<std::size_t>(key, value);
    else if (key == "tied_pairs") c.tied_pairs = detail::parse_bool(key, value);
    else if (key == "t_grid") c.t_grid = detail::parse_grid(key, value);
    else if (key == "gamma_grid") c.gamma_grid = detail::parse_grid(key, value);
    else if (key == "output") c.output = value;
    else if (key == "stats") c.stats = value;
    else throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
    if (c.bits != 0 && c.bits != 4 && c.bits != 8) throw Error(ErrorCode::InvalidConfig, "bits must be 0, 4 or 8");
}

inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(lineno) + ": expected key = value");
        }
        set_run_option(base, detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)));
    }
    return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

inline std::string serialize_run_config(const RunConfig& c) {
    std::ostringstream out;
    out << "t = " << detail::shortest(c.t) << "\n"
        << "gamma = " << detail::shortest(c.gamma) << "\n"
        << "eps_parallel = " << detail::shortest(c.eps_parallel) << "\n"
        << "mode = " << to_string(c.mode) << "\n"
        << "inclusive = " << (c.inclusive ? "true" : "false") << "\n"
        << "merge = " << to_string(c.merge) << "\n";
    if (c.start_layer) out << "start_layer = " << *c.start_layer << "\n";
    out << "bits = " << c.bits << "\n"
        << "group_size = " << c.group_size << "\n"
        << "seed = " << c.seed << "\n"
        << "layers = " << c.layers << "\n"
        << "hidden = " << c.hidden << "\n"
        << "prompt_len = " << c.prompt_len << "\n"
        << "steps = " << c.steps << "\n"
        << "tied_pairs = " << (c.tied_pairs ? "true" : "false") << "\n"
        << "t_grid = " << detail::join_grid(c.t_grid) << "\n"
        << "gamma_grid = " << detail::join_grid(c.gamma_grid) << "\n";
    if (!c.output.empty()) out << "output = " << c.output << "\n";
    if (!c.stats.empty()) out << "stats = " << c.stats << "\n";
    return out.str();
}

} // namespace minicache
