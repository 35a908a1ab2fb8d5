#pragma once

// Flat key = value run configuration with dotted namespaces. Unknown keys
// are rejected and every value is type-checked against the schema. Merge
// order: preset defaults, then the config file, then --set overrides.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cect/config.hpp"
#include "cect/data.hpp"
#include "cect/experiments.hpp"
#include "cect/report.hpp"
#include "cect/train.hpp"

namespace cect::cli {

struct ResolvedConfig {
    CectConfig model;
    train::TrainConfig train;
    eval::SweepSpec sweep;
    report::TsneConfig tsne;

    std::string data_root;         // directory or CSV manifest; empty = synthetic data
    data::SplitSpec split;
    std::string external_manifest; // test manifest for the two-way split mode
    int synth_per_class = 16;
    data::AugmentationConfig aug;

    std::string preset = "base";
    std::uint64_t seed = 0;

    // resolved key -> value, sorted; written next to every run's artifacts
    std::map<std::string, std::string> snapshot;
};

// Parse `key = value` lines ('#' comments, blank lines allowed).
std::map<std::string, std::string> parse_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text,
                                                 const std::string& origin);

ResolvedConfig load_config(const std::string& config_path,
                           const std::vector<std::string>& overrides, const std::string& preset,
                           std::uint64_t seed);

std::string snapshot_text(const ResolvedConfig& cfg);

} // namespace cect::cli
