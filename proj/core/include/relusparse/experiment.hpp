#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "relusparse/model.hpp"
#include "relusparse/train.hpp"

namespace relusparse {

/// exit_code 2 = config parse error, 3 = validation error, 1 = runtime.
class ExperimentError : public std::runtime_error {
public:
    ExperimentError(int exit_code, const std::string& what)
        : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

struct ExperimentConfig {
    std::string experiment;  // one of the CLI subcommands
    ModelConfig model;
    TrainConfig train;
    std::string out_dir = "out";
    std::string corpus_path = "data/corpus.txt";
    std::uint64_t seed = 0;
    // experiment-specific scalar options as strings, e.g. {"alpha","0.8"}
    std::map<std::string, std::string> options;

    /// Parses the config document. Throws ExperimentError(2) on malformed
    /// JSON and ExperimentError(3) on schema/validation problems, with the
    /// offending section or field named.
    static ExperimentConfig from_json_text(const std::string& text);
    /// Applies a dotted override like "model.d_model=128" to a JSON document.
    static std::string apply_override(const std::string& json_text,
                                      const std::string& key_eq_value);

    std::string canonical_json() const;
    std::uint64_t config_hash() const;  // FNV-1a over canonical_json

    double opt_double(const std::string& key, double fallback) const;
    std::size_t opt_size(const std::string& key, std::size_t fallback) const;
    std::string opt_str(const std::string& key, const std::string& fallback) const;
};

/// Runs the experiment, writes its artifacts plus manifest.json under
/// out_dir, and returns the artifact paths. Identical config + seed yields
/// byte-identical artifacts.
std::vector<std::string> run_experiment(const ExperimentConfig& config);

std::uint64_t fnv1a(const std::string& s);

const std::vector<std::string>& experiment_names();

}  // namespace relusparse
