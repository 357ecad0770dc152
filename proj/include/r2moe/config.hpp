#pragma once

#include "r2moe/analysis.hpp"
#include "r2moe/denoiser.hpp"
#include "r2moe/lifelong_trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2moe {

inline constexpr int kConfigSchemaVersion = 1;

/// Invalid configuration; `key` is the dotted path of the offending entry.
struct ConfigError : std::runtime_error {
    ConfigError(const std::string& key, const std::string& what)
        : std::runtime_error("config key '" + key + "': " + what), key(key)
    {
    }
    std::string key;
};

struct AblationFlags {
    bool disable_rdm = false;   // beta = 0
    bool disable_sae = false;   // dense softmax over every expert
    bool disable_lrer = false;  // p = 0
    bool disable_hlag = false;  // plain sampling with expert-composed weights, no masks
    bool operator==(const AblationFlags&) const = default;
};

struct GuidedParams {
    double gamma_coarse = 0.3;
    double gamma_fine = 1.0;
    double stage_ratio = 0.6;
};

struct ConceptSetConfig {
    int count = 10;
    std::uint64_t seed = 5;
};

struct RunConfig {
    std::uint64_t seed = 1;
    ModelDims dims;
    ScheduleParams schedule;
    PretrainConfig pretrain;
    TrainConfig train;
    ConceptSetConfig concepts;
    EvalConfig eval;
    GuidedParams guided;
    /// Layout prompts for sampling; empty means pairs of learned concepts side by side.
    std::vector<std::string> sample_prompts;
    AblationFlags ablations;
    bool fast = false;
    int fast_iterations = 150;

    void validate() const;
    /// Training settings after the fast budget and the ablation flags are applied.
    TrainConfig effective_train() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of every field (defaults included); parse_config(dump_config(c)) == c.
std::string dump_config(const RunConfig& config);

}  // namespace r2moe
