#pragma once

#include "r2moe/lifelong_trainer.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace r2moe {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// JSON text holding every stored number of the state plus its bookkeeping.
/// `config_json`, when non-empty, must be a JSON object and is echoed verbatim (as parsed) under "config".
std::string serialize_checkpoint(const LifelongState& state, const std::string& config_json = {});
/// Inverse of serialize_checkpoint; serialize(deserialize(text)) reproduces text byte for byte.
LifelongState deserialize_checkpoint(const std::string& text, std::string* config_json = nullptr);

void save_checkpoint(const std::filesystem::path& path, const LifelongState& state,
                     const std::string& config_json = {});
LifelongState load_checkpoint(const std::filesystem::path& path, std::string* config_json = nullptr);

}  // namespace r2moe
