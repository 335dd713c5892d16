#pragma once

// Run configuration: presets, flat `key = value` files and overrides.
// Precedence, lowest first: preset, config file, command-line flags.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "rledit/data.hpp"
#include "rledit/model.hpp"
#include "rledit/trainer.hpp"

namespace rledit {

struct RunConfig {
    std::string preset = "desk";
    std::uint64_t seed = 0;
    ModelConfig model;
    CorpusConfig data;
    bool resample_targets = true;
    PretrainOptions pretrain;
    TrainerConfig trainer;
    int edit_stream_len = 20;  // batches of the held-out stream to edit

    // Seeds of each stage, derived from `seed`.
    std::uint64_t data_seed() const { return seed; }
    std::uint64_t pretrain_seed() const { return seed + 1; }
    std::uint64_t hypernet_seed() const { return seed + 2; }
    std::uint64_t sampler_seed() const { return seed + 3; }
    std::uint64_t trainer_seed() const { return seed + 4; }

    // Throws ConfigError naming the field.
    void validate() const;
    // One `key = value` line per setting, sorted by key.
    std::string to_text() const;
};

// "desk" or "paper"; throws ConfigError("preset") otherwise.
RunConfig make_preset(const std::string& name);

// Sets one dotted key. Throws ConfigError naming the key on unknown keys or bad values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses `key = value` lines with `#` comments. Throws MissingFileError, or
// ConfigError naming the key (or "line N" for malformed lines).
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

}  // namespace rledit
