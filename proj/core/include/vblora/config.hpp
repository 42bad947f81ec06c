#pragma once

// Run configuration: a flat `key = value` text file covering the model, the
// adapter and the optimizer. Unknown keys are rejected; every error message
// starts with the offending key.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "vblora/errors.hpp"
#include "vblora/harness.hpp"
#include "vblora/transformer.hpp"

namespace vblora {

/// Validation failure tied to a single configuration key.
class ConfigError : public InvalidArgument {
public:
    ConfigError(std::string key, const std::string& message)
        : InvalidArgument(key + ": " + message), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

struct RunConfig {
    TinyTransformerSpec model;
    AdapterConfig adapter;
    TrainConfig train;
    std::uint64_t seed = 0;

    /// Cross-field checks (divisibility, k <= h, positive learning rates).
    void validate() const;
};

/// Keys accepted by parse_config, in the order resolved_config writes them.
const std::vector<std::string_view>& config_keys();

/// Apply `key = value` lines on top of `base`. '#' starts a comment.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Every key with its effective value, one per line, parseable by parse_config.
std::string resolved_config(const RunConfig& config);

/// Named starting points: "desk" (the default; all modules, tuned learning
/// rates) and "tiny" (small enough for exhaustive finite differences).
RunConfig preset_config(std::string_view name);

/// Everything a training run needs, each part seeded from its own stream of
/// config.seed.
struct RunSetup {
    TinyTransformer<float> model;
    PermutationCopyTask task;
    TrainConfig train;
};

/// Validates `config` first.
RunSetup make_run(const RunConfig& config);

}  // namespace vblora
