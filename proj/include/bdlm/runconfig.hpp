#pragma once

#include <string>

#include "bdlm/decode.hpp"
#include "bdlm/trainer.hpp"

namespace bdlm {

/// Flat "key = value" run configuration covering every training, noise and
/// decoding knob. Unknown keys are errors; parse -> serialize -> parse is a
/// fixed point. Precedence is flags > file > defaults, applied by the CLI.
struct RunConfig {
    TrainConfig train;
    DecodeConfig decode;

    static RunConfig defaults() { return RunConfig{}; }
    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text, const std::string& origin = "config");

    /// Apply one override; throws on unknown key, type or range violations.
    void set(const std::string& key, const std::string& value);

    /// Every key, alphabetically, one per line.
    std::string serialize() const;

    void validate() const;
};

}  // namespace bdlm
