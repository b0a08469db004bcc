#pragma once

#include <stdexcept>
#include <string>

namespace voxdiff {

// Error taxonomy mirrors the CLI exit codes: config errors exit 2,
// missing upstream artifacts exit 3, numeric failures (NaN/Inf) exit 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace voxdiff
