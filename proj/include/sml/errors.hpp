#pragma once

#include <stdexcept>
#include <string>

namespace sml {

// Error taxonomy used across the library. The CLI maps these onto
// process exit codes (usage=1, data/format=2, numeric=3).
struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace sml
