// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace splatfill {

// Exit-code classes used across the library and mirrored by the C API:
//   config/parameter misuse -> 2, data/state/io -> 3, numerical/training -> 4.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParamError*>(&e)) return 2;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 3;
}

} // namespace splatfill
