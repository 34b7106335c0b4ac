// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace splatfill {

// SHA-256 hex digest of a byte range / file / double-precision tensor data.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_file_hex(const std::string& path);
std::string sha256_doubles_hex(const std::vector<const double*>& blocks,
                               const std::vector<size_t>& counts);

} // namespace splatfill
