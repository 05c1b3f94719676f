#pragma once

#include <cstdint>
#include <string>

namespace flowppf {

// Hex digest of a byte string / file; used for input digests in run manifests.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file_hex(const std::string& path);

}  // namespace flowppf
