#pragma once

#include <string>

namespace flowcast {

// Hex-encoded SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

} // namespace flowcast
