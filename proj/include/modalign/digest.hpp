#pragma once

#include <string>
#include <string_view>

namespace modalign {

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// First 16 hex characters of the SHA-256; used as a short artifact id.
inline std::string short_digest(std::string_view bytes) { return sha256_hex(bytes).substr(0, 16); }

}  // namespace modalign
