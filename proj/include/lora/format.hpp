#pragma once

#include <charconv>
#include <string>

namespace lora {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_exact(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace lora
