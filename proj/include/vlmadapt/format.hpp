#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace vlmadapt {

// shortest decimal string that round-trips the exact double; keeps CSV and
// JSON artifacts byte-stable across runs
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

}  // namespace vlmadapt
