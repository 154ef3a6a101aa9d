#ifndef HIERPROBE_UTIL_HPP
#define HIERPROBE_UTIL_HPP

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace hierprobe {

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// full double precision, 17 significant digits
inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace hierprobe

#endif
