#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

#include "sentiscope/error.hpp"

namespace sentiscope {

// FNV-1a, 64 bit. Used for content hashes in manifests, not for security.
class fnv1a64 {
public:
    void update(std::span<const unsigned char> bytes) {
        for (unsigned char b : bytes) {
            state_ ^= b;
            state_ *= 0x100000001B3ULL;
        }
    }

    void update(std::string_view s) {
        update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
    }

    std::uint64_t value() const noexcept { return state_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
        return buf;
    }

private:
    std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

inline std::uint64_t fnv1a64_of(std::string_view s) {
    fnv1a64 h;
    h.update(s);
    return h.value();
}

inline std::string hash_hex(std::string_view s) {
    fnv1a64 h;
    h.update(s);
    return h.hex();
}

inline std::string hash_file_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path + " for hashing");
    fnv1a64 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
    }
    return h.hex();
}

}  // namespace sentiscope
