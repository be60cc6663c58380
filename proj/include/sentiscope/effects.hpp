#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sentiscope/error.hpp"

namespace sentiscope {

enum class position_mode : std::uint8_t { target_words = 0, control_words = 1, all = 2 };

inline std::string to_string(position_mode m) {
    switch (m) {
        case position_mode::target_words: return "target-words";
        case position_mode::control_words: return "control-words";
        case position_mode::all: return "all";
    }
    return "?";
}

inline position_mode position_mode_from_string(std::string_view s) {
    if (s == "target-words" || s == "target") return position_mode::target_words;
    if (s == "control-words" || s == "control") return position_mode::control_words;
    if (s == "all") return position_mode::all;
    throw parse_error("unknown position mode '" + std::string(s) + "'");
}

// One patched run: clean is the target sentence, corrupted the source.
struct effect_record {
    std::string pair_id;
    std::string phenomenon;
    std::size_t layer = 0;
    position_mode mode = position_mode::target_words;
    double score_clean = 0.0;
    double score_patched = 0.0;
    double effect = 0.0;

    friend bool operator==(const effect_record&, const effect_record&) = default;
};

struct effect_table {
    std::vector<effect_record> records;

    effect_table select(position_mode m) const {
        effect_table out;
        for (const auto& r : records) {
            if (r.mode == m) out.records.push_back(r);
        }
        return out;
    }

    friend bool operator==(const effect_table&, const effect_table&) = default;
};

// ---------------------------------------------------------------------------
// CSV: header line, then one record per line. Doubles use %.17g so a reload
// reproduces every bit.

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline constexpr std::string_view effects_csv_header = "pair_id,phenomenon,layer,position_mode,score_clean,score_patched,effect";

inline void write_effects_csv(const effect_table& t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << effects_csv_header << '\n';
    for (const auto& r : t.records) {
        out << r.pair_id << ',' << r.phenomenon << ',' << r.layer << ',' << to_string(r.mode) << ','
            << format_double(r.score_clean) << ',' << format_double(r.score_patched) << ',' << format_double(r.effect) << '\n';
    }
    if (!out) throw io_error("write failed for " + path.string());
}

inline effect_table read_effects_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != effects_csv_header) throw parse_error(path.string() + ": bad effects header");
    effect_table t;
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw parse_error(path.string() + " line " + std::to_string(n) + ": expected 7 fields");
        try {
            effect_record r;
            r.pair_id = f[0];
            r.phenomenon = f[1];
            r.layer = std::stoul(f[2]);
            r.mode = position_mode_from_string(f[3]);
            r.score_clean = std::stod(f[4]);
            r.score_patched = std::stod(f[5]);
            r.effect = std::stod(f[6]);
            t.records.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw parse_error(path.string() + " line " + std::to_string(n) + ": bad number");
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Binary layout (little-endian, see docs/formats.md):
//   8 bytes magic "SSEFFECT"
//   u32 version (1)
//   u32 string count S, then S x (u32 length, bytes)
//   u64 record count R, then R x 40-byte records:
//     u32 pair string index, u32 phenomenon string index, u16 layer,
//     u8 position mode, u8 zero, u32 zero, f64 score_clean, f64 score_patched, f64 effect

inline constexpr std::uint32_t effects_format_version = 1;

namespace detail {
template <typename T>
void write_pod(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw parse_error("effects file truncated");
    return v;
}
}  // namespace detail

inline void write_effects_binary(const effect_table& t, const std::filesystem::path& path) {
    std::vector<std::string> strings;
    std::map<std::string, std::uint32_t> index;
    auto intern = [&](const std::string& s) {
        auto [it, fresh] = index.emplace(s, static_cast<std::uint32_t>(strings.size()));
        if (fresh) strings.push_back(s);
        return it->second;
    };
    for (const auto& r : t.records) {
        intern(r.pair_id);
        intern(r.phenomenon);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out.write("SSEFFECT", 8);
    detail::write_pod<std::uint32_t>(out, effects_format_version);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(strings.size()));
    for (const auto& s : strings) {
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    detail::write_pod<std::uint64_t>(out, t.records.size());
    for (const auto& r : t.records) {
        detail::write_pod<std::uint32_t>(out, index.at(r.pair_id));
        detail::write_pod<std::uint32_t>(out, index.at(r.phenomenon));
        detail::write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(r.layer));
        detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(r.mode));
        detail::write_pod<std::uint8_t>(out, 0);
        detail::write_pod<std::uint32_t>(out, 0);
        detail::write_pod(out, r.score_clean);
        detail::write_pod(out, r.score_patched);
        detail::write_pod(out, r.effect);
    }
    if (!out) throw io_error("write failed for " + path.string());
}

inline effect_table read_effects_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "SSEFFECT", 8) != 0) throw parse_error(path.string() + " is not an effects file");
    if (detail::read_pod<std::uint32_t>(in) != effects_format_version) throw parse_error("unsupported effects version");
    std::vector<std::string> strings(detail::read_pod<std::uint32_t>(in));
    for (auto& s : strings) {
        s.resize(detail::read_pod<std::uint32_t>(in));
        in.read(s.data(), static_cast<std::streamsize>(s.size()));
        if (!in) throw parse_error("effects file truncated");
    }
    effect_table t;
    t.records.resize(detail::read_pod<std::uint64_t>(in));
    for (auto& r : t.records) {
        const auto p = detail::read_pod<std::uint32_t>(in);
        const auto ph = detail::read_pod<std::uint32_t>(in);
        if (p >= strings.size() || ph >= strings.size()) throw parse_error("effects string index out of range");
        r.pair_id = strings[p];
        r.phenomenon = strings[ph];
        r.layer = detail::read_pod<std::uint16_t>(in);
        const auto mode = detail::read_pod<std::uint8_t>(in);
        if (mode > 2) throw parse_error("bad position mode in effects file");
        r.mode = static_cast<position_mode>(mode);
        detail::read_pod<std::uint8_t>(in);
        detail::read_pod<std::uint32_t>(in);
        r.score_clean = detail::read_pod<double>(in);
        r.score_patched = detail::read_pod<double>(in);
        r.effect = detail::read_pod<double>(in);
    }
    return t;
}

}  // namespace sentiscope
