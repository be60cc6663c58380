#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sentiscope/error.hpp"
#include "sentiscope/unicode_tables.hpp"

namespace sentiscope {

using token_id = std::int32_t;

inline constexpr std::size_t gpt2_vocab_size = 50257;

struct byte_span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t pos) const { return pos >= begin && pos < end; }
    friend bool operator==(const byte_span&, const byte_span&) = default;
};

// Token ids plus the byte range of the source text each token covers.
struct token_sequence {
    std::vector<token_id> ids;
    std::vector<byte_span> offsets;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
};

namespace unicode {

enum class char_class { letter, number, space, other };

namespace detail {
template <std::size_t N>
bool in_ranges(const std::array<unicode_tables::range, N>& table, std::uint32_t cp) {
    auto it = std::upper_bound(table.begin(), table.end(), cp,
                               [](std::uint32_t v, const unicode_tables::range& r) { return v < r.first; });
    if (it == table.begin()) return false;
    --it;
    return cp <= it->last;
}
}  // namespace detail

inline char_class classify(std::uint32_t cp) {
    if (cp < 0x80) {
        const auto c = static_cast<unsigned char>(cp);
        if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return char_class::letter;
        if (c >= '0' && c <= '9') return char_class::number;
    }
    if (detail::in_ranges(unicode_tables::letter_ranges, cp)) return char_class::letter;
    if (detail::in_ranges(unicode_tables::number_ranges, cp)) return char_class::number;
    if (detail::in_ranges(unicode_tables::space_ranges, cp)) return char_class::space;
    return char_class::other;
}

inline constexpr std::uint32_t invalid_code_point = 0xFFFFFFFF;

// Decodes one code point starting at text[pos]. Malformed input yields
// invalid_code_point with length 1 so every byte is still consumed.
inline std::pair<std::uint32_t, std::size_t> decode_at(std::string_view text, std::size_t pos) {
    const auto b0 = static_cast<unsigned char>(text[pos]);
    if (b0 < 0x80) return {b0, 1};
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        return {invalid_code_point, 1};
    }
    if (pos + len > text.size()) return {invalid_code_point, 1};
    for (std::size_t i = 1; i < len; ++i) {
        const auto b = static_cast<unsigned char>(text[pos + i]);
        if ((b & 0xC0) != 0x80) return {invalid_code_point, 1};
        cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr std::uint32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_for_len[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
        return {invalid_code_point, 1};
    }
    return {cp, len};
}

inline void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

}  // namespace unicode

// Splits text the way the GPT-2 pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// does, returning byte spans of the pieces.
inline std::vector<byte_span> pretokenize(std::string_view text) {
    using unicode::char_class;
    struct unit {
        std::size_t pos;
        std::size_t len;
        std::uint32_t cp;
        char_class cls;
    };
    std::vector<unit> units;
    units.reserve(text.size());
    for (std::size_t pos = 0; pos < text.size();) {
        auto [cp, len] = unicode::decode_at(text, pos);
        const auto cls = cp == unicode::invalid_code_point ? char_class::other : unicode::classify(cp);
        units.push_back({pos, len, cp, cls});
        pos += len;
    }

    std::vector<byte_span> pieces;
    const std::size_t n = units.size();
    auto byte_at = [&](std::size_t u) { return u < n ? units[u].pos : text.size(); };
    auto is = [&](std::size_t u, char_class c) { return u < n && units[u].cls == c; };
    auto run_end = [&](std::size_t u, auto pred) {
        while (u < n && pred(units[u])) ++u;
        return u;
    };
    auto not_space_letter_number = [](const unit& x) {
        return x.cls == char_class::other;
    };

    std::size_t i = 0;
    while (i < n) {
        const std::size_t start = i;
        std::size_t end = i;

        // Contractions.
        if (units[i].cp == '\'' && i + 1 < n) {
            auto cp_at = [&](std::size_t u) { return u < n ? units[u].cp : 0u; };
            const auto c1 = cp_at(i + 1);
            const auto c2 = cp_at(i + 2);
            if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
                end = i + 2;
            } else if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') || (c1 == 'l' && c2 == 'l')) {
                end = i + 3;
            }
        }
        if (end == start) {
            const bool lead_space = units[i].cp == ' ';
            const std::size_t body = lead_space ? i + 1 : i;
            if (is(body, char_class::letter)) {
                end = run_end(body, [](const unit& x) { return x.cls == char_class::letter; });
            } else if (is(body, char_class::number)) {
                end = run_end(body, [](const unit& x) { return x.cls == char_class::number; });
            } else if (body < n && not_space_letter_number(units[body])) {
                end = run_end(body, not_space_letter_number);
            }
        }
        if (end == start && units[i].cls == char_class::space) {
            const std::size_t ws_end = run_end(i, [](const unit& x) { return x.cls == char_class::space; });
            if (ws_end == n) {
                end = ws_end;  // \s+ at end of text
            } else if (ws_end - i >= 2) {
                end = ws_end - 1;  // \s+(?!\S) backs off one so the last space joins the next word
            } else {
                end = ws_end;  // plain \s+
            }
        }
        if (end == start) end = start + 1;  // unreachable for well-formed classes
        pieces.push_back({units[start].pos, byte_at(end)});
        i = end;
    }
    return pieces;
}

// The GPT-2 reversible byte -> printable code point mapping.
inline std::array<std::uint32_t, 256> bytes_to_unicode() {
    std::array<std::uint32_t, 256> table{};
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t extra = 0;
    for (int b = 0; b < 256; ++b) {
        table[b] = direct[b] ? static_cast<std::uint32_t>(b) : 256 + extra++;
    }
    return table;
}

class tokenizer {
public:
    // Builds a tokenizer from the published file contents. `vocab_json` is the
    // JSON object token -> id; `merges_text` has one "left right" merge per
    // line after an optional "#version" header line.
    static tokenizer from_strings(std::string_view vocab_json, std::string_view merges_text,
                                  std::size_t expected_vocab_size = gpt2_vocab_size) {
        tokenizer tok;
        tok.build_byte_decoder();
        tok.load_vocab(vocab_json, expected_vocab_size);
        tok.load_merges(merges_text);
        return tok;
    }

    static tokenizer load(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file,
                          std::size_t expected_vocab_size = gpt2_vocab_size) {
        return from_strings(read_file(vocab_file), read_file(merges_file), expected_vocab_size);
    }

    std::size_t vocab_size() const { return id_to_bytes_.size(); }
    std::size_t merge_count() const { return merges_.size(); }

    token_sequence encode(std::string_view text) const {
        token_sequence out;
        for (const byte_span& piece : pretokenize(text)) {
            bpe_piece(text, piece, out);
        }
        return out;
    }

    std::string decode(std::span<const token_id> ids) const {
        std::string out;
        for (token_id id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size()) {
                throw domain_error("token id " + std::to_string(id) + " outside [0, " +
                                   std::to_string(id_to_bytes_.size()) + ")");
            }
            out += id_to_bytes_[static_cast<std::size_t>(id)];
        }
        return out;
    }

    std::string decode(const token_sequence& seq) const { return decode(std::span<const token_id>(seq.ids)); }

    // Raw bytes of one token.
    const std::string& token_bytes(token_id id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size()) {
            throw domain_error("token id " + std::to_string(id) + " out of range");
        }
        return id_to_bytes_[static_cast<std::size_t>(id)];
    }

    token_id id_of(std::string_view raw_bytes) const {
        auto it = bytes_to_id_.find(std::string(raw_bytes));
        if (it == bytes_to_id_.end()) throw domain_error("no token for '" + std::string(raw_bytes) + "'");
        return it->second;
    }

private:
    struct merge_rule {
        std::uint32_t rank;
        token_id result;
    };

    static std::string read_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open " + path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static std::uint64_t pair_key(token_id a, token_id b) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
    }

    void build_byte_decoder() {
        const auto table = bytes_to_unicode();
        for (int b = 0; b < 256; ++b) byte_decoder_[table[b]] = static_cast<char>(b);
    }

    // Maps a token string in the published byte-remapped form back to raw bytes.
    bool to_raw_bytes(std::string_view mapped, std::string& raw) const {
        raw.clear();
        for (std::size_t pos = 0; pos < mapped.size();) {
            auto [cp, len] = unicode::decode_at(mapped, pos);
            auto it = byte_decoder_.find(cp);
            if (it == byte_decoder_.end()) return false;
            raw.push_back(it->second);
            pos += len;
        }
        return true;
    }

    void load_vocab(std::string_view vocab_json, std::size_t expected_size) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(vocab_json);
        } catch (const nlohmann::json::parse_error& e) {
            const auto upto = std::min<std::size_t>(e.byte, vocab_json.size());
            const auto line = 1 + std::count(vocab_json.begin(), vocab_json.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
            throw parse_error("vocab line " + std::to_string(line) + ": " + e.what());
        }
        if (!j.is_object()) throw parse_error("vocab line 1: expected a JSON object");

        std::vector<std::string> by_id(j.size());
        std::vector<bool> seen(j.size(), false);
        std::string raw;
        for (auto& [key, value] : j.items()) {
            if (!value.is_number_integer()) throw parse_error("vocab entry '" + key + "' has a non-integer id");
            const auto id = value.get<std::int64_t>();
            if (id < 0 || static_cast<std::size_t>(id) >= j.size()) {
                throw integrity_error("vocab id " + std::to_string(id) + " for '" + key +
                                      "' is outside [0, " + std::to_string(j.size()) + ")");
            }
            if (seen[static_cast<std::size_t>(id)]) {
                throw integrity_error("vocab id " + std::to_string(id) + " is assigned twice");
            }
            if (!to_raw_bytes(key, raw)) throw integrity_error("vocab entry '" + key + "' is not byte-remapped text");
            seen[static_cast<std::size_t>(id)] = true;
            by_id[static_cast<std::size_t>(id)] = raw;
        }
        if (by_id.size() != expected_size) {
            throw integrity_error("vocab has " + std::to_string(by_id.size()) + " entries, expected " +
                                  std::to_string(expected_size));
        }
        id_to_bytes_ = std::move(by_id);
        bytes_to_id_.reserve(id_to_bytes_.size());
        for (std::size_t id = 0; id < id_to_bytes_.size(); ++id) {
            if (!bytes_to_id_.emplace(id_to_bytes_[id], static_cast<token_id>(id)).second) {
                throw integrity_error("vocab maps the same token to two ids (second id " + std::to_string(id) + ")");
            }
        }
        for (int b = 0; b < 256; ++b) {
            auto it = bytes_to_id_.find(std::string(1, static_cast<char>(b)));
            if (it == bytes_to_id_.end()) throw integrity_error("vocab lacks the single-byte token " + std::to_string(b));
            byte_ids_[b] = it->second;
        }
    }

    void load_merges(std::string_view text) {
        std::size_t line_no = 0;
        std::size_t pos = 0;
        std::string left, right;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            if (eol == std::string_view::npos) eol = text.size();
            std::string_view line = text.substr(pos, eol - pos);
            pos = eol + 1;
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            if (line_no == 1 && line.starts_with("#")) continue;
            if (line.empty()) continue;

            const auto sp = line.find(' ');
            if (sp == std::string_view::npos || sp == 0 || sp + 1 >= line.size() ||
                line.find(' ', sp + 1) != std::string_view::npos) {
                throw parse_error("merges line " + std::to_string(line_no) + ": expected two space-separated symbols");
            }
            if (!to_raw_bytes(line.substr(0, sp), left) || !to_raw_bytes(line.substr(sp + 1), right)) {
                throw parse_error("merges line " + std::to_string(line_no) + ": symbol is not byte-remapped text");
            }
            auto lit = bytes_to_id_.find(left);
            auto rit = bytes_to_id_.find(right);
            auto mit = bytes_to_id_.find(left + right);
            if (lit == bytes_to_id_.end() || rit == bytes_to_id_.end() || mit == bytes_to_id_.end()) {
                throw integrity_error("merges line " + std::to_string(line_no) + ": symbols or result missing from vocab");
            }
            const auto rank = static_cast<std::uint32_t>(merges_.size());
            merges_.emplace(pair_key(lit->second, rit->second), merge_rule{rank, mit->second});
        }
        if (merges_.empty()) throw integrity_error("merges file contains no merge rules");
    }

    void bpe_piece(std::string_view text, byte_span piece, token_sequence& out) const {
        struct symbol {
            token_id id;
            std::size_t begin;
            std::size_t end;
        };
        std::vector<symbol> syms;
        syms.reserve(piece.size());
        for (std::size_t p = piece.begin; p < piece.end; ++p) {
            syms.push_back({byte_ids_[static_cast<unsigned char>(text[p])], p, p + 1});
        }

        // Merge the lowest-ranked adjacent pair, all non-overlapping occurrences
        // left to right, until no adjacent pair has a rule.
        while (syms.size() > 1) {
            std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
            token_id best_left = 0, best_right = 0, best_result = 0;
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
                auto it = merges_.find(pair_key(syms[i].id, syms[i + 1].id));
                if (it != merges_.end() && it->second.rank < best_rank) {
                    best_rank = it->second.rank;
                    best_left = syms[i].id;
                    best_right = syms[i + 1].id;
                    best_result = it->second.result;
                }
            }
            if (best_rank == std::numeric_limits<std::uint32_t>::max()) break;

            std::vector<symbol> merged;
            merged.reserve(syms.size());
            for (std::size_t i = 0; i < syms.size();) {
                if (i + 1 < syms.size() && syms[i].id == best_left && syms[i + 1].id == best_right) {
                    merged.push_back({best_result, syms[i].begin, syms[i + 1].end});
                    i += 2;
                } else {
                    merged.push_back(syms[i]);
                    ++i;
                }
            }
            syms = std::move(merged);
        }
        for (const auto& s : syms) {
            out.ids.push_back(s.id);
            out.offsets.push_back({s.begin, s.end});
        }
    }

    std::vector<std::string> id_to_bytes_;
    std::unordered_map<std::string, token_id> bytes_to_id_;
    std::unordered_map<std::uint64_t, merge_rule> merges_;
    std::unordered_map<std::uint32_t, char> byte_decoder_;
    std::array<token_id, 256> byte_ids_{};
};

}  // namespace sentiscope
