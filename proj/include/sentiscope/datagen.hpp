#pragma once

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sentiscope/error.hpp"
#include "sentiscope/hash.hpp"
#include "sentiscope/rng.hpp"
#include "sentiscope/tokenizer.hpp"

namespace sentiscope {

enum class suite_kind { lexical, contextual };

enum class direction { toward_negative, toward_positive, toward_neutral };

inline std::string to_string(suite_kind k) { return k == suite_kind::lexical ? "lexical" : "contextual"; }

inline suite_kind suite_kind_from_string(std::string_view s) {
    if (s == "lexical") return suite_kind::lexical;
    if (s == "contextual") return suite_kind::contextual;
    throw parse_error("unknown suite kind '" + std::string(s) + "'");
}

inline std::string to_string(direction d) {
    switch (d) {
        case direction::toward_negative: return "toward-negative";
        case direction::toward_positive: return "toward-positive";
        case direction::toward_neutral: return "toward-neutral";
    }
    return "?";
}

inline direction direction_from_string(std::string_view s) {
    if (s == "toward-negative") return direction::toward_negative;
    if (s == "toward-positive") return direction::toward_positive;
    if (s == "toward-neutral") return direction::toward_neutral;
    throw parse_error("unknown direction '" + std::string(s) + "'");
}

// The closed set of phenomena. Codes are what suites and effect files store.
inline const std::vector<std::string>& lexical_phenomena() {
    static const std::vector<std::string> v{"L1", "L2", "L3", "L4", "L5", "L6"};
    return v;
}

inline const std::vector<std::string>& contextual_phenomena() {
    static const std::vector<std::string> v{"C1", "C2", "C3", "C4",  "C5",  "C6",  "C7",
                                            "C8", "C9", "C10", "C11", "C12", "C13", "C14"};
    return v;
}

inline const std::vector<std::string>& phenomena_of(suite_kind k) {
    return k == suite_kind::lexical ? lexical_phenomena() : contextual_phenomena();
}

// ---------------------------------------------------------------------------
// Lexicon and template bank (data/lexicon.json, data/templates.json)

struct word_entry {
    std::string polarity;
    std::string tier;
    std::optional<int> scale;
    std::vector<std::string> domains;
};

struct lexicon {
    std::map<std::string, word_entry> words;
    std::map<std::string, std::vector<std::string>> banks;
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> pair_banks;
    std::set<std::string> stopwords;

    const std::vector<std::string>& bank(const std::string& name) const {
        auto it = banks.find(name);
        if (it == banks.end()) throw generation_error("unknown word bank '" + name + "'");
        return it->second;
    }

    std::optional<int> scale_of(const std::string& word) const {
        auto it = words.find(word);
        return it == words.end() ? std::nullopt : it->second.scale;
    }
};

inline lexicon lexicon_from_json(const nlohmann::json& j) {
    lexicon lex;
    try {
        for (const auto& [word, e] : j.at("words").items()) {
            word_entry w;
            w.polarity = e.at("polarity").get<std::string>();
            w.tier = e.at("tier").get<std::string>();
            if (e.contains("scale")) w.scale = e.at("scale").get<int>();
            if (e.contains("domains")) w.domains = e.at("domains").get<std::vector<std::string>>();
            lex.words.emplace(word, std::move(w));
        }
        for (const auto& [name, words] : j.at("banks").items()) lex.banks[name] = words.get<std::vector<std::string>>();
        if (j.contains("pair_banks")) {
            for (const auto& [name, pairs] : j.at("pair_banks").items()) {
                auto& out = lex.pair_banks[name];
                for (const auto& p : pairs) {
                    if (!p.is_array() || p.size() != 2) throw parse_error("pair bank '" + name + "' entry is not a pair");
                    out.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
                }
            }
        }
        for (const auto& s : j.at("stopwords")) lex.stopwords.insert(s.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("lexicon: ") + e.what());
    }
    return lex;
}

struct phenomenon_spec {
    std::string code;
    std::string name;
    suite_kind suite = suite_kind::contextual;
    std::string direction_rule;  // a direction name, or "by-scale"
    std::vector<std::string> templates;
    std::vector<std::string> template_ids;
};

struct template_bank {
    std::vector<std::string> frames;
    std::map<std::string, phenomenon_spec> phenomena;
    std::vector<std::string> probe_templates;

    const phenomenon_spec& at(const std::string& code) const {
        auto it = phenomena.find(code);
        if (it == phenomena.end()) throw generation_error("no templates for phenomenon " + code);
        return it->second;
    }
};

// Explicit templates are used as written. Predicates are crossed with every
// frame ("The {noun}" + " " + "was [..]").
inline template_bank template_bank_from_json(const nlohmann::json& j) {
    template_bank tb;
    try {
        tb.frames = j.at("frames").get<std::vector<std::string>>();
        for (const auto& [code, p] : j.at("phenomena").items()) {
            phenomenon_spec spec;
            spec.code = code;
            spec.name = p.at("name").get<std::string>();
            spec.suite = suite_kind_from_string(p.at("suite").get<std::string>());
            spec.direction_rule = p.at("direction").get<std::string>();
            if (p.contains("templates")) {
                const auto ts = p.at("templates").get<std::vector<std::string>>();
                for (std::size_t i = 0; i < ts.size(); ++i) {
                    spec.templates.push_back(ts[i]);
                    spec.template_ids.push_back(code + ".t" + std::to_string(i));
                }
            }
            if (p.contains("predicates")) {
                const auto ps = p.at("predicates").get<std::vector<std::string>>();
                for (std::size_t k = 0; k < ps.size(); ++k) {
                    for (std::size_t f = 0; f < tb.frames.size(); ++f) {
                        spec.templates.push_back(tb.frames[f] + " " + ps[k]);
                        spec.template_ids.push_back(code + ".f" + std::to_string(f) + "p" + std::to_string(k));
                    }
                }
            }
            tb.phenomena.emplace(code, std::move(spec));
        }
        tb.probe_templates = j.at("probe").at("templates").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("templates: ") + e.what());
    }
    return tb;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

inline lexicon load_lexicon(const std::filesystem::path& path) { return lexicon_from_json(read_json_file(path)); }

inline template_bank load_templates(const std::filesystem::path& path) {
    return template_bank_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Template language

namespace tmpl {

struct ref {
    std::string bank;
    std::string var;  // empty: independent draw
};

struct piece {
    enum class kind { text, ref, slot, pair_slot } k = kind::text;
    std::string text;       // text, or pair bank name for pair_slot
    ref r;                  // for ref
    std::vector<piece> clean, corrupted;  // for slot (only text and ref inside)
};

namespace detail {

inline ref parse_ref(std::string_view body, std::string_view whole) {
    if (body.empty()) throw parse_error("empty {} in template: " + std::string(whole));
    ref r;
    const auto colon = body.find(':');
    r.bank = std::string(body.substr(0, colon));
    if (colon != std::string_view::npos) r.var = std::string(body.substr(colon + 1));
    if (r.bank.empty()) throw parse_error("empty bank name in template: " + std::string(whole));
    return r;
}

// Text and {refs} only.
inline std::vector<piece> parse_flat(std::string_view s, std::string_view whole) {
    std::vector<piece> out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '{') {
            const auto close = s.find('}', i);
            if (close == std::string_view::npos) throw parse_error("unclosed { in template: " + std::string(whole));
            piece p;
            p.k = piece::kind::ref;
            p.r = parse_ref(s.substr(i + 1, close - i - 1), whole);
            out.push_back(std::move(p));
            i = close + 1;
        } else {
            auto next = s.find_first_of("{[]|}", i);
            if (next == i) throw parse_error("unexpected '" + std::string(1, s[i]) + "' in template: " + std::string(whole));
            if (next == std::string_view::npos) next = s.size();
            piece p;
            p.text = std::string(s.substr(i, next - i));
            out.push_back(std::move(p));
            i = next;
        }
    }
    return out;
}

}  // namespace detail

inline std::vector<piece> parse(std::string_view t) {
    std::vector<piece> out;
    std::size_t i = 0;
    while (i < t.size()) {
        if (t[i] == '[') {
            const auto close = t.find(']', i);
            if (close == std::string_view::npos) throw parse_error("unclosed [ in template: " + std::string(t));
            const auto body = t.substr(i + 1, close - i - 1);
            piece p;
            if (!body.empty() && body[0] == '@') {
                p.k = piece::kind::pair_slot;
                p.text = std::string(body.substr(1));
            } else {
                const auto bar = body.find('|');
                if (bar == std::string_view::npos || body.find('|', bar + 1) != std::string_view::npos) {
                    throw parse_error("slot needs exactly one '|' in template: " + std::string(t));
                }
                p.k = piece::kind::slot;
                p.clean = detail::parse_flat(body.substr(0, bar), t);
                p.corrupted = detail::parse_flat(body.substr(bar + 1), t);
                if (p.clean.empty() || p.corrupted.empty()) throw parse_error("empty slot alternative in template: " + std::string(t));
            }
            out.push_back(std::move(p));
            i = close + 1;
        } else {
            auto next = t.find('[', i);
            if (next == std::string_view::npos) next = t.size();
            auto flat = detail::parse_flat(t.substr(i, next - i), t);
            out.insert(out.end(), flat.begin(), flat.end());
            i = next;
        }
    }
    return out;
}

// Every {bank} and [@pairs] a template mentions.
inline void collect_banks(const std::vector<piece>& pieces, std::set<std::string>& banks, std::set<std::string>& pair_banks) {
    for (const auto& p : pieces) {
        if (p.k == piece::kind::ref) banks.insert(p.r.bank);
        if (p.k == piece::kind::pair_slot) pair_banks.insert(p.text);
        if (p.k == piece::kind::slot) {
            collect_banks(p.clean, banks, pair_banks);
            collect_banks(p.corrupted, banks, pair_banks);
        }
    }
}

// The bank bound to variable `var`, if any.
inline std::optional<std::string> bank_of_var(const std::vector<piece>& pieces, const std::string& var) {
    for (const auto& p : pieces) {
        if (p.k == piece::kind::ref && p.r.var == var) return p.r.bank;
        if (p.k == piece::kind::slot) {
            if (auto b = bank_of_var(p.clean, var)) return b;
            if (auto b = bank_of_var(p.corrupted, var)) return b;
        }
    }
    return std::nullopt;
}

}  // namespace tmpl

// ---------------------------------------------------------------------------
// Test pairs

struct slot_span {
    byte_span clean;
    byte_span corrupted;
    friend bool operator==(const slot_span&, const slot_span&) = default;
};

struct test_pair {
    std::string id;
    std::string phenomenon;
    std::string template_id;
    std::string clean;
    std::string corrupted;
    std::vector<slot_span> slots;
    direction expected_direction = direction::toward_negative;
    std::optional<int> scale_delta;
    std::string word_key;  // the word whose effect is compared across contexts

    friend bool operator==(const test_pair&, const test_pair&) = default;
};

struct test_suite {
    suite_kind kind = suite_kind::lexical;
    std::uint64_t seed = 0;
    std::vector<test_pair> pairs;

    std::map<std::string, std::size_t> counts() const {
        std::map<std::string, std::size_t> c;
        for (const auto& p : pairs) ++c[p.phenomenon];
        return c;
    }

    friend bool operator==(const test_suite&, const test_suite&) = default;
};

inline nlohmann::json to_json(const test_pair& p) {
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& s : p.slots) {
        slots.push_back({{"clean", {s.clean.begin, s.clean.end}}, {"corrupted", {s.corrupted.begin, s.corrupted.end}}});
    }
    nlohmann::json j = {{"id", p.id},
                        {"phenomenon", p.phenomenon},
                        {"template_id", p.template_id},
                        {"clean", p.clean},
                        {"corrupted", p.corrupted},
                        {"slots", slots},
                        {"expected_direction", to_string(p.expected_direction)},
                        {"word_key", p.word_key}};
    j["scale_delta"] = p.scale_delta ? nlohmann::json(*p.scale_delta) : nlohmann::json(nullptr);
    return j;
}

inline test_pair test_pair_from_json(const nlohmann::json& j) {
    test_pair p;
    p.id = j.at("id").get<std::string>();
    p.phenomenon = j.at("phenomenon").get<std::string>();
    p.template_id = j.at("template_id").get<std::string>();
    p.clean = j.at("clean").get<std::string>();
    p.corrupted = j.at("corrupted").get<std::string>();
    for (const auto& s : j.at("slots")) {
        p.slots.push_back({{s.at("clean")[0].get<std::size_t>(), s.at("clean")[1].get<std::size_t>()},
                           {s.at("corrupted")[0].get<std::size_t>(), s.at("corrupted")[1].get<std::size_t>()}});
    }
    p.expected_direction = direction_from_string(j.at("expected_direction").get<std::string>());
    if (!j.at("scale_delta").is_null()) p.scale_delta = j.at("scale_delta").get<int>();
    p.word_key = j.at("word_key").get<std::string>();
    return p;
}

// One header line ({"suite":..,"seed":..}) followed by one pair per line.
inline void write_suite(const test_suite& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << nlohmann::json{{"suite", to_string(s.kind)}, {"seed", s.seed}, {"pairs", s.pairs.size()}}.dump() << '\n';
    for (const auto& p : s.pairs) out << to_json(p).dump() << '\n';
    if (!out) throw io_error("write failed for " + path.string());
}

inline test_suite read_suite(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    test_suite s;
    std::string line;
    std::size_t line_no = 0;
    std::size_t expected = 0;
    try {
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            if (line_no == 1) {
                s.kind = suite_kind_from_string(j.at("suite").get<std::string>());
                s.seed = j.at("seed").get<std::uint64_t>();
                expected = j.at("pairs").get<std::size_t>();
                continue;
            }
            s.pairs.push_back(test_pair_from_json(j));
        }
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (line_no == 0) throw parse_error(path.string() + " is empty");
    if (s.pairs.size() != expected) {
        throw integrity_error(path.string() + " declares " + std::to_string(expected) + " pairs but holds " +
                              std::to_string(s.pairs.size()));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Validation

inline constexpr std::size_t min_templates_per_phenomenon = 10;
inline constexpr std::size_t min_fillers_per_bank = 8;

// Throws generation_error naming the phenomenon whose bank is short.
inline void validate_phenomenon(const lexicon& lex, const template_bank& tb, const std::string& code) {
    auto it = tb.phenomena.find(code);
    if (it == tb.phenomena.end()) throw generation_error("insufficient lexicon coverage for " + code + ": no templates");
    const auto& spec = it->second;
    if (spec.templates.size() < min_templates_per_phenomenon) {
        throw generation_error("insufficient lexicon coverage for " + code + " (" + spec.name + "): " +
                               std::to_string(spec.templates.size()) + " templates, need " +
                               std::to_string(min_templates_per_phenomenon));
    }
    for (const auto& t : spec.templates) {
        std::set<std::string> banks, pairs;
        tmpl::collect_banks(tmpl::parse(t), banks, pairs);
        for (const auto& b : banks) {
            auto bi = lex.banks.find(b);
            if (bi == lex.banks.end() || bi->second.size() < min_fillers_per_bank) {
                throw generation_error("insufficient lexicon coverage for " + code + " (" + spec.name + "): bank '" + b +
                                       "' has " + std::to_string(bi == lex.banks.end() ? 0 : bi->second.size()) +
                                       " fillers, need " + std::to_string(min_fillers_per_bank));
            }
            if (b == "scale") {
                for (const auto& w : bi->second) {
                    if (!lex.scale_of(w)) throw generation_error(code + ": scale word '" + w + "' has no scale value");
                }
            }
        }
        for (const auto& b : pairs) {
            auto bi = lex.pair_banks.find(b);
            if (bi == lex.pair_banks.end() || bi->second.size() < min_fillers_per_bank) {
                throw generation_error("insufficient lexicon coverage for " + code + " (" + spec.name +
                                       "): pair bank '" + b + "' is missing or short");
            }
        }
    }
    if (spec.direction_rule != "by-scale") direction_from_string(spec.direction_rule);
}

// Probe words must not appear in any suite bank, and the scale must span 0..6.
inline void validate_lexicon(const lexicon& lex, const template_bank& tb) {
    std::set<std::string> suite_words;
    for (const auto& [code, spec] : tb.phenomena) {
        for (const auto& t : spec.templates) {
            std::set<std::string> banks, pairs;
            tmpl::collect_banks(tmpl::parse(t), banks, pairs);
            for (const auto& b : banks) {
                if (auto it = lex.banks.find(b); it != lex.banks.end()) suite_words.insert(it->second.begin(), it->second.end());
            }
        }
    }
    for (const char* b : {"probe_pos", "probe_neg"}) {
        const auto& words = lex.bank(b);
        if (words.size() < min_fillers_per_bank) throw generation_error(std::string("probe bank ") + b + " is too small");
        for (const auto& w : words) {
            if (suite_words.count(w)) throw generation_error("probe word '" + w + "' also appears in a test-suite bank");
        }
    }
    std::set<int> scales;
    for (const auto& w : lex.bank("scale")) {
        if (auto s = lex.scale_of(w)) scales.insert(*s);
    }
    for (int s = 0; s <= 6; ++s) {
        if (!scales.count(s)) throw generation_error("scale bank does not cover value " + std::to_string(s));
    }
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

struct rendered {
    std::string clean;
    std::string corrupted;
    std::vector<slot_span> slots;
    std::vector<std::optional<int>> clean_scales, corrupted_scales;  // per slot
};

class renderer {
public:
    renderer(const lexicon& lex, rng& gen) : lex_(lex), gen_(gen) {}

    void bind(const std::string& var, std::string value) { vars_[var] = std::move(value); }

    rendered run(const std::vector<tmpl::piece>& pieces) {
        rendered r;
        for (const auto& p : pieces) {
            switch (p.k) {
                case tmpl::piece::kind::text:
                    r.clean += p.text;
                    r.corrupted += p.text;
                    break;
                case tmpl::piece::kind::ref: {
                    const auto v = resolve(p.r);
                    r.clean += v;
                    r.corrupted += v;
                    break;
                }
                case tmpl::piece::kind::pair_slot: {
                    const auto& bank = lex_.pair_banks.at(p.text);
                    const auto& choice = bank[gen_.uniform_index(bank.size())];
                    add_slot(r, choice.first, choice.second, std::nullopt, std::nullopt);
                    break;
                }
                case tmpl::piece::kind::slot: {
                    std::optional<int> sc, sk;
                    const auto a = flat(p.clean, sc);
                    const auto b = flat(p.corrupted, sk);
                    add_slot(r, a, b, sc, sk);
                    break;
                }
            }
        }
        return r;
    }

private:
    static void add_slot(rendered& r, const std::string& a, const std::string& b, std::optional<int> sa,
                         std::optional<int> sb) {
        slot_span s{{r.clean.size(), r.clean.size() + a.size()}, {r.corrupted.size(), r.corrupted.size() + b.size()}};
        r.clean += a;
        r.corrupted += b;
        r.slots.push_back(s);
        r.clean_scales.push_back(sa);
        r.corrupted_scales.push_back(sb);
    }

    std::string flat(const std::vector<tmpl::piece>& pieces, std::optional<int>& scale) {
        std::string out;
        for (const auto& p : pieces) {
            if (p.k == tmpl::piece::kind::text) {
                out += p.text;
            } else {
                const auto v = resolve(p.r);
                if (p.r.bank == "scale" && !scale) scale = lex_.scale_of(v);
                out += v;
            }
        }
        return out;
    }

    std::string resolve(const tmpl::ref& r) {
        if (!r.var.empty()) {
            if (auto it = vars_.find(r.var); it != vars_.end()) return it->second;
        }
        const auto& bank = lex_.bank(r.bank);
        auto v = bank[gen_.uniform_index(bank.size())];
        if (!r.var.empty()) vars_[r.var] = v;
        return v;
    }

    const lexicon& lex_;
    rng& gen_;
    std::map<std::string, std::string> vars_;
};

inline std::vector<std::size_t> balanced_counts(std::size_t total, std::size_t buckets) {
    std::vector<std::size_t> c(buckets, total / buckets);
    for (std::size_t i = 0; i < total % buckets; ++i) ++c[i];
    return c;
}

inline std::string pad_id(const std::string& prefix, std::size_t n) {
    std::string digits = std::to_string(n);
    if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
    return prefix + "-" + digits;
}

// Pairs for one phenomenon. The focal word (variable `w`) rotates through its
// bank while templates cycle, so every word lands in several different frames.
inline std::vector<test_pair> generate_phenomenon(const lexicon& lex, const template_bank& tb, const std::string& code,
                                                  std::uint64_t seed, std::size_t count) {
    validate_phenomenon(lex, tb, code);
    const auto& spec = tb.at(code);
    rng gen(derive_seed(seed, fnv1a64_of(code)));

    std::vector<std::vector<tmpl::piece>> parsed;
    for (const auto& t : spec.templates) parsed.push_back(tmpl::parse(t));

    std::vector<std::size_t> template_order(parsed.size());
    for (std::size_t i = 0; i < template_order.size(); ++i) template_order[i] = i;
    gen.shuffle(std::span(template_order));

    std::map<std::string, std::vector<std::string>> rotations;
    std::set<std::pair<std::string, std::string>> seen;
    std::vector<test_pair> out;
    out.reserve(count);

    constexpr std::size_t max_attempts = 400;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t nt = parsed.size();
        bool placed = false;
        for (std::size_t attempt = 0; attempt < max_attempts && !placed; ++attempt) {
            const std::size_t ti = template_order[(i + attempt / 8) % nt];
            const auto& pieces = parsed[ti];
            renderer rd(lex, gen);
            std::string key;
            if (auto wb = tmpl::bank_of_var(pieces, "w")) {
                auto& rot = rotations[*wb];
                if (rot.empty()) {
                    rot = lex.bank(*wb);
                    gen.shuffle(std::span(rot));
                }
                key = rot[(i + i / nt + attempt) % rot.size()];
                rd.bind("w", key);
            }
            auto r = rd.run(pieces);
            if (r.slots.empty()) throw generation_error(code + ": template without a slot: " + spec.templates[ti]);
            if (r.clean == r.corrupted) continue;

            test_pair p;
            p.phenomenon = code;
            p.template_id = spec.template_ids[ti];
            if (spec.direction_rule == "by-scale") {
                const auto a = r.clean_scales.front();
                const auto b = r.corrupted_scales.front();
                if (!a || !b) throw generation_error(code + ": scale slot without scale values");
                if (*a == *b) continue;
                p.scale_delta = std::abs(*a - *b);
                p.expected_direction = *b < *a ? direction::toward_negative : direction::toward_positive;
            } else {
                p.expected_direction = direction_from_string(spec.direction_rule);
            }
            if (!seen.insert({r.clean, r.corrupted}).second) continue;
            p.clean = std::move(r.clean);
            p.corrupted = std::move(r.corrupted);
            p.slots = std::move(r.slots);
            p.word_key = key.empty() ? p.clean.substr(p.slots.front().clean.begin, p.slots.front().clean.size()) : key;
            out.push_back(std::move(p));
            placed = true;
        }
        if (!placed) {
            throw generation_error("insufficient lexicon coverage for " + code + " (" + spec.name + "): could not make " +
                                   std::to_string(count) + " distinct pairs");
        }
    }
    return out;
}

}  // namespace detail

inline test_suite generate_suite(suite_kind kind, const lexicon& lex, const template_bank& tb, std::uint64_t seed,
                                 std::size_t count) {
    const auto& codes = phenomena_of(kind);
    if (count < codes.size()) {
        throw domain_error("a " + to_string(kind) + " suite needs at least " + std::to_string(codes.size()) + " pairs");
    }
    const auto quota = detail::balanced_counts(count, codes.size());
    test_suite s;
    s.kind = kind;
    s.seed = seed;
    for (std::size_t k = 0; k < codes.size(); ++k) {
        auto part = detail::generate_phenomenon(lex, tb, codes[k], seed, quota[k]);
        for (auto& p : part) s.pairs.push_back(std::move(p));
    }
    const std::string prefix = kind == suite_kind::lexical ? "lex" : "ctx";
    for (std::size_t i = 0; i < s.pairs.size(); ++i) s.pairs[i].id = detail::pad_id(prefix, i);
    return s;
}

inline test_suite generate_lexical_suite(const lexicon& lex, const template_bank& tb, std::uint64_t seed,
                                         std::size_t count = 1000) {
    return generate_suite(suite_kind::lexical, lex, tb, seed, count);
}

inline test_suite generate_contextual_suite(const lexicon& lex, const template_bank& tb, std::uint64_t seed,
                                            std::size_t count = 8000) {
    return generate_suite(suite_kind::contextual, lex, tb, seed, count);
}

// Stratified subsample: `count` pairs spread evenly over phenomena, original
// order kept.
inline test_suite subsample(const test_suite& s, std::size_t count, std::uint64_t seed) {
    if (count >= s.pairs.size()) return s;
    std::map<std::string, std::vector<std::size_t>> by_phen;
    for (std::size_t i = 0; i < s.pairs.size(); ++i) by_phen[s.pairs[i].phenomenon].push_back(i);

    // Order phenomena by the canonical list so the allocation is stable.
    std::vector<std::string> order;
    for (const auto& c : phenomena_of(s.kind)) {
        if (by_phen.count(c)) order.push_back(c);
    }
    for (const auto& [c, _] : by_phen) {
        if (std::find(order.begin(), order.end(), c) == order.end()) order.push_back(c);
    }

    std::vector<std::size_t> quota(order.size(), 0);
    std::size_t left = count;
    // Round-robin fill respects small buckets.
    while (left > 0) {
        bool progress = false;
        for (std::size_t k = 0; k < order.size() && left > 0; ++k) {
            if (quota[k] < by_phen[order[k]].size()) {
                ++quota[k];
                --left;
                progress = true;
            }
        }
        if (!progress) break;
    }

    rng gen(seed);
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < order.size(); ++k) {
        auto idx = by_phen[order[k]];
        gen.shuffle(std::span(idx));
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota[k]));
    }
    std::sort(keep.begin(), keep.end());
    test_suite out;
    out.kind = s.kind;
    out.seed = s.seed;
    for (auto i : keep) out.pairs.push_back(s.pairs[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Probe corpus

struct probe_sentence {
    std::string text;
    bool positive = false;
    std::string template_id;
};

inline std::vector<probe_sentence> generate_probe_corpus(const lexicon& lex, const template_bank& tb, std::uint64_t seed,
                                                         std::size_t count = 2000) {
    validate_lexicon(lex, tb);
    if (tb.probe_templates.size() < min_templates_per_phenomenon) throw generation_error("too few probe templates");
    rng gen(derive_seed(seed, fnv1a64_of("probe")));
    const auto& nouns = lex.bank("noun");
    std::vector<probe_sentence> out;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < count; ++i) {
        const bool positive = i % 2 == 0;
        const auto& adjs = lex.bank(positive ? "probe_pos" : "probe_neg");
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            const std::size_t ti = gen.uniform_index(tb.probe_templates.size());
            std::string text = tb.probe_templates[ti];
            auto put = [&](const std::string& key, const std::string& value) {
                const auto at = text.find(key);
                if (at != std::string::npos) text.replace(at, key.size(), value);
            };
            put("{adj}", adjs[(i / 2 + static_cast<std::size_t>(attempt)) % adjs.size()]);
            put("{noun}", nouns[gen.uniform_index(nouns.size())]);
            // "a" before a vowel-initial adjective reads badly; fix the article.
            if (auto at = text.find(" a "); at != std::string::npos && at + 3 < text.size() &&
                                            std::string_view("aeiou").find(text[at + 3]) != std::string_view::npos) {
                text.insert(at + 2, "n");
            }
            if (!seen.insert(text).second) continue;
            out.push_back({text, positive, "P.t" + std::to_string(ti)});
            placed = true;
        }
        if (!placed) throw generation_error("probe corpus: could not make " + std::to_string(count) + " distinct sentences");
    }
    return out;
}

inline void write_probe_corpus(const std::vector<probe_sentence>& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    for (const auto& s : corpus) {
        out << nlohmann::json{{"text", s.text}, {"label", s.positive ? "positive" : "negative"}, {"template_id", s.template_id}}
                   .dump()
            << '\n';
    }
}

inline std::vector<probe_sentence> read_probe_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    std::vector<probe_sentence> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("text").get<std::string>(), j.at("label").get<std::string>() == "positive",
                           j.at("template_id").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(path.string() + " line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token positions

inline constexpr std::size_t max_pair_tokens = 64;

struct sentence_positions {
    token_sequence tokens;
    std::vector<std::size_t> target;
    std::vector<std::size_t> control;
};

// (source position in corrupted, target position in clean)
using position_map = std::vector<std::pair<std::size_t, std::size_t>>;

struct pair_positions {
    sentence_positions clean;
    sentence_positions corrupted;
    position_map target_map;
    position_map control_map;
};

namespace detail {

// Segment boundaries: shared, slot, shared, slot, ..., shared.
inline std::vector<byte_span> segments(std::size_t length, std::span<const byte_span> slots) {
    std::vector<byte_span> seg;
    std::size_t cursor = 0;
    for (const auto& s : slots) {
        if (s.begin < cursor || s.end > length || s.end <= s.begin) throw alignment_error("slot spans are out of order or empty");
        seg.push_back({cursor, s.begin});
        seg.push_back(s);
        cursor = s.end;
    }
    seg.push_back({cursor, length});
    return seg;
}

inline std::size_t segment_of(const std::vector<byte_span>& seg, std::size_t byte) {
    for (std::size_t k = 0; k < seg.size(); ++k) {
        if (seg[k].contains(byte)) return k;
    }
    throw alignment_error("byte offset outside every segment");
}

// Tokens per segment. A token may begin with whitespace from the previous
// segment (GPT-2 glues the space to the next word) but must not otherwise
// straddle a boundary.
inline std::vector<std::vector<std::size_t>> tokens_by_segment(const std::string& text, const token_sequence& seq,
                                                               const std::vector<byte_span>& seg) {
    std::vector<std::vector<std::size_t>> out(seg.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto off = seq.offsets[t];
        std::size_t first = off.begin;
        while (first < off.end - 1 && (text[first] == ' ' || text[first] == '\t' || text[first] == '\n')) ++first;
        const auto a = segment_of(seg, first);
        const auto b = segment_of(seg, off.end - 1);
        if (a != b) {
            throw alignment_error("token '" + text.substr(off.begin, off.size()) + "' crosses a slot boundary in \"" + text + "\"");
        }
        out[b].push_back(t);
    }
    return out;
}

inline bool is_content_word(std::string_view word, const std::set<std::string>& stopwords) {
    std::string w;
    for (char c : word) {
        if (c == ' ') continue;
        if (!std::isalpha(static_cast<unsigned char>(c))) return false;
        w += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return !w.empty() && !stopwords.count(w);
}

}  // namespace detail

inline pair_positions locate_target_positions(const test_pair& pair, const tokenizer& tok,
                                              const std::set<std::string>& stopwords) {
    pair_positions out;
    out.clean.tokens = tok.encode(pair.clean);
    out.corrupted.tokens = tok.encode(pair.corrupted);
    for (const auto* s : {&out.clean.tokens, &out.corrupted.tokens}) {
        if (s->empty() || s->size() > max_pair_tokens) {
            throw length_error("pair " + pair.id + " tokenizes to " + std::to_string(s->size()) + " tokens (limit " +
                               std::to_string(max_pair_tokens) + ")");
        }
    }
    std::vector<byte_span> cs, ks;
    for (const auto& s : pair.slots) {
        cs.push_back(s.clean);
        ks.push_back(s.corrupted);
    }
    const auto cseg = detail::segments(pair.clean.size(), cs);
    const auto kseg = detail::segments(pair.corrupted.size(), ks);
    const auto ctok = detail::tokens_by_segment(pair.clean, out.clean.tokens, cseg);
    const auto ktok = detail::tokens_by_segment(pair.corrupted, out.corrupted.tokens, kseg);

    // Pretoken ("word") of each clean token, for the content-word test.
    const auto words = pretokenize(pair.clean);
    auto word_of = [&](std::size_t t) {
        const auto b = out.clean.tokens.offsets[t].begin;
        for (const auto& w : words) {
            if (w.contains(b)) return std::string_view(pair.clean).substr(w.begin, w.size());
        }
        return std::string_view{};
    };

    for (std::size_t k = 0; k < cseg.size(); ++k) {
        const auto& a = ctok[k];
        const auto& b = ktok[k];
        if (k % 2 == 1) {
            if (a.empty() || b.empty()) {
                throw alignment_error("pair " + pair.id + ": substituted span not found after tokenization");
            }
            out.clean.target.insert(out.clean.target.end(), a.begin(), a.end());
            out.corrupted.target.insert(out.corrupted.target.end(), b.begin(), b.end());
            // Right-aligned: the head word of a phrase sits at its end.
            const std::size_t n = std::min(a.size(), b.size());
            for (std::size_t i = 0; i < n; ++i) out.target_map.emplace_back(b[b.size() - n + i], a[a.size() - n + i]);
            continue;
        }
        if (a.size() != b.size()) {
            throw alignment_error("pair " + pair.id + ": shared text tokenizes differently in clean and corrupted");
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (out.clean.tokens.ids[a[i]] != out.corrupted.tokens.ids[b[i]]) {
                throw alignment_error("pair " + pair.id + ": shared text tokenizes differently in clean and corrupted");
            }
            if (a[i] == 0 || !detail::is_content_word(word_of(a[i]), stopwords)) continue;
            out.clean.control.push_back(a[i]);
            out.corrupted.control.push_back(b[i]);
            out.control_map.emplace_back(b[i], a[i]);
        }
    }
    return out;
}

inline pair_positions locate_target_positions(const test_pair& pair, const tokenizer& tok, const lexicon& lex) {
    return locate_target_positions(pair, tok, lex.stopwords);
}

}  // namespace sentiscope
