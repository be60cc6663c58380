#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "sentiscope/datagen.hpp"
#include "sentiscope/tokenizer.hpp"

using namespace sentiscope;

namespace {

const lexicon& lex() {
    static const lexicon l = load_lexicon(SENTISCOPE_DATA_DIR "/lexicon.json");
    return l;
}

const template_bank& templates() {
    static const template_bank t = load_templates(SENTISCOPE_DATA_DIR "/templates.json");
    return t;
}

const tokenizer& gpt2() {
    static const tokenizer tok =
        tokenizer::load(SENTISCOPE_DATA_DIR "/gpt2/vocab.json", SENTISCOPE_DATA_DIR "/gpt2/merges.txt");
    return tok;
}

const test_suite& lexical() {
    static const test_suite s = generate_lexical_suite(lex(), templates(), 7);
    return s;
}

const test_suite& contextual() {
    static const test_suite s = generate_contextual_suite(lex(), templates(), 7);
    return s;
}

// A lexicon where every bank holds exactly the given word, to pin renders.
lexicon pinned(const std::map<std::string, std::string>& choice) {
    lexicon l = lex();
    for (const auto& [bank, word] : choice) l.banks[bank] = {word};
    return l;
}

detail::rendered render(const lexicon& l, const std::string& t) {
    rng gen(1);
    detail::renderer r(l, gen);
    return r.run(tmpl::parse(t));
}

std::string strip_slots(const std::string& s, const std::vector<slot_span>& slots, bool clean) {
    std::string out;
    std::size_t cursor = 0;
    for (const auto& sl : slots) {
        const auto span = clean ? sl.clean : sl.corrupted;
        out += s.substr(cursor, span.begin - cursor) + "\x01";
        cursor = span.end;
    }
    return out + s.substr(cursor);
}

}  // namespace

TEST(Lexicon, LoadsAndValidates) {
    EXPECT_NO_THROW(validate_lexicon(lex(), templates()));
    for (const auto& c : lexical_phenomena()) EXPECT_NO_THROW(validate_phenomenon(lex(), templates(), c)) << c;
    for (const auto& c : contextual_phenomena()) EXPECT_NO_THROW(validate_phenomenon(lex(), templates(), c)) << c;
}

TEST(Lexicon, EveryPhenomenonHasTenTemplatesAndEightFillers) {
    for (const auto& [code, spec] : templates().phenomena) {
        EXPECT_GE(spec.templates.size(), 10u) << code;
        for (const auto& t : spec.templates) {
            std::set<std::string> banks, pairs;
            tmpl::collect_banks(tmpl::parse(t), banks, pairs);
            for (const auto& b : banks) EXPECT_GE(lex().bank(b).size(), 8u) << code << " " << b;
            for (const auto& b : pairs) EXPECT_GE(lex().pair_banks.at(b).size(), 8u) << code << " " << b;
        }
    }
}

TEST(Lexicon, ScaleAnchorsFollowTheNeutralThreeConvention) {
    EXPECT_EQ(lex().scale_of("pleasant"), 6);
    EXPECT_EQ(lex().scale_of("horrible"), 0);
    EXPECT_EQ(lex().scale_of("average"), 3);
}

TEST(Lexicon, MissingBankIsAGenerationErrorNamingTheType) {
    lexicon l = lex();
    l.banks.erase("lex_pos");
    try {
        generate_lexical_suite(l, templates(), 1);
        FAIL() << "expected generation_error";
    } catch (const generation_error& e) {
        EXPECT_NE(std::string(e.what()).find("L1"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("simple_negation"), std::string::npos) << e.what();
    }
    l = lex();
    l.banks["scary"].resize(3);
    EXPECT_THROW(generate_lexical_suite(l, templates(), 1), generation_error);
}

TEST(Template, ParsesSlotsRefsAndPairBanks) {
    const auto p = tmpl::parse("The {noun} [@copula_neg] [{pos_medium:w}|not {pos_medium:w}]");
    ASSERT_EQ(p.size(), 6u);
    EXPECT_EQ(p[1].k, tmpl::piece::kind::ref);
    EXPECT_EQ(p[3].k, tmpl::piece::kind::pair_slot);
    EXPECT_EQ(p[5].k, tmpl::piece::kind::slot);
    EXPECT_EQ(p[5].corrupted.size(), 2u);
    EXPECT_THROW(tmpl::parse("The [a|b|c]"), parse_error);
    EXPECT_THROW(tmpl::parse("The [a"), parse_error);
    EXPECT_THROW(tmpl::parse("The {noun"), parse_error);
}

TEST(Template, RendersTheSimpleNegationExample) {
    const auto l = pinned({{"noun", "movie"}, {"lex_pos", "good"}, {"negator_simple", "not"}});
    const auto r = render(l, "The {noun} was [{lex_pos:w}|{negator_simple} {lex_pos:w}]");
    EXPECT_EQ(r.clean, "The movie was good");
    EXPECT_EQ(r.corrupted, "The movie was not good");
    ASSERT_EQ(r.slots.size(), 1u);
    EXPECT_EQ(r.clean.substr(r.slots[0].clean.begin, r.slots[0].clean.size()), "good");
    EXPECT_EQ(r.corrupted.substr(r.slots[0].corrupted.begin, r.slots[0].corrupted.size()), "not good");
}

TEST(Template, RendersTheContextualExamples) {
    const auto& t = templates();
    auto find = [&](const std::string& code, const std::string& prefix) {
        for (const auto& s : t.at(code).templates) {
            if (s.rfind(prefix, 0) == 0) return s;
        }
        ADD_FAILURE() << "no template " << prefix << " in " << code;
        return std::string();
    };
    auto r = render(pinned({{"noun", "movie"}, {"pos_strong", "incredible"}, {"neg_strong", "abysmal"}}),
                    find("C1", "The {noun} was"));
    EXPECT_EQ(r.clean, "The movie was incredible");
    EXPECT_EQ(r.corrupted, "The movie was abysmal");

    r = render(pinned({{"noun", "movie"}, {"pos_medium", "nice"}, {"negator_simple", "not"}}), find("C5", "The {noun} was"));
    EXPECT_EQ(r.corrupted, "The movie was not nice");

    r = render(pinned({{"noun", "show"}, {"int_strong", "extremely"}, {"minimizer", "only slightly"}, {"pos_strong", "spectacular"}}),
               find("C13", "The {noun}"));
    EXPECT_EQ(r.clean, "The show was extremely spectacular");
    EXPECT_EQ(r.corrupted, "The show was only slightly spectacular");

    r = render(pinned({{"domain_pos", "horror movie"}, {"domain_neg", "romantic comedy"}, {"scary", "terrifying"}}),
               find("L4", "The ["));
    EXPECT_EQ(r.clean, "The horror movie was terrifying");
    EXPECT_EQ(r.corrupted, "The romantic comedy was terrifying");
}

TEST(Suite, CountsAreExactAndBalanced) {
    EXPECT_EQ(lexical().pairs.size(), 1000u);
    EXPECT_EQ(contextual().pairs.size(), 8000u);
    for (const auto* s : {&lexical(), &contextual()}) {
        const auto c = s->counts();
        EXPECT_EQ(c.size(), phenomena_of(s->kind).size());
        auto [lo, hi] = std::minmax_element(c.begin(), c.end(), [](auto& a, auto& b) { return a.second < b.second; });
        EXPECT_LE(hi->second - lo->second, 1u);
    }
    EXPECT_EQ(contextual().counts().at("C1"), 572u);
    EXPECT_EQ(contextual().counts().at("C14"), 571u);
}

TEST(Suite, SameSeedSameSuiteOtherSeedDiffers) {
    EXPECT_EQ(generate_lexical_suite(lex(), templates(), 7), lexical());
    EXPECT_NE(generate_lexical_suite(lex(), templates(), 8).pairs, lexical().pairs);
}

TEST(Suite, PairsDifferOnlyInsideSlots) {
    for (const auto* s : {&lexical(), &contextual()}) {
        std::set<std::string> ids;
        for (const auto& p : s->pairs) {
            ASSERT_NE(p.clean, p.corrupted) << p.id;
            ASSERT_FALSE(p.slots.empty()) << p.id;
            for (const auto& sl : p.slots) {
                ASSERT_GT(sl.clean.size(), 0u);
                ASSERT_GT(sl.corrupted.size(), 0u);
            }
            ASSERT_EQ(strip_slots(p.clean, p.slots, true), strip_slots(p.corrupted, p.slots, false)) << p.id;
            ASSERT_TRUE(ids.insert(p.id).second);
        }
    }
}

TEST(Suite, ScaleDeltaOnlyForScalePairs) {
    for (const auto& p : contextual().pairs) {
        if (p.phenomenon == "C14") {
            ASSERT_TRUE(p.scale_delta.has_value());
            const auto a = lex().scale_of(p.clean.substr(p.slots[0].clean.begin, p.slots[0].clean.size()));
            const auto b = lex().scale_of(p.corrupted.substr(p.slots[0].corrupted.begin, p.slots[0].corrupted.size()));
            ASSERT_EQ(*p.scale_delta, std::abs(*a - *b));
            ASSERT_GT(*p.scale_delta, 0);
            ASSERT_EQ(p.expected_direction, *b < *a ? direction::toward_negative : direction::toward_positive);
        } else {
            ASSERT_FALSE(p.scale_delta.has_value());
        }
    }
}

TEST(Suite, EveryLexicalWordAppearsInAtLeastThreeContexts) {
    std::map<std::string, std::set<std::string>> contexts;
    for (const auto& p : lexical().pairs) contexts[p.word_key].insert(p.clean);
    for (const auto& [w, c] : contexts) EXPECT_GE(c.size(), 3u) << w;
}

TEST(Suite, JsonlRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "sentiscope_suite.jsonl";
    write_suite(contextual(), path);
    EXPECT_EQ(read_suite(path), contextual());
    std::filesystem::remove(path);
}

TEST(Suite, SubsampleIsStratifiedAndDeterministic) {
    const auto s = subsample(contextual(), 400, 3);
    EXPECT_EQ(s.pairs.size(), 400u);
    for (const auto& [c, n] : s.counts()) EXPECT_TRUE(n == 28u || n == 29u) << c << " " << n;
    EXPECT_EQ(subsample(contextual(), 400, 3), s);
    EXPECT_EQ(subsample(lexical(), 5000, 3), lexical());
}

TEST(Positions, EveryGeneratedPairAlignsWithinSixtyFourTokens) {
    for (const auto* s : {&lexical(), &contextual()}) {
        for (const auto& p : s->pairs) {
            const auto pos = locate_target_positions(p, gpt2(), lex());
            ASSERT_LE(pos.clean.tokens.size(), 64u);
            ASSERT_FALSE(pos.clean.target.empty()) << p.id;
            ASSERT_FALSE(pos.target_map.empty()) << p.id;
            for (auto c : pos.clean.control) {
                ASSERT_NE(c, 0u);
                ASSERT_EQ(std::count(pos.clean.target.begin(), pos.clean.target.end(), c), 0) << p.id;
            }
            for (auto [src, dst] : pos.target_map) {
                ASSERT_LT(src, pos.corrupted.tokens.size());
                ASSERT_LT(dst, pos.clean.tokens.size());
            }
        }
    }
}

TEST(Positions, SingleTokenSubstitutionGivesSingletonTarget) {
    test_pair p;
    p.id = "t";
    p.clean = "The movie was good";
    p.corrupted = "The movie was bad";
    p.slots = {{{14, 18}, {14, 17}}};
    const auto pos = locate_target_positions(p, gpt2(), lex());
    EXPECT_EQ(pos.clean.target, (std::vector<std::size_t>{3}));
    EXPECT_EQ(pos.target_map, (position_map{{3, 3}}));
    EXPECT_EQ(pos.clean.control, (std::vector<std::size_t>{1}));
}

TEST(Positions, MultiTokenPhraseTargetsOnlyTheChangedWord) {
    const auto r = render(pinned({{"noun", "movie"}, {"int_strong", "utterly"}, {"pos_strong", "wonderful"}, {"neg_strong", "awful"}}),
                          "The {noun} was {int_strong} [{pos_strong:w}|{neg_strong}]");
    test_pair p;
    p.id = "t";
    p.clean = r.clean;
    p.corrupted = r.corrupted;
    p.slots = r.slots;
    const auto pos = locate_target_positions(p, gpt2(), lex());
    ASSERT_EQ(pos.clean.target.size(), 1u);
    const auto off = pos.clean.tokens.offsets[pos.clean.target[0]];
    EXPECT_EQ(p.clean.substr(off.begin, off.size()), " wonderful");
    const auto koff = pos.corrupted.tokens.offsets[pos.corrupted.target[0]];
    EXPECT_EQ(p.corrupted.substr(koff.begin, koff.size()), " awful");
}

TEST(Positions, InsertionAlignsRightAndLeavesTheInsertedTokenUnmapped) {
    test_pair p;
    p.id = "t";
    p.clean = "The movie was good";
    p.corrupted = "The movie was not good";
    p.slots = {{{14, 18}, {14, 22}}};
    const auto pos = locate_target_positions(p, gpt2(), lex());
    EXPECT_EQ(pos.corrupted.target, (std::vector<std::size_t>{3, 4}));
    EXPECT_EQ(pos.target_map, (position_map{{4, 3}}));
}

TEST(Positions, SlotThatSplitsAWordIsAnAlignmentError) {
    test_pair p;
    p.id = "t";
    p.clean = "The movie was goodness";
    p.corrupted = "The movie was badness";
    p.slots = {{{14, 18}, {14, 17}}};
    EXPECT_THROW(locate_target_positions(p, gpt2(), lex()), alignment_error);
}

TEST(ProbeCorpus, BalancedUniqueAndDisjointFromSuites) {
    const auto corpus = generate_probe_corpus(lex(), templates(), 5);
    ASSERT_EQ(corpus.size(), 2000u);
    std::set<std::string> texts;
    std::size_t pos = 0;
    for (const auto& s : corpus) {
        texts.insert(s.text);
        pos += s.positive;
    }
    EXPECT_EQ(texts.size(), 2000u);
    EXPECT_EQ(pos, 1000u);
    std::set<std::string> probe_words(lex().bank("probe_pos").begin(), lex().bank("probe_pos").end());
    probe_words.insert(lex().bank("probe_neg").begin(), lex().bank("probe_neg").end());
    for (const auto* s : {&lexical(), &contextual()}) {
        for (const auto& p : s->pairs) {
            for (auto span : pretokenize(p.clean)) {
                std::string w = p.clean.substr(span.begin, span.size());
                if (!w.empty() && w[0] == ' ') w.erase(0, 1);
                ASSERT_EQ(probe_words.count(w), 0u) << p.clean;
            }
        }
    }
    EXPECT_EQ(generate_probe_corpus(lex(), templates(), 5).front().text, corpus.front().text);
}
