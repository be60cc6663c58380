#pragma once

#include <algorithm>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sentiscope/datagen.hpp"
#include "sentiscope/effects.hpp"
#include "sentiscope/error.hpp"
#include "sentiscope/model.hpp"
#include "sentiscope/parallel.hpp"
#include "sentiscope/probe.hpp"

namespace sentiscope {

// Overwrite the output of block `layer` in the target run. Each mapping entry
// copies source position `first` into target position `second`. With
// replace_stream the whole target stream is replaced by the source stream.
struct patch_spec {
    std::size_t layer = 0;
    position_map mapping;
    bool replace_stream = false;

    static patch_spec at(std::size_t layer, position_map mapping) { return {layer, std::move(mapping), false}; }
    static patch_spec whole_stream(std::size_t layer) { return {layer, {}, true}; }

    // Same positions on both sides.
    static patch_spec identity(std::size_t layer, std::span<const std::size_t> positions) {
        patch_spec s{layer, {}, false};
        for (auto p : positions) s.mapping.emplace_back(p, p);
        return s;
    }
};

namespace detail {

inline void check_spec(const model& m, std::size_t target_len, const residual_cache& source, const patch_spec& spec) {
    const auto& cfg = m.config();
    if (spec.layer >= cfg.n_layers) {
        throw domain_error("patch layer " + std::to_string(spec.layer) + " outside [0, " + std::to_string(cfg.n_layers) + ")");
    }
    if (source.n_layers != cfg.n_layers || source.d_model != cfg.d_model) {
        throw alignment_error("source cache does not come from this model");
    }
    for (auto [s, t] : spec.mapping) {
        if (s >= source.seq_len || t >= target_len) {
            throw alignment_error("patch maps source position " + std::to_string(s) + " (of " + std::to_string(source.seq_len) +
                                  ") to target position " + std::to_string(t) + " (of " + std::to_string(target_len) + ")");
        }
    }
}

inline void apply_patch(std::span<float> stream, const residual_cache& source, const patch_spec& spec) {
    const std::size_t d = source.d_model;
    const auto src = source.resid(spec.layer + 1);
    for (auto [s, t] : spec.mapping) {
        std::memcpy(stream.data() + t * d, src.data() + s * d, d * sizeof(float));
    }
}

}  // namespace detail

// Full forward pass of the target with the patch applied by a hook.
inline forward_result run_with_patch(const model& m, std::span<const token_id> target_tokens, const residual_cache& source,
                                     const patch_spec& spec, const forward_options& opts = {}) {
    detail::check_spec(m, target_tokens.size(), source, spec);
    if (spec.replace_stream) {
        // Everything downstream of block `layer` sees only the source stream.
        if (source.seq_len == target_tokens.size()) {
            auto all = patch_spec::at(spec.layer, {});
            for (std::size_t p = 0; p < source.seq_len; ++p) all.mapping.emplace_back(p, p);
            return run_with_patch(m, target_tokens, source, all, opts);
        }
        return m.resume(source, spec.layer + 1, opts);
    }
    return m.forward(target_tokens, opts, [&](std::size_t layer, std::span<float> stream, std::size_t) {
        if (layer == spec.layer) detail::apply_patch(stream, source, spec);
    });
}

// Same result as run_with_patch, but reuses the target's own cache for the
// blocks before the patch.
inline forward_result run_with_patch_from(const model& m, const residual_cache& target, const residual_cache& source,
                                          const patch_spec& spec, const forward_options& opts = {}) {
    detail::check_spec(m, target.seq_len, source, spec);
    if (spec.replace_stream && source.seq_len != target.seq_len) return m.resume(source, spec.layer + 1, opts);
    residual_cache c = target;
    c.final_post_ln.clear();
    if (spec.replace_stream) {
        std::copy(source.resid(spec.layer + 1).begin(), source.resid(spec.layer + 1).end(), c.resid(spec.layer + 1).begin());
    } else {
        detail::apply_patch(c.resid(spec.layer + 1), source, spec);
    }
    return m.resume(std::move(c), spec.layer + 1, opts);
}

inline double score_of(const residual_cache& cache, const probe& p) {
    return probe_predict(p, final_representation(cache, cache.seq_len - 1));
}

// Probe probability of "positive" on the last token's final representation.
inline double sentiment_score(const model& m, const probe& p, std::span<const token_id> tokens) {
    if (tokens.empty()) throw length_error("sentiment_score needs at least one token");
    return score_of(m.forward(tokens, {.compute_logits = false}).cache, p);
}

// Last-token final representations of a labeled corpus, in corpus order.
inline labeled_set extract_representations(const model& m, const tokenizer& tok, std::span<const probe_sentence> corpus,
                                           std::size_t workers) {
    const std::size_t d = m.config().d_model;
    std::vector<float> rows(corpus.size() * d);
    parallel_for(corpus.size(), workers, [&](std::size_t i) {
        const auto ids = tok.encode(corpus[i].text).ids;
        const auto r = m.forward(ids, {.compute_logits = false});
        const auto v = final_representation(r.cache, ids.size() - 1);
        std::copy(v.begin(), v.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * d));
    });
    labeled_set out;
    out.dim = d;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out.add(std::span<const float>(rows).subspan(i * d, d), corpus[i].positive, corpus[i].text);
    }
    return out;
}

// A pair with its tokenization and both unpatched runs, computed once and
// reused by every layer of a sweep.
struct prepared_pair {
    test_pair pair;
    pair_positions positions;
    residual_cache clean_cache;
    residual_cache corrupted_cache;
    double score_clean = 0.0;
    double score_corrupted = 0.0;

    const position_map& mapping(position_mode mode) const {
        return mode == position_mode::control_words ? positions.control_map : positions.target_map;
    }
};

inline prepared_pair prepare_pair(const model& m, const probe& p, const tokenizer& tok, const std::set<std::string>& stopwords,
                                  const test_pair& pair) {
    prepared_pair out;
    out.pair = pair;
    out.positions = locate_target_positions(pair, tok, stopwords);
    out.clean_cache = m.forward(out.positions.clean.tokens.ids, {.compute_logits = false}).cache;
    out.corrupted_cache = m.forward(out.positions.corrupted.tokens.ids, {.compute_logits = false}).cache;
    out.score_clean = score_of(out.clean_cache, p);
    out.score_corrupted = score_of(out.corrupted_cache, p);
    return out;
}

inline patch_spec spec_for(const prepared_pair& pp, std::size_t layer, position_mode mode) {
    if (mode == position_mode::all) return patch_spec::whole_stream(layer);
    return patch_spec::at(layer, pp.mapping(mode));
}

// Source = corrupted, target = clean; effect = patched - clean.
inline effect_record patch_effect(const model& m, const probe& p, const prepared_pair& pp, std::size_t layer, position_mode mode) {
    const auto spec = spec_for(pp, layer, mode);
    const auto r = run_with_patch_from(m, pp.clean_cache, pp.corrupted_cache, spec, {.compute_logits = false});
    effect_record e;
    e.pair_id = pp.pair.id;
    e.phenomenon = pp.pair.phenomenon;
    e.layer = layer;
    e.mode = mode;
    e.score_clean = pp.score_clean;
    e.score_patched = score_of(r.cache, p);
    e.effect = e.score_patched - e.score_clean;
    return e;
}

inline std::vector<effect_record> layer_sweep(const model& m, const probe& p, const prepared_pair& pp, position_mode mode) {
    std::vector<effect_record> out;
    out.reserve(m.config().n_layers);
    for (std::size_t l = 0; l < m.config().n_layers; ++l) out.push_back(patch_effect(m, p, pp, l, mode));
    return out;
}

// Sweep over pairs x modes x layers on a worker pool, one pair per task so
// only the caches in flight are held. Record order is fixed (pair, mode,
// layer) whatever the scheduling. Control mode is skipped for pairs that have
// no control words.
inline effect_table sweep_suite(const model& m, const probe& p, const tokenizer& tok, const std::set<std::string>& stopwords,
                                const test_suite& suite, std::span<const position_mode> modes, std::size_t workers) {
    std::vector<std::vector<effect_record>> per_pair(suite.pairs.size());
    parallel_for(suite.pairs.size(), workers, [&](std::size_t i) {
        const auto pp = prepare_pair(m, p, tok, stopwords, suite.pairs[i]);
        for (auto mode : modes) {
            if (mode == position_mode::control_words && pp.positions.control_map.empty()) continue;
            auto v = layer_sweep(m, p, pp, mode);
            per_pair[i].insert(per_pair[i].end(), v.begin(), v.end());
        }
    });
    effect_table t;
    for (auto& v : per_pair) t.records.insert(t.records.end(), v.begin(), v.end());
    return t;
}

}  // namespace sentiscope
