#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "sentiscope/effects.hpp"
#include "sentiscope/error.hpp"
#include "sentiscope/rng.hpp"

namespace sentiscope {

// L1 < L2 < ... < L10 < C1 < ...: letter prefix descending, then number.
inline bool phenomenon_less(const std::string& a, const std::string& b) {
    auto split = [](const std::string& s) {
        std::size_t i = 0;
        while (i < s.size() && !std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        long n = i < s.size() ? std::strtol(s.c_str() + i, nullptr, 10) : -1;
        return std::pair(s.substr(0, i), n);
    };
    auto [pa, na] = split(a);
    auto [pb, nb] = split(b);
    if (pa != pb) return pa > pb;
    if (na != nb) return na < nb;
    return a < b;
}

// Early / mid / late thirds of the stack. For 12 layers: 0-3, 4-7, 8-11.
struct band_layout {
    std::size_t n_layers = 12;
    std::size_t early_end = 4;
    std::size_t mid_end = 8;

    static band_layout of(std::size_t n) { return {n, (n + 2) / 3, (2 * n + 2) / 3}; }

    std::pair<std::size_t, std::size_t> range(int band) const {
        if (band == 0) return {0, early_end};
        if (band == 1) return {early_end, mid_end};
        return {mid_end, n_layers};
    }
};

inline const char* band_name(int band) { return band == 0 ? "early" : band == 1 ? "mid" : "late"; }

// Mean of values[lo, hi); NaN for an empty band.
inline double band_mean(std::span<const double> per_layer, const band_layout& b, int band) {
    auto [lo, hi] = b.range(band);
    if (hi <= lo) return std::numeric_limits<double>::quiet_NaN();
    double s = 0;
    for (std::size_t l = lo; l < hi; ++l) s += per_layer[l];
    return s / static_cast<double>(hi - lo);
}

// ---------------------------------------------------------------------------
// Dense pairs x layers view of one position mode of an effect table. Pairs are
// sorted by id so no aggregate depends on record order.

struct effect_tensor {
    std::size_t n_layers = 0;
    std::vector<std::string> pair_ids;
    std::vector<std::string> phenomena;
    std::vector<double> effects;  // signed, row-major pairs x layers

    std::size_t n_pairs() const { return pair_ids.size(); }
    double at(std::size_t pair, std::size_t layer) const { return effects[pair * n_layers + layer]; }
    bool empty() const { return pair_ids.empty(); }

    // n_layers = 0 infers it from the largest layer present.
    static effect_tensor from_table(const effect_table& t, position_mode mode, std::size_t n_layers = 0) {
        if (n_layers == 0) {
            for (const auto& r : t.records) {
                if (r.mode == mode) n_layers = std::max(n_layers, r.layer + 1);
            }
        }
        struct row {
            std::string phenomenon;
            std::vector<double> v;
            std::vector<bool> seen;
        };
        std::map<std::string, row> rows;
        for (const auto& r : t.records) {
            if (r.mode != mode) continue;
            if (r.layer >= n_layers) throw shape_error("effect for " + r.pair_id + " at layer " + std::to_string(r.layer) + " beyond the model");
            auto [it, fresh] = rows.try_emplace(r.pair_id);
            auto& w = it->second;
            if (fresh) {
                w.phenomenon = r.phenomenon;
                w.v.assign(n_layers, 0.0);
                w.seen.assign(n_layers, false);
            } else if (w.phenomenon != r.phenomenon) {
                throw shape_error("pair " + r.pair_id + " tagged with two phenomena");
            }
            if (w.seen[r.layer]) throw shape_error("duplicate effect for " + r.pair_id + " layer " + std::to_string(r.layer));
            w.seen[r.layer] = true;
            w.v[r.layer] = r.effect;
        }
        effect_tensor out;
        out.n_layers = n_layers;
        for (auto& [id, w] : rows) {
            for (std::size_t l = 0; l < n_layers; ++l) {
                if (!w.seen[l]) throw shape_error("incomplete effect grid: " + id + " has no layer " + std::to_string(l) + " (" + to_string(mode) + ")");
            }
            out.pair_ids.push_back(id);
            out.phenomena.push_back(w.phenomenon);
            out.effects.insert(out.effects.end(), w.v.begin(), w.v.end());
        }
        return out;
    }

    effect_tensor only(const std::vector<bool>& keep) const {
        effect_tensor out;
        out.n_layers = n_layers;
        for (std::size_t i = 0; i < n_pairs(); ++i) {
            if (!keep[i]) continue;
            out.pair_ids.push_back(pair_ids[i]);
            out.phenomena.push_back(phenomena[i]);
            out.effects.insert(out.effects.end(), effects.begin() + static_cast<std::ptrdiff_t>(i * n_layers),
                               effects.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_layers));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Significance: two-sided one-sample t-test against zero, plus a seeded
// sign-flip permutation test.

struct significance {
    std::size_t n = 0;
    double mean = 0.0;
    double sd = 0.0;
    double t = 0.0;
    double p_value = 1.0;
    double permutation_p = 1.0;
    std::size_t resamples = 0;
    std::uint64_t seed = 0;
};

inline double t_test_p(double t, std::size_t df) {
    if (std::isnan(t)) return 1.0;
    if (std::isinf(t)) return 0.0;
    boost::math::students_t dist(static_cast<double>(df));
    return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
}

inline significance one_sample_test(std::span<const double> x, std::size_t resamples, std::uint64_t seed) {
    if (x.size() < 2) throw domain_error("significance test needs at least two observations, got " + std::to_string(x.size()));
    significance s;
    s.n = x.size();
    s.resamples = resamples;
    s.seed = seed;
    double sum = 0;
    for (double v : x) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    double ss = 0;
    for (double v : x) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    if (s.sd == 0.0) {
        s.t = s.mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), s.mean);
        s.p_value = s.mean == 0.0 ? 1.0 : 0.0;
    } else {
        s.t = s.mean / (s.sd / std::sqrt(static_cast<double>(s.n)));
        s.p_value = t_test_p(s.t, s.n - 1);
    }
    if (resamples > 0) {
        rng gen(seed);
        const double observed = std::abs(sum);
        std::size_t extreme = 0;
        for (std::size_t r = 0; r < resamples; ++r) {
            double f = 0;
            for (double v : x) f += gen.uniform_index(2) ? v : -v;
            if (std::abs(f) >= observed) ++extreme;
        }
        s.permutation_p = static_cast<double>(extreme + 1) / static_cast<double>(resamples + 1);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Lexical metrics

struct sensitivity_result {
    std::vector<double> per_layer;         // mean |effect|
    std::vector<double> signed_per_layer;  // mean effect
    significance overall;                  // per-pair mean |effect| over layers vs 0
    std::size_t n_pairs = 0;
};

inline sensitivity_result lexical_sensitivity(const effect_tensor& t, std::size_t resamples = 10000, std::uint64_t seed = 0) {
    if (t.empty()) throw domain_error("lexical sensitivity of an empty tensor");
    const std::size_t P = t.n_pairs(), L = t.n_layers;
    sensitivity_result r;
    r.n_pairs = P;
    r.per_layer.assign(L, 0.0);
    r.signed_per_layer.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t i = 0; i < P; ++i) {
            r.per_layer[l] += std::abs(t.at(i, l));
            r.signed_per_layer[l] += t.at(i, l);
        }
        r.per_layer[l] /= static_cast<double>(P);
        r.signed_per_layer[l] /= static_cast<double>(P);
    }
    std::vector<double> per_pair(P, 0.0);
    for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t l = 0; l < L; ++l) per_pair[i] += std::abs(t.at(i, l));
        per_pair[i] /= static_cast<double>(L);
    }
    r.overall = one_sample_test(per_pair, resamples, seed);
    return r;
}

struct specificity_result {
    significance test;                   // per-pair specificity vs 0
    std::vector<double> target_per_layer;   // mean |effect| at target words
    std::vector<double> control_per_layer;  // mean |effect| at control words
    std::size_t n_pairs = 0;
    std::size_t layers_used = 0;  // layers [0, layers_used)
};

// Per pair: mean over the early band of |target| minus the same for control.
inline specificity_result position_specificity(const effect_tensor& target, const effect_tensor& control, std::size_t resamples = 10000,
                                               std::uint64_t seed = 0) {
    if (target.pair_ids != control.pair_ids || target.n_layers != control.n_layers) {
        throw alignment_error("position specificity needs the same pairs and layers in both tensors (" + std::to_string(target.n_pairs()) +
                              " target vs " + std::to_string(control.n_pairs()) + " control)");
    }
    if (target.empty()) throw domain_error("position specificity of an empty tensor");
    const std::size_t P = target.n_pairs(), L = target.n_layers;
    specificity_result r;
    r.n_pairs = P;
    r.layers_used = band_layout::of(L).early_end;
    std::vector<double> per_pair(P);
    for (std::size_t i = 0; i < P; ++i) {
        double a = 0, b = 0;
        for (std::size_t l = 0; l < r.layers_used; ++l) {
            a += std::abs(target.at(i, l));
            b += std::abs(control.at(i, l));
        }
        per_pair[i] = a / static_cast<double>(r.layers_used) - b / static_cast<double>(r.layers_used);
    }
    r.test = one_sample_test(per_pair, resamples, seed);
    r.target_per_layer.assign(L, 0.0);
    r.control_per_layer.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t i = 0; i < P; ++i) {
            r.target_per_layer[l] += std::abs(target.at(i, l));
            r.control_per_layer[l] += std::abs(control.at(i, l));
        }
        r.target_per_layer[l] /= static_cast<double>(P);
        r.control_per_layer[l] /= static_cast<double>(P);
    }
    return r;
}

struct variability_result {
    std::vector<double> per_layer;         // mean over words of sd(|effect|)
    std::vector<double> signed_per_layer;  // same on signed effects
    std::size_t n_words = 0;
    std::size_t n_pairs = 0;
};

// Groups pairs by word; words seen in fewer than `min_contexts` pairs are an error.
inline variability_result context_independence(const effect_tensor& t, const std::map<std::string, std::string>& word_of_pair,
                                               std::size_t min_contexts = 3) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < t.n_pairs(); ++i) {
        auto it = word_of_pair.find(t.pair_ids[i]);
        if (it == word_of_pair.end()) throw domain_error("pair " + t.pair_ids[i] + " has no context group");
        groups[it->second].push_back(i);
    }
    if (groups.empty()) throw domain_error("context independence of an empty tensor");
    for (const auto& [w, idx] : groups) {
        if (idx.size() < min_contexts) {
            throw domain_error("word '" + w + "' appears in " + std::to_string(idx.size()) + " contexts, need " + std::to_string(min_contexts));
        }
    }
    const std::size_t L = t.n_layers;
    variability_result r;
    r.n_words = groups.size();
    r.n_pairs = t.n_pairs();
    r.per_layer.assign(L, 0.0);
    r.signed_per_layer.assign(L, 0.0);
    auto sample_sd = [](const std::vector<double>& v) {
        if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); })) return 0.0;
        double m = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double ss = 0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / static_cast<double>(v.size() - 1));
    };
    std::vector<double> mag, sgn;
    for (std::size_t l = 0; l < L; ++l) {
        for (const auto& [w, idx] : groups) {
            mag.clear();
            sgn.clear();
            for (auto i : idx) {
                mag.push_back(std::abs(t.at(i, l)));
                sgn.push_back(t.at(i, l));
            }
            r.per_layer[l] += sample_sd(mag);
            r.signed_per_layer[l] += sample_sd(sgn);
        }
        r.per_layer[l] /= static_cast<double>(r.n_words);
        r.signed_per_layer[l] /= static_cast<double>(r.n_words);
    }
    return r;
}

// Keeps pairs whose word has at least `min_contexts` pairs. Returns the number
// of words dropped.
inline std::size_t drop_sparse_contexts(effect_tensor& t, const std::map<std::string, std::string>& word_of_pair, std::size_t min_contexts) {
    std::map<std::string, std::size_t> count;
    for (const auto& id : t.pair_ids) {
        auto it = word_of_pair.find(id);
        if (it != word_of_pair.end()) ++count[it->second];
    }
    std::vector<bool> keep(t.n_pairs());
    std::size_t dropped = 0;
    for (const auto& [w, c] : count) dropped += c < min_contexts;
    for (std::size_t i = 0; i < t.n_pairs(); ++i) {
        auto it = word_of_pair.find(t.pair_ids[i]);
        keep[i] = it != word_of_pair.end() && count[it->second] >= min_contexts;
    }
    t = t.only(keep);
    return dropped;
}

// ---------------------------------------------------------------------------
// Contextual metrics

struct phenomenon_profile {
    std::string code;
    std::string name;
    std::size_t n_pairs = 0;
    std::vector<double> mean_abs;  // per layer
    std::size_t peak = 0;
    bool peak_tie = false;
    std::vector<std::size_t> top;  // up to three layers, strongest first
};

struct peak_result {
    std::vector<phenomenon_profile> phenomena;
    std::vector<std::size_t> histogram;  // phenomena peaking at each layer

    std::size_t peaks_in(std::size_t lo, std::size_t hi) const {
        std::size_t n = 0;
        for (const auto& p : phenomena) n += p.peak >= lo && p.peak <= hi;
        return n;
    }
};

// Mean |effect| per phenomenon and layer; peak is the argmax (lower layer on
// ties, flagged); top lists the three largest, ties toward the lower layer.
// Every code in `expected` must have pairs.
inline peak_result peak_layer_distribution(const effect_tensor& t, const std::map<std::string, std::string>& names = {},
                                           std::span<const std::string> expected = {}) {
    std::map<std::string, std::vector<std::size_t>> by_code;
    for (std::size_t i = 0; i < t.n_pairs(); ++i) by_code[t.phenomena[i]].push_back(i);
    for (const auto& code : expected) {
        if (!by_code.contains(code)) throw domain_error("no effects for phenomenon " + code);
    }
    if (by_code.empty()) throw domain_error("peak layer distribution of an empty tensor");
    std::vector<std::string> codes;
    for (const auto& [c, _] : by_code) codes.push_back(c);
    std::sort(codes.begin(), codes.end(), phenomenon_less);

    const std::size_t L = t.n_layers;
    peak_result r;
    r.histogram.assign(L, 0);
    for (const auto& code : codes) {
        const auto& idx = by_code[code];
        phenomenon_profile p;
        p.code = code;
        if (auto it = names.find(code); it != names.end()) p.name = it->second;
        p.n_pairs = idx.size();
        p.mean_abs.assign(L, 0.0);
        for (std::size_t l = 0; l < L; ++l) {
            for (auto i : idx) p.mean_abs[l] += std::abs(t.at(i, l));
            p.mean_abs[l] /= static_cast<double>(idx.size());
        }
        for (std::size_t l = 1; l < L; ++l) {
            if (p.mean_abs[l] > p.mean_abs[p.peak]) p.peak = l;
        }
        for (std::size_t l = 0; l < L; ++l) p.peak_tie |= l != p.peak && p.mean_abs[l] == p.mean_abs[p.peak];
        std::vector<std::size_t> order(L);
        for (std::size_t l = 0; l < L; ++l) order[l] = l;
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p.mean_abs[a] > p.mean_abs[b]; });
        order.resize(std::min<std::size_t>(3, L));
        p.top = order;
        ++r.histogram[p.peak];
        r.phenomena.push_back(std::move(p));
    }
    return r;
}

struct convergence_result {
    std::vector<std::size_t> modal_set;  // sorted ascending
    std::size_t n_sharing = 0;
    std::size_t n_phenomena = 0;
    double fraction = 0.0;
    bool modal_tie = false;  // another set was just as common; the smaller one wins
};

inline convergence_result top3_convergence(const peak_result& peaks) {
    if (peaks.phenomena.empty()) throw domain_error("top-3 convergence with no phenomena");
    std::map<std::vector<std::size_t>, std::size_t> sets;
    for (const auto& p : peaks.phenomena) {
        auto s = p.top;
        std::sort(s.begin(), s.end());
        ++sets[s];
    }
    convergence_result r;
    r.n_phenomena = peaks.phenomena.size();
    for (const auto& [s, c] : sets) {
        if (c > r.n_sharing) {
            r.modal_set = s;
            r.n_sharing = c;
            r.modal_tie = false;
        } else if (c == r.n_sharing) {
            r.modal_tie = true;
        }
    }
    r.fraction = static_cast<double>(r.n_sharing) / static_cast<double>(r.n_phenomena);
    return r;
}

struct importance_result {
    std::vector<double> totals;  // sum over pairs of |effect|
    double early = 0.0, mid = 0.0, late = 0.0;  // band shares
    double last_to_first = 0.0;                  // totals.back() / totals.front()
};

inline importance_result layer_importance(const effect_tensor& t) {
    const std::size_t L = t.n_layers;
    importance_result r;
    r.totals.assign(L, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t i = 0; i < t.n_pairs(); ++i) r.totals[l] += std::abs(t.at(i, l));
    }
    double grand = 0;
    for (double v : r.totals) grand += v;
    if (!(grand > 0)) throw domain_error("layer importance: all effects are zero");
    const auto b = band_layout::of(L);
    double band[3] = {0, 0, 0};
    for (int k = 0; k < 3; ++k) {
        auto [lo, hi] = b.range(k);
        for (std::size_t l = lo; l < hi; ++l) band[k] += r.totals[l];
    }
    r.early = band[0] / grand;
    r.mid = band[1] / grand;
    r.late = band[2] / grand;
    r.last_to_first = r.totals.front() > 0 ? r.totals.back() / r.totals.front() : std::numeric_limits<double>::infinity();
    return r;
}

// ---------------------------------------------------------------------------
// Report and hypothesis verdicts

struct hypothesis_criteria {
    double alpha = 0.01;
    std::size_t middle_lo = 4;  // H-Ctx1 window, inclusive
    std::size_t middle_hi = 8;
    double middle_fraction = 0.5;
    double convergence_max = 0.5;
    double max_band_share = 0.45;
};

struct verdict {
    std::string id;
    std::string name;
    bool supported = false;
    std::string criterion;
    std::string observed;
};

struct metric_report {
    std::size_t n_layers = 0;
    std::string contextual_mode = "target-words";
    std::optional<sensitivity_result> sensitivity;
    std::optional<specificity_result> specificity;
    std::optional<variability_result> variability;
    std::optional<peak_result> peaks;
    std::optional<convergence_result> convergence;
    std::optional<importance_result> importance;
    hypothesis_criteria criteria;
    std::vector<verdict> verdicts;
    std::vector<std::string> notes;
};

namespace detail {
inline std::string fmt(double v, int prec = 4) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}
}  // namespace detail

inline std::vector<verdict> evaluate_hypotheses(const metric_report& r) {
    std::vector<std::string> missing;
    if (!r.sensitivity) missing.push_back("lexical sensitivity");
    if (!r.specificity) missing.push_back("position specificity");
    if (!r.variability) missing.push_back("context independence");
    if (!r.peaks) missing.push_back("peak layers");
    if (!r.convergence) missing.push_back("top-3 convergence");
    if (!r.importance) missing.push_back("layer importance");
    if (!missing.empty()) {
        std::string m = "cannot evaluate hypotheses, missing:";
        for (const auto& s : missing) m += " [" + s + "]";
        throw incomplete_report_error(m);
    }
    const auto& c = r.criteria;
    const auto bands = band_layout::of(r.n_layers);
    std::vector<verdict> out;
    using detail::fmt;

    const auto& s = r.sensitivity->overall;
    out.push_back({"H-Lex1", "lexical sensitivity", s.mean > 0 && s.p_value < c.alpha, "mean |effect| > 0 with p < " + fmt(c.alpha),
                   "mean " + fmt(s.mean) + ", p " + fmt(s.p_value)});

    const double e = band_mean(r.sensitivity->per_layer, bands, 0), m = band_mean(r.sensitivity->per_layer, bands, 1),
                 l = band_mean(r.sensitivity->per_layer, bands, 2);
    out.push_back({"H-Lex2", "early-layer dominance", e > m && e > l, "early-band mean sensitivity > mid and > late",
                   "early " + fmt(e) + ", mid " + fmt(m) + ", late " + fmt(l)});

    const auto& sp = r.specificity->test;
    out.push_back({"H-Lex3", "position specificity", sp.mean > 0 && sp.p_value < c.alpha, "specificity mean > 0 with p < " + fmt(c.alpha),
                   "mean " + fmt(sp.mean) + ", p " + fmt(sp.p_value)});

    const double ve = band_mean(r.variability->per_layer, bands, 0), vl = band_mean(r.variability->per_layer, bands, 2);
    out.push_back({"H-Lex4", "context independence", ve < vl, "early-band variability < late-band variability",
                   "early " + fmt(ve) + ", late " + fmt(vl)});

    const auto n_mid = r.peaks->peaks_in(c.middle_lo, c.middle_hi);
    const double frac_mid = static_cast<double>(n_mid) / static_cast<double>(r.peaks->phenomena.size());
    out.push_back({"H-Ctx1", "middle layer concentration", frac_mid >= c.middle_fraction,
                   ">= " + fmt(c.middle_fraction * 100) + "% of phenomena peak in layers " + std::to_string(c.middle_lo) + "-" +
                       std::to_string(c.middle_hi),
                   std::to_string(n_mid) + " of " + std::to_string(r.peaks->phenomena.size()) + " (" + fmt(frac_mid * 100, 3) + "%)"});

    out.push_back({"H-Ctx2", "phenomenon specificity", r.convergence->fraction < c.convergence_max,
                   "share of phenomena with the modal top-3 set < " + fmt(c.convergence_max),
                   std::to_string(r.convergence->n_sharing) + " of " + std::to_string(r.convergence->n_phenomena) + " (" +
                       fmt(r.convergence->fraction, 3) + ")"});

    const auto& im = *r.importance;
    const double top = std::max({im.early, im.mid, im.late});
    out.push_back({"H-Ctx3", "distributed processing", top <= c.max_band_share, "no band share above " + fmt(c.max_band_share),
                   "early " + fmt(im.early, 3) + ", mid " + fmt(im.mid, 3) + ", late " + fmt(im.late, 3)});
    return out;
}

// Placeholder when there is too little data to test; every number is NaN.
inline specificity_result undefined_specificity(std::size_t n_layers, std::size_t n_pairs) {
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    specificity_result s;
    s.test.n = n_pairs;
    s.test.mean = s.test.sd = s.test.t = s.test.p_value = s.test.permutation_p = nan;
    s.target_per_layer.assign(n_layers, nan);
    s.control_per_layer.assign(n_layers, nan);
    s.n_pairs = n_pairs;
    s.layers_used = band_layout::of(n_layers).early_end;
    return s;
}

struct analysis_options {
    std::size_t n_layers = 0;  // 0: infer from the tables
    std::size_t permutation_resamples = 10000;
    std::uint64_t permutation_seed = 0;
    position_mode contextual_mode = position_mode::target_words;
    std::size_t min_contexts = 3;
    hypothesis_criteria criteria;
};

// Lexical metrics come from the target-words and control-words modes of
// `lexical`, contextual metrics from `contextual_mode` of `contextual`. Either
// table may be empty, in which case its metrics stay unset and no verdicts are
// rendered.
inline metric_report analyze(const effect_table& lexical, const effect_table& contextual, const std::map<std::string, std::string>& word_of_pair,
                             const std::map<std::string, std::string>& names, const analysis_options& opt = {}) {
    constexpr double nan = std::numeric_limits<double>::quiet_NaN();
    metric_report r;
    r.criteria = opt.criteria;
    r.contextual_mode = to_string(opt.contextual_mode);
    std::size_t n_layers = opt.n_layers;
    if (n_layers == 0) {
        for (const auto* t : {&lexical, &contextual}) {
            for (const auto& rec : t->records) n_layers = std::max(n_layers, rec.layer + 1);
        }
    }
    r.n_layers = n_layers;

    const auto target = effect_tensor::from_table(lexical, position_mode::target_words, n_layers);
    if (!target.empty()) {
        r.sensitivity = lexical_sensitivity(target, opt.permutation_resamples, opt.permutation_seed);

        const auto control = effect_tensor::from_table(lexical, position_mode::control_words, n_layers);
        std::vector<bool> keep(target.n_pairs());
        for (std::size_t i = 0; i < target.n_pairs(); ++i) {
            keep[i] = std::binary_search(control.pair_ids.begin(), control.pair_ids.end(), target.pair_ids[i]);
        }
        const auto matched = target.only(keep);
        if (matched.n_pairs() >= 2) {
            r.specificity = position_specificity(matched, control, opt.permutation_resamples, opt.permutation_seed);
        } else {
            r.specificity = undefined_specificity(n_layers, matched.n_pairs());
            r.notes.push_back("position specificity undefined: fewer than two pairs have control words");
        }
        if (matched.n_pairs() != target.n_pairs()) {
            r.notes.push_back("position specificity: " + std::to_string(target.n_pairs() - matched.n_pairs()) +
                              " pairs without control words excluded");
        }

        auto grouped = target;
        const auto dropped = drop_sparse_contexts(grouped, word_of_pair, opt.min_contexts);
        if (dropped > 0) {
            r.notes.push_back("context independence: " + std::to_string(dropped) + " words seen in fewer than " +
                              std::to_string(opt.min_contexts) + " contexts excluded");
        }
        if (grouped.empty()) {
            r.variability = variability_result{std::vector<double>(n_layers, nan), std::vector<double>(n_layers, nan), 0, 0};
            r.notes.push_back("context independence undefined: no word reaches " + std::to_string(opt.min_contexts) + " contexts");
        } else {
            r.variability = context_independence(grouped, word_of_pair, opt.min_contexts);
        }
    }

    const auto ctx = effect_tensor::from_table(contextual, opt.contextual_mode, n_layers);
    if (!ctx.empty()) {
        r.peaks = peak_layer_distribution(ctx, names);
        r.convergence = top3_convergence(*r.peaks);
        r.importance = layer_importance(ctx);
        for (const auto& p : r.peaks->phenomena) {
            if (p.peak_tie) r.notes.push_back("peak layer tie for " + p.code + ", lower layer kept");
        }
        if (r.convergence->modal_tie) r.notes.push_back("modal top-3 set tie, lexicographically smallest set kept");
    }

    r.notes.push_back("H-Ctx1 middle window is layers " + std::to_string(opt.criteria.middle_lo) + "-" +
                      std::to_string(opt.criteria.middle_hi));
    if (r.sensitivity && r.peaks) r.verdicts = evaluate_hypotheses(r);
    return r;
}

// ---------------------------------------------------------------------------
// JSON (keys sorted, so dumps are canonical). Non-finite numbers become null.

namespace detail {
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double num_of(const nlohmann::json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }
inline nlohmann::json nums(std::span<const double> v) {
    auto a = nlohmann::json::array();
    for (double x : v) a.push_back(num(x));
    return a;
}
inline std::vector<double> nums_of(const nlohmann::json& j) {
    std::vector<double> v;
    for (const auto& x : j) v.push_back(num_of(x));
    return v;
}
inline nlohmann::json to_json(const significance& s) {
    return {{"n", s.n},
            {"mean", num(s.mean)},
            {"sd", num(s.sd)},
            {"t", num(s.t)},
            {"p_value", num(s.p_value)},
            {"permutation_p", num(s.permutation_p)},
            {"resamples", s.resamples},
            {"seed", s.seed}};
}
inline significance significance_from_json(const nlohmann::json& j) {
    significance s;
    s.n = j.at("n").get<std::size_t>();
    s.mean = num_of(j.at("mean"));
    s.sd = num_of(j.at("sd"));
    s.t = num_of(j.at("t"));
    if (j.at("t").is_null() && s.sd == 0 && s.mean != 0) s.t = std::copysign(std::numeric_limits<double>::infinity(), s.mean);
    s.p_value = num_of(j.at("p_value"));
    s.permutation_p = num_of(j.at("permutation_p"));
    s.resamples = j.at("resamples").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}
}  // namespace detail

inline nlohmann::json to_json(const metric_report& r) {
    using detail::num;
    using detail::nums;
    nlohmann::json j;
    j["n_layers"] = r.n_layers;
    j["contextual_mode"] = r.contextual_mode;
    const auto bands = band_layout::of(r.n_layers);
    j["bands"] = {{"early", {0, bands.early_end}}, {"mid", {bands.early_end, bands.mid_end}}, {"late", {bands.mid_end, bands.n_layers}}};
    if (r.sensitivity) {
        j["lexical_sensitivity"] = {{"per_layer", nums(r.sensitivity->per_layer)},
                                    {"signed_per_layer", nums(r.sensitivity->signed_per_layer)},
                                    {"overall", detail::to_json(r.sensitivity->overall)},
                                    {"n_pairs", r.sensitivity->n_pairs}};
    }
    if (r.specificity) {
        j["position_specificity"] = {{"test", detail::to_json(r.specificity->test)},
                                     {"target_per_layer", nums(r.specificity->target_per_layer)},
                                     {"control_per_layer", nums(r.specificity->control_per_layer)},
                                     {"n_pairs", r.specificity->n_pairs},
                                     {"layers_used", r.specificity->layers_used}};
    }
    if (r.variability) {
        j["context_independence"] = {{"per_layer", nums(r.variability->per_layer)},
                                     {"signed_per_layer", nums(r.variability->signed_per_layer)},
                                     {"n_words", r.variability->n_words},
                                     {"n_pairs", r.variability->n_pairs}};
    }
    if (r.peaks) {
        auto a = nlohmann::json::array();
        for (const auto& p : r.peaks->phenomena) {
            a.push_back({{"code", p.code},
                         {"name", p.name},
                         {"n_pairs", p.n_pairs},
                         {"mean_abs", nums(p.mean_abs)},
                         {"peak", p.peak},
                         {"peak_tie", p.peak_tie},
                         {"top3", p.top}});
        }
        j["peak_layers"] = {{"phenomena", a}, {"histogram", r.peaks->histogram}};
    }
    if (r.convergence) {
        j["top3_convergence"] = {{"modal_set", r.convergence->modal_set},
                                 {"n_sharing", r.convergence->n_sharing},
                                 {"n_phenomena", r.convergence->n_phenomena},
                                 {"fraction", num(r.convergence->fraction)},
                                 {"modal_tie", r.convergence->modal_tie}};
    }
    if (r.importance) {
        j["layer_importance"] = {{"totals", nums(r.importance->totals)},
                                 {"shares", {{"early", num(r.importance->early)}, {"mid", num(r.importance->mid)}, {"late", num(r.importance->late)}}},
                                 {"last_to_first", num(r.importance->last_to_first)}};
    }
    const auto& c = r.criteria;
    j["criteria"] = {{"alpha", c.alpha},
                     {"middle_lo", c.middle_lo},
                     {"middle_hi", c.middle_hi},
                     {"middle_fraction", c.middle_fraction},
                     {"convergence_max", c.convergence_max},
                     {"max_band_share", c.max_band_share}};
    auto v = nlohmann::json::array();
    for (const auto& x : r.verdicts) {
        v.push_back({{"id", x.id},
                     {"name", x.name},
                     {"verdict", x.supported ? "SUPPORTED" : "FALSIFIED"},
                     {"criterion", x.criterion},
                     {"observed", x.observed}});
    }
    j["hypotheses"] = v;
    j["notes"] = r.notes;
    return j;
}

inline metric_report metric_report_from_json(const nlohmann::json& j) {
    using detail::num_of;
    using detail::nums_of;
    try {
        metric_report r;
        r.n_layers = j.at("n_layers").get<std::size_t>();
        r.contextual_mode = j.at("contextual_mode").get<std::string>();
        if (j.contains("lexical_sensitivity")) {
            const auto& s = j["lexical_sensitivity"];
            r.sensitivity = sensitivity_result{nums_of(s.at("per_layer")), nums_of(s.at("signed_per_layer")),
                                               detail::significance_from_json(s.at("overall")), s.at("n_pairs").get<std::size_t>()};
        }
        if (j.contains("position_specificity")) {
            const auto& s = j["position_specificity"];
            r.specificity = specificity_result{detail::significance_from_json(s.at("test")), nums_of(s.at("target_per_layer")),
                                               nums_of(s.at("control_per_layer")), s.at("n_pairs").get<std::size_t>(),
                                               s.at("layers_used").get<std::size_t>()};
        }
        if (j.contains("context_independence")) {
            const auto& s = j["context_independence"];
            r.variability = variability_result{nums_of(s.at("per_layer")), nums_of(s.at("signed_per_layer")), s.at("n_words").get<std::size_t>(),
                                               s.at("n_pairs").get<std::size_t>()};
        }
        if (j.contains("peak_layers")) {
            peak_result p;
            for (const auto& x : j["peak_layers"].at("phenomena")) {
                p.phenomena.push_back({x.at("code").get<std::string>(), x.at("name").get<std::string>(), x.at("n_pairs").get<std::size_t>(),
                                       nums_of(x.at("mean_abs")), x.at("peak").get<std::size_t>(), x.at("peak_tie").get<bool>(),
                                       x.at("top3").get<std::vector<std::size_t>>()});
            }
            p.histogram = j["peak_layers"].at("histogram").get<std::vector<std::size_t>>();
            r.peaks = std::move(p);
        }
        if (j.contains("top3_convergence")) {
            const auto& s = j["top3_convergence"];
            r.convergence = convergence_result{s.at("modal_set").get<std::vector<std::size_t>>(), s.at("n_sharing").get<std::size_t>(),
                                               s.at("n_phenomena").get<std::size_t>(), num_of(s.at("fraction")), s.at("modal_tie").get<bool>()};
        }
        if (j.contains("layer_importance")) {
            const auto& s = j["layer_importance"];
            importance_result im;
            im.totals = nums_of(s.at("totals"));
            im.early = num_of(s.at("shares").at("early"));
            im.mid = num_of(s.at("shares").at("mid"));
            im.late = num_of(s.at("shares").at("late"));
            im.last_to_first = num_of(s.at("last_to_first"));
            r.importance = im;
        }
        const auto& c = j.at("criteria");
        r.criteria = {c.at("alpha").get<double>(),         c.at("middle_lo").get<std::size_t>(),    c.at("middle_hi").get<std::size_t>(),
                      c.at("middle_fraction").get<double>(), c.at("convergence_max").get<double>(), c.at("max_band_share").get<double>()};
        for (const auto& v : j.at("hypotheses")) {
            r.verdicts.push_back({v.at("id").get<std::string>(), v.at("name").get<std::string>(), v.at("verdict").get<std::string>() == "SUPPORTED",
                                  v.at("criterion").get<std::string>(), v.at("observed").get<std::string>()});
        }
        r.notes = j.at("notes").get<std::vector<std::string>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("metric report: ") + e.what());
    }
}

inline std::string canonical_json(const metric_report& r) { return to_json(r).dump(2) + "\n"; }

inline void write_metric_report(const metric_report& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << canonical_json(r);
    if (!out) throw io_error("write failed for " + path.string());
}

inline metric_report read_metric_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    try {
        return metric_report_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

}  // namespace sentiscope
