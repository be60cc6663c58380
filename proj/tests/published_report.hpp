#pragma once

// A metric report filled with the published GPT-2 117M statistics. Where only a
// direction is published (per-layer sensitivity, which phenomena fall outside
// the modal top-3 set) the values are shaped to match that statement.

#include <string>

#include "sentiscope/metrics.hpp"

namespace published {

inline sentiscope::metric_report reported_statistics() {
    using namespace sentiscope;
    metric_report r;
    r.n_layers = 12;

    sensitivity_result s;
    s.per_layer = {0.31, 0.27, 0.24, 0.22, 0.12, 0.11, 0.10, 0.10, 0.09, 0.09, 0.08, 0.08};  // L0 peak, early band highest
    s.signed_per_layer = s.per_layer;
    s.overall.n = 2000;
    s.overall.mean = 0.15;
    s.overall.p_value = 0.0009;  // "p < 0.001"
    s.overall.permutation_p = 0.0009;
    s.n_pairs = 2000;
    r.sensitivity = s;

    specificity_result sp;
    sp.test.n = 2000;
    sp.test.mean = 0.147;
    sp.test.p_value = 0.0009;
    sp.test.permutation_p = 0.0009;
    sp.n_pairs = 2000;
    sp.layers_used = 4;
    r.specificity = sp;

    variability_result v;
    v.per_layer = {0.038, 0.038, 0.038, 0.038, 0.356, 0.356, 0.356, 0.356, 0.356, 0.356, 0.356, 0.356};
    v.signed_per_layer = v.per_layer;
    r.variability = v;

    // 8 of 15 peak at L11, the rest at L0-L2.
    const std::pair<const char*, std::size_t> peaks[] = {
        {"strong positive contexts", 11}, {"medium intensity", 11},       {"intensified swap", 11},       {"simple negation", 11},
        {"intensified negation", 11},     {"sarcasm", 11},                {"multiple intensifiers", 11},  {"conditional vs actual", 11},
        {"comparative context", 0},       {"scale variation", 0},         {"complex double negation", 1}, {"conditional vs actual (2)", 1},
        {"intensity flip", 1},            {"domain context", 2},          {"intensity variation", 2},
    };
    peak_result p;
    p.histogram.assign(12, 0);
    for (const auto& [name, layer] : peaks) {
        phenomenon_profile pr;
        pr.code = name;
        pr.name = name;
        pr.peak = layer;
        pr.top = {11, 10, 9};
        if (std::string(name) == "domain context") pr.top = {2, 3, 4};
        if (std::string(name) == "intensity flip") pr.top = {1, 2, 0};
        ++p.histogram[layer];
        p.phenomena.push_back(pr);
    }
    r.peaks = p;

    r.convergence = convergence_result{{9, 10, 11}, 13, 15, 13.0 / 15.0, false};

    importance_result im;
    im.totals = {828.7, 900, 950, 1000, 2000, 2200, 2400, 2600, 3000, 3500, 4500, 5537.1};
    im.early = 0.15;
    im.mid = 0.39;
    im.late = 0.46;
    im.last_to_first = 5537.1 / 828.7;
    r.importance = im;
    return r;
}

}  // namespace published
