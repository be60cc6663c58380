#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sentiscope/effects.hpp"
#include "sentiscope/error.hpp"
#include "sentiscope/metrics.hpp"

namespace sentiscope {

// The five figure tables and charts. Each stem is used for both <stem>.csv
// and <stem>.svg.
struct figure_id {
    const char* title;
    const char* stem;
};

inline constexpr figure_id figures[5] = {
    {"Lexical Sensitivity", "lexical_sensitivity"},
    {"Position Specificity", "position_specificity"},
    {"Context Independence of Sentiment Effects", "context_independence_of_sentiment_effects"},
    {"Peak Layer Distribution Across Context Types", "peak_layer_distribution_across_context_types"},
    {"Layer Importance Gradient", "layer_importance_gradient"},
};

// ---------------------------------------------------------------------------
// Minimal bar chart renderer. Output is a standalone SVG with no external
// references; layout is fixed so equal inputs give equal bytes.

struct bar_series {
    std::string name;
    std::vector<double> values;
    std::string color;
};

struct bar_chart {
    std::string title;
    std::string subtitle;
    std::string x_label;
    std::string y_label;
    std::vector<std::string> categories;
    std::vector<bar_series> series;
    std::vector<std::string> bar_colors;  // per category, single-series charts only
    std::vector<std::string> bar_notes;   // text above each category
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// 1, 2 or 5 times a power of ten, so that ~5 ticks cover `top`.
inline double nice_step(double top) {
    if (!(top > 0)) return 1.0;
    const double raw = top / 5;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (m * mag >= raw) return m * mag;
    }
    return 10 * mag;
}

}  // namespace detail

inline std::string render_svg(const bar_chart& c) {
    using detail::px;
    using detail::xml_escape;
    const double W = 760, H = 440, left = 80, right = 20, top = 70, bottom = 90;
    const double plot_w = W - left - right, plot_h = H - top - bottom;

    double hi = 0, lo = 0;
    for (const auto& s : c.series) {
        for (double v : s.values) {
            if (!std::isfinite(v)) continue;
            hi = std::max(hi, v);
            lo = std::min(lo, v);
        }
    }
    const double step = detail::nice_step(std::max(hi - lo, 1e-12));
    hi = std::ceil(hi / step) * step;
    lo = std::floor(lo / step) * step;
    if (hi - lo <= 0) hi = lo + step;
    auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
      << "\" font-family=\"Helvetica, Arial, sans-serif\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"18\" font-weight=\"bold\">" << xml_escape(c.title) << "</text>\n";
    if (!c.subtitle.empty()) {
        o << "<text x=\"" << W / 2 << "\" y=\"50\" text-anchor=\"middle\" font-size=\"12\" fill=\"#444\">" << xml_escape(c.subtitle) << "</text>\n";
    }
    for (double v = lo; v <= hi + step / 2; v += step) {
        const double y = y_of(v);
        o << "<line x1=\"" << left << "\" x2=\"" << W - right << "\" y1=\"" << px(y) << "\" y2=\"" << px(y) << "\" stroke=\"#ddd\"/>\n";
        char lab[32];
        std::snprintf(lab, sizeof lab, "%g", std::abs(v) < step * 1e-9 ? 0.0 : v);
        o << "<text x=\"" << left - 6 << "\" y=\"" << px(y + 4) << "\" text-anchor=\"end\" font-size=\"11\">" << lab << "</text>\n";
    }
    o << "<line x1=\"" << left << "\" x2=\"" << W - right << "\" y1=\"" << px(y_of(0)) << "\" y2=\"" << px(y_of(0))
      << "\" stroke=\"#333\"/>\n";

    const std::size_t n = c.categories.size(), k = std::max<std::size_t>(c.series.size(), 1);
    const double slot = n ? plot_w / static_cast<double>(n) : plot_w;
    const double bar_w = slot * 0.8 / static_cast<double>(k);
    for (std::size_t i = 0; i < n; ++i) {
        const double x0 = left + slot * static_cast<double>(i) + slot * 0.1;
        for (std::size_t s = 0; s < c.series.size(); ++s) {
            const double v = i < c.series[s].values.size() ? c.series[s].values[i] : std::nan("");
            if (!std::isfinite(v)) continue;
            const double y = y_of(std::max(v, 0.0)), h = std::abs(y_of(v) - y_of(0));
            const std::string& fill = c.series.size() == 1 && i < c.bar_colors.size() ? c.bar_colors[i] : c.series[s].color;
            o << "<rect x=\"" << px(x0 + bar_w * static_cast<double>(s)) << "\" y=\"" << px(v >= 0 ? y : y_of(0)) << "\" width=\"" << px(bar_w)
              << "\" height=\"" << px(std::max(h, 0.5)) << "\" fill=\"" << fill << "\"/>\n";
        }
        if (i < c.bar_notes.size() && !c.bar_notes[i].empty()) {
            double vmax = 0;
            for (const auto& s : c.series) {
                if (i < s.values.size() && std::isfinite(s.values[i])) vmax = std::max(vmax, s.values[i]);
            }
            o << "<text x=\"" << px(left + slot * (static_cast<double>(i) + 0.5)) << "\" y=\"" << px(y_of(vmax) - 4)
              << "\" text-anchor=\"middle\" font-size=\"10\">" << xml_escape(c.bar_notes[i]) << "</text>\n";
        }
        const double cx = left + slot * (static_cast<double>(i) + 0.5), cy = top + plot_h + 14;
        if (n > 14) {
            o << "<text x=\"" << px(cx) << "\" y=\"" << px(cy) << "\" text-anchor=\"end\" font-size=\"10\" transform=\"rotate(-40 " << px(cx) << ' '
              << px(cy) << ")\">" << xml_escape(c.categories[i]) << "</text>\n";
        } else {
            o << "<text x=\"" << px(cx) << "\" y=\"" << px(cy) << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(c.categories[i])
              << "</text>\n";
        }
    }
    o << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(c.x_label)
      << "</text>\n";
    o << "<text x=\"18\" y=\"" << top + plot_h / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 " << top + plot_h / 2
      << ")\">" << xml_escape(c.y_label) << "</text>\n";
    if (c.series.size() > 1) {
        double lx = W - right - 150;
        for (std::size_t s = 0; s < c.series.size(); ++s) {
            const double ly = top + 4 + 16 * static_cast<double>(s);
            o << "<rect x=\"" << px(lx) << "\" y=\"" << px(ly) << "\" width=\"10\" height=\"10\" fill=\"" << c.series[s].color << "\"/>\n";
            o << "<text x=\"" << px(lx + 14) << "\" y=\"" << px(ly + 9) << "\" font-size=\"11\">" << xml_escape(c.series[s].name) << "</text>\n";
        }
    }
    o << "</svg>\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Figure data

namespace detail {

inline const char* band_color(const band_layout& b, std::size_t l) {
    if (l < b.early_end) return "#4c72b0";
    if (l < b.mid_end) return "#dd8452";
    return "#55a868";
}

inline std::vector<std::string> layer_names(std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t l = 0; l < n; ++l) v.push_back("L" + std::to_string(l));
    return v;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw io_error("cannot write " + p.string());
    out << s;
    if (!out) throw io_error("write failed for " + p.string());
}

inline std::string f17(double v) { return std::isfinite(v) ? format_double(v) : ""; }

}  // namespace detail

// Table text for each figure, in `figures` order. Missing metrics give an
// empty string.
inline std::vector<std::string> figure_tables(const metric_report& r) {
    using detail::f17;
    const auto b = band_layout::of(r.n_layers);
    std::vector<std::string> t(5);
    if (r.sensitivity) {
        std::ostringstream o;
        o << "layer,band,mean_abs_effect,mean_signed_effect\n";
        for (std::size_t l = 0; l < r.sensitivity->per_layer.size(); ++l) {
            o << l << ',' << band_name(l < b.early_end ? 0 : l < b.mid_end ? 1 : 2) << ',' << f17(r.sensitivity->per_layer[l]) << ','
              << f17(r.sensitivity->signed_per_layer[l]) << '\n';
        }
        t[0] = o.str();
    }
    if (r.specificity) {
        std::ostringstream o;
        o << "layer,target_mean_abs_effect,control_mean_abs_effect\n";
        for (std::size_t l = 0; l < r.specificity->target_per_layer.size(); ++l) {
            o << l << ',' << f17(r.specificity->target_per_layer[l]) << ',' << f17(r.specificity->control_per_layer[l]) << '\n';
        }
        t[1] = o.str();
    }
    if (r.variability) {
        std::ostringstream o;
        o << "layer,band,variability,signed_variability\n";
        for (std::size_t l = 0; l < r.variability->per_layer.size(); ++l) {
            o << l << ',' << band_name(l < b.early_end ? 0 : l < b.mid_end ? 1 : 2) << ',' << f17(r.variability->per_layer[l]) << ','
              << f17(r.variability->signed_per_layer[l]) << '\n';
        }
        t[2] = o.str();
    }
    if (r.peaks) {
        std::ostringstream o;
        o << "phenomenon,name,n_pairs,peak_layer,peak_mean_abs_effect,peak_tie,top1,top2,top3\n";
        for (const auto& p : r.peaks->phenomena) {
            o << p.code << ',' << p.name << ',' << p.n_pairs << ',' << p.peak << ',' << f17(p.mean_abs[p.peak]) << ',' << (p.peak_tie ? 1 : 0);
            for (std::size_t k = 0; k < 3; ++k) {
                o << ',';
                if (k < p.top.size()) o << p.top[k];
            }
            o << '\n';
        }
        t[3] = o.str();
    }
    if (r.importance) {
        std::ostringstream o;
        o << "layer,band,total_abs_effect\n";
        for (std::size_t l = 0; l < r.importance->totals.size(); ++l) {
            o << l << ',' << band_name(l < b.early_end ? 0 : l < b.mid_end ? 1 : 2) << ',' << f17(r.importance->totals[l]) << '\n';
        }
        t[4] = o.str();
    }
    return t;
}

inline std::vector<bar_chart> figure_charts(const metric_report& r) {
    using detail::fmt;
    const auto b = band_layout::of(r.n_layers);
    std::vector<std::string> colors;
    for (std::size_t l = 0; l < r.n_layers; ++l) colors.push_back(detail::band_color(b, l));
    std::vector<bar_chart> out(5);
    for (std::size_t i = 0; i < 5; ++i) out[i].title = figures[i].title;

    if (r.sensitivity) {
        auto& c = out[0];
        c.subtitle = "mean |probability shift| when target words are patched, " + std::to_string(r.sensitivity->n_pairs) + " pairs";
        c.x_label = "layer";
        c.y_label = "mean |effect|";
        c.categories = detail::layer_names(r.n_layers);
        c.series = {{"sensitivity", r.sensitivity->per_layer, "#4c72b0"}};
        c.bar_colors = colors;
    }
    if (r.specificity) {
        auto& c = out[1];
        c.subtitle = "specificity mean " + fmt(r.specificity->test.mean) + ", t-test p " + fmt(r.specificity->test.p_value) + ", permutation p " +
                     fmt(r.specificity->test.permutation_p) + ", " + std::to_string(r.specificity->n_pairs) + " pairs";
        c.x_label = "layer";
        c.y_label = "mean |effect|";
        c.categories = detail::layer_names(r.n_layers);
        c.series = {{"target words", r.specificity->target_per_layer, "#c44e52"}, {"control words", r.specificity->control_per_layer, "#8c8c8c"}};
    }
    if (r.variability) {
        auto& c = out[2];
        c.subtitle = "mean over words of the sd of |effect| across contexts, " + std::to_string(r.variability->n_words) + " words";
        c.x_label = "layer";
        c.y_label = "variability";
        c.categories = detail::layer_names(r.n_layers);
        c.series = {{"variability", r.variability->per_layer, "#4c72b0"}};
        c.bar_colors = colors;
    }
    if (r.peaks) {
        auto& c = out[3];
        c.subtitle = "layer of strongest mean |effect| per phenomenon (" + r.contextual_mode + " patching)";
        c.x_label = "phenomenon";
        c.y_label = "peak layer";
        std::vector<double> v;
        for (const auto& p : r.peaks->phenomena) {
            c.categories.push_back(p.name.empty() ? p.code : p.code + " " + p.name);
            v.push_back(static_cast<double>(p.peak));
            c.bar_colors.push_back(detail::band_color(b, p.peak));
            c.bar_notes.push_back("L" + std::to_string(p.peak) + (p.peak_tie ? "*" : ""));
        }
        c.series = {{"peak layer", v, "#4c72b0"}};
    }
    if (r.importance) {
        auto& c = out[4];
        c.subtitle = "sum of |effect| per layer; shares early " + fmt(r.importance->early, 3) + ", mid " + fmt(r.importance->mid, 3) + ", late " +
                     fmt(r.importance->late, 3);
        c.x_label = "layer";
        c.y_label = "total |effect|";
        c.categories = detail::layer_names(r.n_layers);
        c.series = {{"importance", r.importance->totals, "#4c72b0"}};
        c.bar_colors = colors;
    }
    return out;
}

// Writes <stem>.csv and/or <stem>.svg for every figure whose metric is present.
// Returns the files written.
inline std::vector<std::filesystem::path> write_figures(const metric_report& r, const std::filesystem::path& dir, bool csv, bool svg) {
    std::filesystem::create_directories(dir);
    const auto tables = figure_tables(r);
    const auto charts = figure_charts(r);
    std::vector<std::filesystem::path> out;
    for (std::size_t i = 0; i < 5; ++i) {
        if (tables[i].empty()) continue;
        if (csv) {
            out.push_back(dir / (std::string(figures[i].stem) + ".csv"));
            detail::write_text(out.back(), tables[i]);
        }
        if (svg) {
            out.push_back(dir / (std::string(figures[i].stem) + ".svg"));
            detail::write_text(out.back(), render_svg(charts[i]));
        }
    }
    return out;
}

}  // namespace sentiscope
