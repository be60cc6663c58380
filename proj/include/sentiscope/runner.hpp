#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sentiscope/datagen.hpp"
#include "sentiscope/effects.hpp"
#include "sentiscope/error.hpp"
#include "sentiscope/hash.hpp"
#include "sentiscope/metrics.hpp"
#include "sentiscope/model.hpp"
#include "sentiscope/patching.hpp"
#include "sentiscope/probe.hpp"
#include "sentiscope/report.hpp"
#include "sentiscope/tokenizer.hpp"

namespace sentiscope {

// ---------------------------------------------------------------------------
// Config

struct experiment_config {
    std::string model;  // tensor archive
    std::string vocab;
    std::string merges;
    std::string lexicon;
    std::string templates;
    std::string output_dir = "bundle";

    std::uint64_t suite_seed = 1;
    std::uint64_t subsample_seed = 1;
    std::uint64_t corpus_seed = 1;
    std::uint64_t probe_seed = 1;
    std::uint64_t permutation_seed = 1;

    std::size_t lexical_pairs = 1000;     // generated
    std::size_t contextual_pairs = 8000;  // generated
    double lexical_subsample = 0.2;       // share of the generated suite that is swept
    double contextual_subsample = 0.05;
    std::size_t lexical_count = 0;  // nonzero overrides the fraction
    std::size_t contextual_count = 0;

    std::size_t probe_corpus = 2000;
    probe_hyper probe;

    std::vector<position_mode> lexical_modes{position_mode::target_words, position_mode::control_words};
    std::vector<position_mode> contextual_modes{position_mode::target_words, position_mode::all};
    position_mode contextual_analysis_mode = position_mode::target_words;

    std::size_t permutation_resamples = 10000;
    std::size_t min_contexts = 3;
    hypothesis_criteria criteria;

    std::size_t workers = 0;  // 0: one per hardware thread; never changes results

    std::size_t worker_count() const { return workers ? workers : std::max(1u, std::thread::hardware_concurrency()); }

    std::size_t swept(std::size_t generated, double fraction, std::size_t count) const {
        if (count) return std::min(count, generated);
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(generated))));
    }

    void validate() const {
        for (double f : {lexical_subsample, contextual_subsample}) {
            if (!(f > 0 && f <= 1)) throw domain_error("subsample fraction must be in (0, 1], got " + std::to_string(f));
        }
        if (model.empty()) throw domain_error("config has no model archive");
        for (auto m : lexical_modes) {
            if (m == position_mode::all) throw domain_error("lexical sweep supports target-words and control-words only");
        }
        if (std::find(lexical_modes.begin(), lexical_modes.end(), position_mode::target_words) == lexical_modes.end()) {
            throw domain_error("lexical sweep needs the target-words mode");
        }
        if (std::find(contextual_modes.begin(), contextual_modes.end(), contextual_analysis_mode) == contextual_modes.end()) {
            throw domain_error("contextual analysis mode " + to_string(contextual_analysis_mode) + " is not swept");
        }
    }
};

namespace detail {
inline nlohmann::json modes_json(const std::vector<position_mode>& v) {
    auto a = nlohmann::json::array();
    for (auto m : v) a.push_back(to_string(m));
    return a;
}
inline std::vector<position_mode> modes_of(const nlohmann::json& j) {
    std::vector<position_mode> v;
    for (const auto& s : j) v.push_back(position_mode_from_string(s.get<std::string>()));
    return v;
}
}  // namespace detail

inline nlohmann::json to_json(const experiment_config& c) {
    return {{"model", c.model},
            {"vocab", c.vocab},
            {"merges", c.merges},
            {"lexicon", c.lexicon},
            {"templates", c.templates},
            {"output_dir", c.output_dir},
            {"seeds", {{"suite", c.suite_seed}, {"subsample", c.subsample_seed}, {"corpus", c.corpus_seed}, {"probe", c.probe_seed}, {"permutation", c.permutation_seed}}},
            {"suites",
             {{"lexical_pairs", c.lexical_pairs},
              {"contextual_pairs", c.contextual_pairs},
              {"lexical_subsample", c.lexical_subsample},
              {"contextual_subsample", c.contextual_subsample},
              {"lexical_count", c.lexical_count},
              {"contextual_count", c.contextual_count}}},
            {"probe",
             {{"corpus", c.probe_corpus},
              {"learning_rate", c.probe.learning_rate},
              {"epochs", c.probe.epochs},
              {"l2", c.probe.l2},
              {"patience", c.probe.patience},
              {"validation_fraction", c.probe.validation_fraction}}},
            {"modes",
             {{"lexical", detail::modes_json(c.lexical_modes)},
              {"contextual", detail::modes_json(c.contextual_modes)},
              {"contextual_analysis", to_string(c.contextual_analysis_mode)}}},
            {"analysis",
             {{"permutation_resamples", c.permutation_resamples},
              {"min_contexts", c.min_contexts},
              {"alpha", c.criteria.alpha},
              {"middle_lo", c.criteria.middle_lo},
              {"middle_hi", c.criteria.middle_hi},
              {"middle_fraction", c.criteria.middle_fraction},
              {"convergence_max", c.criteria.convergence_max},
              {"max_band_share", c.criteria.max_band_share}}},
            {"workers", c.workers}};
}

// Keys missing from `j` keep the values already in `c`; unknown keys are errors.
inline void merge_config(experiment_config& c, const nlohmann::json& j) {
    const auto known = to_json(c);
    std::function<void(const nlohmann::json&, const nlohmann::json&, const std::string&)> check = [&](const nlohmann::json& have,
                                                                                                      const nlohmann::json& ref,
                                                                                                      const std::string& where) {
        if (!have.is_object()) throw parse_error("config: " + (where.empty() ? std::string("top level") : where) + " must be an object");
        for (auto it = have.begin(); it != have.end(); ++it) {
            if (!ref.contains(it.key())) throw parse_error("config: unknown key '" + where + it.key() + "'");
            if (ref[it.key()].is_object()) check(it.value(), ref[it.key()], where + it.key() + ".");
        }
    };
    check(j, known, "");
    auto merged = known;
    merged.merge_patch(j);
    try {
        const auto& s = merged["seeds"];
        const auto& su = merged["suites"];
        const auto& p = merged["probe"];
        const auto& m = merged["modes"];
        const auto& a = merged["analysis"];
        c.model = merged["model"].get<std::string>();
        c.vocab = merged["vocab"].get<std::string>();
        c.merges = merged["merges"].get<std::string>();
        c.lexicon = merged["lexicon"].get<std::string>();
        c.templates = merged["templates"].get<std::string>();
        c.output_dir = merged["output_dir"].get<std::string>();
        c.suite_seed = s["suite"].get<std::uint64_t>();
        c.subsample_seed = s["subsample"].get<std::uint64_t>();
        c.corpus_seed = s["corpus"].get<std::uint64_t>();
        c.probe_seed = s["probe"].get<std::uint64_t>();
        c.permutation_seed = s["permutation"].get<std::uint64_t>();
        c.lexical_pairs = su["lexical_pairs"].get<std::size_t>();
        c.contextual_pairs = su["contextual_pairs"].get<std::size_t>();
        c.lexical_subsample = su["lexical_subsample"].get<double>();
        c.contextual_subsample = su["contextual_subsample"].get<double>();
        c.lexical_count = su["lexical_count"].get<std::size_t>();
        c.contextual_count = su["contextual_count"].get<std::size_t>();
        c.probe_corpus = p["corpus"].get<std::size_t>();
        c.probe.learning_rate = p["learning_rate"].get<double>();
        c.probe.epochs = p["epochs"].get<std::size_t>();
        c.probe.l2 = p["l2"].get<double>();
        c.probe.patience = p["patience"].get<std::size_t>();
        c.probe.validation_fraction = p["validation_fraction"].get<double>();
        c.lexical_modes = detail::modes_of(m["lexical"]);
        c.contextual_modes = detail::modes_of(m["contextual"]);
        c.contextual_analysis_mode = position_mode_from_string(m["contextual_analysis"].get<std::string>());
        c.permutation_resamples = a["permutation_resamples"].get<std::size_t>();
        c.min_contexts = a["min_contexts"].get<std::size_t>();
        c.criteria.alpha = a["alpha"].get<double>();
        c.criteria.middle_lo = a["middle_lo"].get<std::size_t>();
        c.criteria.middle_hi = a["middle_hi"].get<std::size_t>();
        c.criteria.middle_fraction = a["middle_fraction"].get<double>();
        c.criteria.convergence_max = a["convergence_max"].get<double>();
        c.criteria.max_band_share = a["max_band_share"].get<double>();
        c.workers = merged["workers"].get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("config: ") + e.what());
    }
}

inline experiment_config load_config(const std::filesystem::path& path, experiment_config base = {}) {
    merge_config(base, read_json_file(path));
    return base;
}

// Everything that can change an output. Worker count and output directory
// are left out.
inline std::string config_hash(const experiment_config& c) {
    auto j = to_json(c);
    j.erase("workers");
    j.erase("output_dir");
    return hash_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Bundle: an output directory plus manifest.json listing every file with its
// content hash and the stages that have finished.

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> s{"gen-suites", "train-probe", "sweep", "analyze", "report"};
    return s;
}

// Stages each stage reads from.
inline std::vector<std::string> stage_inputs(const std::string& stage) {
    if (stage == "sweep") return {"gen-suites", "train-probe"};
    if (stage == "analyze") return {"gen-suites", "sweep"};
    if (stage == "report") return {"gen-suites", "train-probe", "sweep", "analyze"};
    return {};
}

class bundle {
public:
    static constexpr const char* manifest_name = "manifest.json";

    // Opens `dir`, creating it and a fresh manifest when needed. A manifest
    // written under a different config is an error.
    static bundle open(const std::filesystem::path& dir, const std::string& cfg_hash) {
        bundle b;
        b.dir_ = dir;
        std::filesystem::create_directories(dir);
        if (std::filesystem::exists(dir / manifest_name)) {
            b.m_ = read_json_file(dir / manifest_name);
            const auto have = b.m_.value("config_hash", std::string());
            if (have != cfg_hash) {
                throw domain_error("bundle " + dir.string() + " was produced with config " + have + ", current config is " + cfg_hash +
                                   "; use a fresh output directory");
            }
        } else {
            b.m_ = {{"format", "sentiscope-bundle"}, {"version", 1}, {"config_hash", cfg_hash}, {"complete", false},
                    {"stages", nlohmann::json::object()}, {"files", nlohmann::json::object()}};
        }
        return b;
    }

    // Opens an existing bundle without a config; missing manifest is an error.
    static bundle open_existing(const std::filesystem::path& dir) {
        if (!std::filesystem::exists(dir / manifest_name)) throw incomplete_report_error("no bundle at " + dir.string() + " (manifest.json missing)");
        bundle b;
        b.dir_ = dir;
        b.m_ = read_json_file(dir / manifest_name);
        return b;
    }

    const std::filesystem::path& dir() const { return dir_; }
    const nlohmann::json& manifest() const { return m_; }
    std::filesystem::path path(const std::string& rel) const { return dir_ / rel; }

    bool done(const std::string& stage) const {
        return m_["stages"].contains(stage) && m_["stages"][stage].value("status", "") == "done";
    }

    // Forget a stage and everything downstream of it, including their files.
    void invalidate(const std::string& stage) {
        std::set<std::string> drop{stage};
        for (bool grew = true; grew;) {
            grew = false;
            for (const auto& s : stage_names()) {
                if (drop.contains(s)) continue;
                for (const auto& in : stage_inputs(s)) {
                    if (drop.contains(in)) {
                        drop.insert(s);
                        grew = true;
                        break;
                    }
                }
            }
        }
        for (const auto& s : drop) {
            if (!m_["stages"].contains(s)) continue;
            for (const auto& f : m_["stages"][s].value("files", nlohmann::json::array())) m_["files"].erase(f.get<std::string>());
            m_["stages"].erase(s);
        }
    }

    void record(const std::string& stage, const std::vector<std::string>& files) {
        auto list = nlohmann::json::array();
        for (const auto& f : files) {
            m_["files"][f] = hash_file_hex(path(f).string());
            list.push_back(f);
        }
        m_["stages"][stage] = {{"status", "done"}, {"files", list}};
    }

    void fail(const std::string& stage, const std::string& what) { m_["stages"][stage] = {{"status", "failed"}, {"error", what}}; }

    // Differences between the manifest and what a complete bundle needs.
    std::vector<std::string> problems(const std::vector<std::string>& stages) const {
        std::vector<std::string> out;
        for (const auto& s : stages) {
            if (!done(s)) {
                std::string why = m_["stages"].contains(s) ? m_["stages"][s].value("status", "?") : "not run";
                if (m_["stages"].contains(s) && m_["stages"][s].contains("error")) why += ": " + m_["stages"][s]["error"].get<std::string>();
                out.push_back("stage " + s + ": " + why);
            }
        }
        for (auto it = m_["files"].begin(); it != m_["files"].end(); ++it) {
            const auto p = path(it.key());
            if (!std::filesystem::exists(p)) {
                out.push_back("missing file " + it.key());
            } else if (const auto h = hash_file_hex(p.string()); h != it.value().get<std::string>()) {
                out.push_back("changed file " + it.key() + " (manifest " + it.value().get<std::string>() + ", disk " + h + ")");
            }
        }
        return out;
    }

    bool complete() const { return problems(stage_names()).empty(); }

    void save() {
        m_["complete"] = complete();
        std::ofstream out(dir_ / manifest_name, std::ios::binary);
        if (!out) throw io_error("cannot write " + (dir_ / manifest_name).string());
        out << m_.dump(2) << '\n';
    }

private:
    std::filesystem::path dir_;
    nlohmann::json m_;
};

// ---------------------------------------------------------------------------
// Stages

struct run_context {
    experiment_config cfg;
    std::ostream* log = &std::cerr;

    std::optional<lexicon> lex_;
    std::optional<template_bank> tb_;
    std::optional<tokenizer> tok_;
    std::optional<model> model_;

    const lexicon& lex() {
        if (!lex_) lex_ = load_lexicon(cfg.lexicon);
        return *lex_;
    }
    const template_bank& templates() {
        if (!tb_) tb_ = load_templates(cfg.templates);
        return *tb_;
    }
    const tokenizer& tok() {
        if (!tok_) tok_ = tokenizer::load(cfg.vocab, cfg.merges);
        return *tok_;
    }
    const model& net() {
        if (!model_) model_ = load_model(cfg.model, config_from_archive(cfg.model));
        return *model_;
    }
    void say(const std::string& s) {
        if (log) *log << "sentiscope: " << s << std::endl;
    }
};

namespace detail {

inline std::vector<std::string> stage_gen_suites(run_context& ctx, bundle& b) {
    const auto& c = ctx.cfg;
    validate_lexicon(ctx.lex(), ctx.templates());
    std::filesystem::create_directories(b.path("suites"));
    const auto lex_full = generate_lexical_suite(ctx.lex(), ctx.templates(), c.suite_seed, c.lexical_pairs);
    const auto ctx_full = generate_contextual_suite(ctx.lex(), ctx.templates(), c.suite_seed, c.contextual_pairs);
    const auto lex = subsample(lex_full, c.swept(lex_full.pairs.size(), c.lexical_subsample, c.lexical_count), c.subsample_seed);
    const auto con = subsample(ctx_full, c.swept(ctx_full.pairs.size(), c.contextual_subsample, c.contextual_count), c.subsample_seed);
    auto stored = to_json(c);
    stored.erase("output_dir");  // bundles can be moved
    std::ofstream(b.path("config.json"), std::ios::binary) << stored.dump(2) << '\n';
    write_suite(lex_full, b.path("suites/lexical_full.jsonl"));
    write_suite(ctx_full, b.path("suites/contextual_full.jsonl"));
    write_suite(lex, b.path("suites/lexical.jsonl"));
    write_suite(con, b.path("suites/contextual.jsonl"));
    ctx.say("suites: " + std::to_string(lex.pairs.size()) + " of " + std::to_string(lex_full.pairs.size()) + " lexical, " +
            std::to_string(con.pairs.size()) + " of " + std::to_string(ctx_full.pairs.size()) + " contextual pairs to sweep");
    return {"config.json", "suites/lexical_full.jsonl", "suites/contextual_full.jsonl", "suites/lexical.jsonl", "suites/contextual.jsonl"};
}

inline std::vector<std::string> stage_train_probe(run_context& ctx, bundle& b) {
    const auto& c = ctx.cfg;
    std::filesystem::create_directories(b.path("probe"));
    const auto corpus = generate_probe_corpus(ctx.lex(), ctx.templates(), c.corpus_seed, c.probe_corpus);
    write_probe_corpus(corpus, b.path("probe/corpus.jsonl"));
    const auto reps = extract_representations(ctx.net(), ctx.tok(), corpus, c.worker_count());
    const auto p = train_probe(reps, c.probe_seed, c.probe);
    save_probe(p, b.path("probe/probe.bin"));
    std::ofstream(b.path("probe/probe.json"), std::ios::binary) << probe_header(p).dump(2) << '\n';
    ctx.say("probe: validation accuracy " + detail::fmt(p.meta.validation_accuracy) + ", best epoch " + std::to_string(p.meta.best_epoch));
    return {"probe/corpus.jsonl", "probe/probe.bin", "probe/probe.json"};
}

inline std::vector<std::string> stage_sweep(run_context& ctx, bundle& b) {
    const auto& c = ctx.cfg;
    const auto p = load_probe(b.path("probe/probe.bin"));
    if (p.dim() != ctx.net().config().d_model) {
        throw shape_error("probe dimension " + std::to_string(p.dim()) + " does not match model width " + std::to_string(ctx.net().config().d_model));
    }
    std::filesystem::create_directories(b.path("effects"));
    std::vector<std::string> files;
    for (const auto& [name, modes] : {std::pair{std::string("lexical"), c.lexical_modes}, std::pair{std::string("contextual"), c.contextual_modes}}) {
        const auto suite = read_suite(b.path("suites/" + name + ".jsonl"));
        const auto t = sweep_suite(ctx.net(), p, ctx.tok(), ctx.lex().stopwords, suite, modes, c.worker_count());
        write_effects_csv(t, b.path("effects/" + name + ".csv"));
        write_effects_binary(t, b.path("effects/" + name + ".bin"));
        files.push_back("effects/" + name + ".csv");
        files.push_back("effects/" + name + ".bin");
        ctx.say("sweep: " + name + " " + std::to_string(t.records.size()) + " patched runs");
    }
    return files;
}

inline std::map<std::string, std::string> word_keys(const test_suite& s) {
    std::map<std::string, std::string> w;
    for (const auto& p : s.pairs) w[p.id] = p.word_key;
    return w;
}

inline std::map<std::string, std::string> phenomenon_names(const template_bank& tb) {
    std::map<std::string, std::string> n;
    for (const auto& [code, spec] : tb.phenomena) n[code] = spec.name;
    return n;
}

}  // namespace detail

inline analysis_options analysis_options_of(const experiment_config& c) {
    analysis_options o;
    o.permutation_resamples = c.permutation_resamples;
    o.permutation_seed = c.permutation_seed;
    o.contextual_mode = c.contextual_analysis_mode;
    o.min_contexts = c.min_contexts;
    o.criteria = c.criteria;
    return o;
}

// Metrics from a bundle's persisted effects; no forward passes.
inline metric_report analyze_bundle(run_context& ctx, const bundle& b, bool from_csv = false) {
    const auto lexical = from_csv ? read_effects_csv(b.path("effects/lexical.csv")) : read_effects_binary(b.path("effects/lexical.bin"));
    const auto contextual = from_csv ? read_effects_csv(b.path("effects/contextual.csv")) : read_effects_binary(b.path("effects/contextual.bin"));
    const auto suite = read_suite(b.path("suites/lexical.jsonl"));
    return analyze(lexical, contextual, detail::word_keys(suite), detail::phenomenon_names(ctx.templates()), analysis_options_of(ctx.cfg));
}

namespace detail {

inline std::vector<std::string> stage_analyze(run_context& ctx, bundle& b) {
    auto r = analyze_bundle(ctx, b);
    r.verdicts = evaluate_hypotheses(r);
    std::filesystem::create_directories(b.path("analysis"));
    write_metric_report(r, b.path("analysis/metrics.json"));
    for (const auto& v : r.verdicts) ctx.say(v.id + " " + (v.supported ? "SUPPORTED" : "FALSIFIED") + " (" + v.observed + ")");
    return {"analysis/metrics.json"};
}

}  // namespace detail

struct report_formats {
    bool json = true;
    bool csv = true;
    bool svg = true;
};

// Renders report/ from analysis/metrics.json. Refuses unless every earlier
// stage is done and every recorded file still matches its hash.
inline std::vector<std::string> emit_report(bundle& b, const report_formats& f = {}) {
    const std::vector<std::string> need{"gen-suites", "train-probe", "sweep", "analyze"};
    if (const auto p = b.problems(need); !p.empty()) {
        std::string m = "bundle " + b.dir().string() + " is incomplete:";
        for (const auto& x : p) m += "\n  " + x;
        throw incomplete_report_error(m);
    }
    const auto r = read_metric_report(b.path("analysis/metrics.json"));
    std::filesystem::create_directories(b.path("report"));
    std::vector<std::string> files;
    if (f.json) {
        write_metric_report(r, b.path("report/metrics.json"));
        files.push_back("report/metrics.json");
    }
    for (const auto& p : write_figures(r, b.path("report"), f.csv, f.svg)) files.push_back("report/" + p.filename().string());
    return files;
}

// Runs one stage against the bundle in cfg.output_dir. Any failure is
// recorded in the manifest and rethrown as a stage_error. Returns whether the
// bundle is complete afterwards.
inline bool run_stage(run_context& ctx, const std::string& stage, const report_formats& formats = {}) {
    ctx.cfg.validate();
    auto b = bundle::open(ctx.cfg.output_dir, config_hash(ctx.cfg));
    if (stage != "report") {
        for (const auto& in : stage_inputs(stage)) {
            if (!b.done(in)) throw stage_error(stage, "needs stage " + in + " first");
        }
    }
    b.invalidate(stage);
    ctx.say("stage " + stage);
    try {
        std::vector<std::string> files;
        if (stage == "gen-suites") files = detail::stage_gen_suites(ctx, b);
        else if (stage == "train-probe") files = detail::stage_train_probe(ctx, b);
        else if (stage == "sweep") files = detail::stage_sweep(ctx, b);
        else if (stage == "analyze") files = detail::stage_analyze(ctx, b);
        else if (stage == "report") files = emit_report(b, formats);
        else throw domain_error("unknown stage " + stage);
        b.record(stage, files);
    } catch (const std::exception& e) {
        b.fail(stage, e.what());
        b.save();
        throw stage_error(stage, e.what());
    }
    b.save();
    return b.complete();
}

// Report stage on an existing bundle, without a config.
inline bool report_bundle(const std::filesystem::path& dir, const report_formats& formats = {}) {
    auto b = bundle::open_existing(dir);
    b.invalidate("report");
    try {
        b.record("report", emit_report(b, formats));
    } catch (const std::exception& e) {
        b.fail("report", e.what());
        b.save();
        throw stage_error("report", e.what());
    }
    b.save();
    return b.complete();
}

// All stages in order.
inline bool run_experiment(run_context& ctx) {
    bool complete = false;
    for (const auto& s : stage_names()) complete = run_stage(ctx, s);
    return complete;
}

}  // namespace sentiscope
