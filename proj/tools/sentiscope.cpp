// Command line front end: one subcommand per pipeline stage plus `all`.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sentiscope/runner.hpp"

using namespace sentiscope;

namespace {

struct overrides {
    std::string config;
    std::optional<std::string> model, out;
    std::optional<std::size_t> workers, lexical_count, contextual_count, probe_corpus, resamples;
    std::optional<double> lexical_subsample, contextual_subsample;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> contextual_mode;

    void add_to(CLI::App* app) {
        app->add_option("-c,--config", config, "JSON experiment config")->check(CLI::ExistingFile);
        app->add_option("-m,--model", model, "tensor archive with the model weights");
        app->add_option("-o,--out", out, "bundle directory");
        app->add_option("-j,--workers", workers, "worker threads (0 = all cores)");
        app->add_option("--seed", seed, "seed for suites, subsampling, probe corpus, probe split and permutations");
        app->add_option("--lexical-subsample", lexical_subsample, "share of the lexical suite to sweep");
        app->add_option("--contextual-subsample", contextual_subsample, "share of the contextual suite to sweep");
        app->add_option("--lexical-count", lexical_count, "lexical pairs to sweep (overrides the share)");
        app->add_option("--contextual-count", contextual_count, "contextual pairs to sweep (overrides the share)");
        app->add_option("--probe-corpus", probe_corpus, "probe training sentences");
        app->add_option("--permutation-resamples", resamples, "sign-flip resamples");
        app->add_option("--contextual-mode", contextual_mode, "position mode for contextual metrics (target-words or all)");
    }

    experiment_config resolve() const {
        experiment_config c;
        c.vocab = SENTISCOPE_DATA_DIR "/gpt2/vocab.json";
        c.merges = SENTISCOPE_DATA_DIR "/gpt2/merges.txt";
        c.lexicon = SENTISCOPE_DATA_DIR "/lexicon.json";
        c.templates = SENTISCOPE_DATA_DIR "/templates.json";
        if (!config.empty()) c = load_config(config, c);
        if (model) c.model = *model;
        if (out) c.output_dir = *out;
        if (workers) c.workers = *workers;
        if (seed) c.suite_seed = c.subsample_seed = c.corpus_seed = c.probe_seed = c.permutation_seed = *seed;
        if (lexical_subsample) c.lexical_subsample = *lexical_subsample;
        if (contextual_subsample) c.contextual_subsample = *contextual_subsample;
        if (lexical_count) c.lexical_count = *lexical_count;
        if (contextual_count) c.contextual_count = *contextual_count;
        if (probe_corpus) c.probe_corpus = *probe_corpus;
        if (resamples) c.permutation_resamples = *resamples;
        if (contextual_mode) c.contextual_analysis_mode = position_mode_from_string(*contextual_mode);
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Activation patching harness for sentiment processing in GPT-2"};
    app.require_subcommand(1);

    overrides ov;
    std::vector<std::string> formats;
    std::string bundle_dir;
    bool dump_config = false;

    std::vector<std::pair<std::string, CLI::App*>> stages;
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"gen-suites", "generate the lexical and contextual test suites"},
             {"train-probe", "build the probe corpus and train the sentiment probe"},
             {"sweep", "patch every pair at every layer and store the effects"},
             {"analyze", "compute metrics and hypothesis verdicts from stored effects"},
             {"all", "run every stage and write the report"}}) {
        auto* sub = app.add_subcommand(name, help);
        ov.add_to(sub);
        stages.emplace_back(name, sub);
    }
    stages.back().second->add_flag("--print-config", dump_config, "print the resolved config and exit");

    auto* report = app.add_subcommand("report", "render tables and figures from a finished bundle");
    report->add_option("bundle", bundle_dir, "bundle directory")->required();
    report->add_option("-f,--format", formats, "json, csv, svg (default: all three)")->check(CLI::IsMember({"json", "csv", "svg"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) {
            report_formats f;
            if (!formats.empty()) {
                f = {false, false, false};
                for (const auto& x : formats) {
                    if (x == "json") f.json = true;
                    if (x == "csv") f.csv = true;
                    if (x == "svg") f.svg = true;
                }
            }
            const bool complete = report_bundle(bundle_dir, f);
            std::cerr << "sentiscope: bundle " << (complete ? "complete" : "incomplete") << '\n';
            return complete ? EXIT_SUCCESS : EXIT_FAILURE;
        }
        for (const auto& [name, sub] : stages) {
            if (!sub->parsed()) continue;
            run_context ctx{ov.resolve()};
            if (dump_config) {
                std::cout << to_json(ctx.cfg).dump(2) << '\n';
                return EXIT_SUCCESS;
            }
            if (name == "all") {
                const bool complete = run_experiment(ctx);
                std::cerr << "sentiscope: bundle " << ctx.cfg.output_dir << (complete ? " complete" : " incomplete") << '\n';
                return complete ? EXIT_SUCCESS : EXIT_FAILURE;
            }
            run_stage(ctx, name);
            return EXIT_SUCCESS;
        }
    } catch (const std::exception& e) {
        std::cerr << "sentiscope: error: " << e.what() << '\n';
        return EXIT_FAILURE;
    }
    return EXIT_FAILURE;
}
