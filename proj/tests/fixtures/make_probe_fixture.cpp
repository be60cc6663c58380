// Writes tests/data/probe_fixture.{bin,json}: a probe trained on the fixture
// model's representations of the probe corpus, one validation vector and the
// probability the probe gave it when first trained.
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "sentiscope/datagen.hpp"
#include "sentiscope/model.hpp"
#include "sentiscope/patching.hpp"
#include "sentiscope/probe.hpp"

using namespace sentiscope;

int main() {
    const std::filesystem::path fx = SENTISCOPE_FIXTURE_DIR "/tiny_gpt2.safetensors";
    const auto m = load_model(fx, config_from_archive(fx));
    const auto tok = tokenizer::load(SENTISCOPE_DATA_DIR "/gpt2/vocab.json", SENTISCOPE_DATA_DIR "/gpt2/merges.txt");
    const auto corpus = generate_probe_corpus(load_lexicon(SENTISCOPE_DATA_DIR "/lexicon.json"),
                                              load_templates(SENTISCOPE_DATA_DIR "/templates.json"), 5);
    const auto reps = extract_representations(m, tok, corpus, 1);
    const auto p = train_probe(reps, 1);
    save_probe(p, SENTISCOPE_TEST_DATA_DIR "/probe_fixture.bin");
    const auto split = make_split(reps.size(), 1, p.meta.hyper.validation_fraction);
    const auto v = reps.row(split.validation.front());
    nlohmann::json j = {{"source", reps.sources[split.validation.front()]},
                        {"vector", std::vector<float>(v.begin(), v.end())},
                        {"probability", probe_predict(p, v)}};
    std::ofstream(SENTISCOPE_TEST_DATA_DIR "/probe_fixture.json") << j.dump(1) << '\n';
    std::cout << "validation accuracy " << p.meta.validation_accuracy << ", best epoch " << p.meta.best_epoch << '\n';
}
