#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "sentiscope/datagen.hpp"
#include "sentiscope/model.hpp"
#include "sentiscope/patching.hpp"
#include "sentiscope/probe.hpp"

using namespace sentiscope;

namespace {

// Two Gaussian blobs pushed apart along a random unit direction u: the
// coordinate along u is sign * (margin / 2 + |noise|), so the classes are
// separated by a gap of `margin` sigma by construction.
labeled_set blobs(std::size_t n, std::size_t d, std::uint64_t seed, double margin = 5.0) {
    rng gen(seed);
    std::vector<double> u(d);
    double norm = 0;
    for (auto& v : u) {
        v = gen.normal();
        norm += v * v;
    }
    for (auto& v : u) v /= std::sqrt(norm);
    labeled_set s;
    std::vector<double> g(d);
    std::vector<float> row(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double sign = i % 2 == 0 ? 1.0 : -1.0;
        double along = 0;
        for (std::size_t k = 0; k < d; ++k) {
            g[k] = gen.normal();
            along += g[k] * u[k];
        }
        const double pushed = sign * (margin / 2 + std::abs(along));
        for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(g[k] + (pushed - along) * u[k] + 3.0);
        s.add(row, sign > 0);
    }
    return s;
}

const labeled_set& fixture_reps() {
    static const labeled_set reps = [] {
        const std::filesystem::path fx = SENTISCOPE_FIXTURE_DIR "/tiny_gpt2.safetensors";
        const auto m = load_model(fx, config_from_archive(fx));
        const auto tok = tokenizer::load(SENTISCOPE_DATA_DIR "/gpt2/vocab.json", SENTISCOPE_DATA_DIR "/gpt2/merges.txt");
        const auto corpus = generate_probe_corpus(load_lexicon(SENTISCOPE_DATA_DIR "/lexicon.json"),
                                                  load_templates(SENTISCOPE_DATA_DIR "/templates.json"), 5);
        return extract_representations(m, tok, corpus, 2);
    }();
    return reps;
}

}  // namespace

TEST(ProbePredict, ZeroVectorZeroBiasIsOneHalf) {
    probe p;
    p.weights.assign(8, 0.25);
    std::vector<float> zero(8, 0.0f);
    EXPECT_EQ(probe_predict(p, zero), 0.5);
}

TEST(ProbePredict, MonotoneAlongTheWeights) {
    probe p;
    p.weights = {0.5, -1.0, 2.0};
    p.bias = -0.3;
    double prev = -1;
    for (int k = -10; k <= 10; ++k) {
        std::vector<float> v;
        for (double w : p.weights) v.push_back(static_cast<float>(k * 0.3 * w));
        const double prob = probe_predict(p, v);
        EXPECT_GE(prob, 0.0);
        EXPECT_LE(prob, 1.0);
        EXPECT_GT(prob, prev);
        prev = prob;
    }
}

TEST(ProbePredict, DimensionMismatchThrows) {
    probe p;
    p.weights.assign(4, 1.0);
    std::vector<float> v(5, 0.0f);
    EXPECT_THROW(probe_predict(p, v), shape_error);
}

TEST(ProbeGradient, MatchesCentralDifferences) {
    rng gen(17);
    for (int inst = 0; inst < 50; ++inst) {
        const std::size_t n = 5 + gen.uniform_index(20), d = 1 + gen.uniform_index(8);
        std::vector<double> x(n * d), w(d);
        std::vector<std::uint8_t> y(n);
        for (auto& v : x) v = gen.normal() * 2;
        for (auto& v : w) v = gen.normal();
        for (auto& v : y) v = static_cast<std::uint8_t>(gen.uniform_index(2));
        const double b = gen.normal(), l2 = 0.01 * gen.uniform01();
        std::vector<double> gw(d);
        double gb = 0;
        logistic_objective(w, b, x, y, l2, gw, &gb);
        const double h = 1e-5;
        auto rel = [](double a, double e) { return std::abs(a - e) / std::max(1e-8, std::max(std::abs(a), std::abs(e))); };
        for (std::size_t k = 0; k < d; ++k) {
            auto wp = w, wm = w;
            wp[k] += h;
            wm[k] -= h;
            const double fd = (logistic_objective(wp, b, x, y, l2) - logistic_objective(wm, b, x, y, l2)) / (2 * h);
            EXPECT_LT(rel(gw[k], fd), 1e-4) << "instance " << inst << " weight " << k;
        }
        const double fdb = (logistic_objective(w, b + h, x, y, l2) - logistic_objective(w, b - h, x, y, l2)) / (2 * h);
        EXPECT_LT(rel(gb, fdb), 1e-4) << "instance " << inst << " bias";
    }
}

TEST(ProbeTrain, SeparableBlobsReachFullValidationAccuracy) {
    const auto data = blobs(400, 16, 3);
    const auto p = train_probe(data, 11);
    EXPECT_EQ(p.meta.validation_accuracy, 1.0);
    EXPECT_EQ(evaluate_probe(p, data).accuracy, 1.0);
    EXPECT_EQ(p.meta.n_train + p.meta.n_validation, 400u);
    for (double w : p.weights) EXPECT_TRUE(std::isfinite(w));
}

TEST(ProbeTrain, DeterministicGivenSeed) {
    const auto data = blobs(300, 8, 4, 1.0);
    EXPECT_EQ(train_probe(data, 2), train_probe(data, 2));
    EXPECT_NE(train_probe(data, 2).weights, train_probe(data, 3).weights);
}

TEST(ProbeTrain, HeldOutEvaluationMatchesMetadata) {
    const auto data = blobs(300, 8, 5, 1.5);
    const auto p = train_probe(data, 9);
    const auto split = make_split(data.size(), 9, 0.2);
    EXPECT_EQ(evaluate_probe(p, data.subset(split.validation)).accuracy, p.meta.validation_accuracy);
}

TEST(ProbeTrain, RejectsDegenerateData) {
    auto one_class = blobs(300, 4, 6);
    for (auto& l : one_class.labels) l = 1;
    EXPECT_THROW(train_probe(one_class, 1), training_error);
    EXPECT_THROW(train_probe(blobs(100, 4, 6), 1), training_error);
    auto skewed = blobs(400, 4, 6);
    for (std::size_t i = 0; i < 350; ++i) skewed.labels[i] = 1;
    EXPECT_THROW(train_probe(skewed, 1), training_error);
}

TEST(ProbeTrain, RunawayStepSizeIsADivergenceError) {
    probe_hyper h;
    h.learning_rate = 5000;  // lr * l2 > 2: the weight-decay term alone explodes
    EXPECT_THROW(train_probe(blobs(300, 4, 7, 0.5), 1, h), divergence_error);
}

TEST(ProbeEvaluate, AlwaysNegativeProbeOnPositiveData) {
    labeled_set s;
    for (int i = 0; i < 10; ++i) s.add(std::vector<float>{1.0f, 2.0f}, true);
    probe p;
    p.weights = {0.0, 0.0};
    p.bias = -5;
    const auto e = evaluate_probe(p, s);
    EXPECT_EQ(e.accuracy, 0.0);
    EXPECT_EQ(e.false_negative, 10u);
}

TEST(ProbeFile, RoundTripIsExact) {
    const auto p = train_probe(blobs(300, 8, 8), 1);
    const auto path = std::filesystem::temp_directory_path() / "sentiscope_probe.bin";
    save_probe(p, path);
    const auto q = load_probe(path);
    EXPECT_EQ(q, p);
    EXPECT_EQ(q.meta.validation_accuracy, p.meta.validation_accuracy);
    EXPECT_EQ(q.meta.best_epoch, p.meta.best_epoch);
    std::filesystem::remove(path);
}

TEST(ProbeFile, RegressionFixtureReproducesStoredProbability) {
    const auto p = load_probe(SENTISCOPE_TEST_DATA_DIR "/probe_fixture.bin");
    std::ifstream in(SENTISCOPE_TEST_DATA_DIR "/probe_fixture.json");
    const auto j = nlohmann::json::parse(in);
    const auto v = j.at("vector").get<std::vector<float>>();
    EXPECT_EQ(probe_predict(p, v), j.at("probability").get<double>());
}

TEST(ProbeFixtureModel, ShuffledLabelsGiveChanceAccuracy) {
    auto data = fixture_reps();
    rng gen(99);
    gen.shuffle(std::span(data.labels));
    const auto p = train_probe(data, 1);
    EXPECT_NEAR(p.meta.validation_accuracy, 0.5, 0.05);
}

TEST(ProbeFixtureModel, RealLabelsBeatChance) {
    const auto p = train_probe(fixture_reps(), 1);
    EXPECT_GT(p.meta.validation_accuracy, 0.6);
}
