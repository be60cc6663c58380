#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentiscope/error.hpp"
#include "sentiscope/rng.hpp"

namespace sentiscope {

// Representations with binary labels, row-major.
struct labeled_set {
    std::size_t dim = 0;
    std::vector<float> vectors;
    std::vector<std::uint8_t> labels;  // 1 = positive
    std::vector<std::string> sources;

    std::size_t size() const { return labels.size(); }
    std::span<const float> row(std::size_t i) const { return std::span(vectors).subspan(i * dim, dim); }

    void add(std::span<const float> v, bool positive, std::string source = {}) {
        if (dim == 0) dim = v.size();
        if (v.size() != dim) throw shape_error("representation has length " + std::to_string(v.size()) + ", expected " + std::to_string(dim));
        vectors.insert(vectors.end(), v.begin(), v.end());
        labels.push_back(positive ? 1 : 0);
        sources.push_back(std::move(source));
    }

    labeled_set subset(std::span<const std::size_t> idx) const {
        labeled_set out;
        out.dim = dim;
        for (auto i : idx) out.add(row(i), labels[i] != 0, sources[i]);
        return out;
    }
};

struct probe_hyper {
    double learning_rate = 0.1;
    std::size_t epochs = 500;
    double l2 = 1e-3;
    std::size_t patience = 50;
    double validation_fraction = 0.2;
};

struct probe_metadata {
    std::uint64_t split_seed = 0;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    std::size_t n_train = 0;
    std::size_t n_validation = 0;
    probe_hyper hyper;
};

struct probe {
    std::vector<double> weights;
    double bias = 0.0;
    probe_metadata meta;

    std::size_t dim() const { return weights.size(); }
    friend bool operator==(const probe& a, const probe& b) {
        return a.weights == b.weights && a.bias == b.bias;
    }
};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double probe_logit(const probe& p, std::span<const float> v) {
    if (v.size() != p.dim()) {
        throw shape_error("probe expects vectors of length " + std::to_string(p.dim()) + ", got " + std::to_string(v.size()));
    }
    double z = p.bias;
    for (std::size_t i = 0; i < v.size(); ++i) z += p.weights[i] * static_cast<double>(v[i]);
    return z;
}

inline double probe_predict(const probe& p, std::span<const float> v) { return sigmoid(probe_logit(p, v)); }

struct probe_evaluation {
    double accuracy = 0.0;
    std::size_t true_positive = 0, true_negative = 0, false_positive = 0, false_negative = 0;
};

inline probe_evaluation evaluate_probe(const probe& p, const labeled_set& data) {
    probe_evaluation e;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const bool pred = probe_predict(p, data.row(i)) >= 0.5;
        const bool truth = data.labels[i] != 0;
        if (pred && truth) ++e.true_positive;
        else if (!pred && !truth) ++e.true_negative;
        else if (pred) ++e.false_positive;
        else ++e.false_negative;
    }
    if (data.size() > 0) e.accuracy = static_cast<double>(e.true_positive + e.true_negative) / static_cast<double>(data.size());
    return e;
}

// Mean binary cross-entropy plus (l2 / 2) * |w|^2, on double features.
// Gradients are written when the output spans are non-empty.
inline double logistic_objective(std::span<const double> w, double b, std::span<const double> x,
                                 std::span<const std::uint8_t> y, double l2, std::span<double> grad_w = {},
                                 double* grad_b = nullptr) {
    const std::size_t d = w.size();
    const std::size_t n = y.size();
    if (x.size() != n * d) throw shape_error("feature matrix does not match weights and labels");
    double loss = 0.0;
    if (!grad_w.empty()) std::fill(grad_w.begin(), grad_w.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data() + i * d;
        double z = b;
        for (std::size_t k = 0; k < d; ++k) z += w[k] * xi[k];
        // log(1 + e^z) - y z, computed stably
        const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        loss += softplus - (y[i] ? z : 0.0);
        const double r = sigmoid(z) - (y[i] ? 1.0 : 0.0);
        if (!grad_w.empty()) {
            for (std::size_t k = 0; k < d; ++k) grad_w[k] += r * xi[k];
        }
        gb += r;
    }
    const double inv = 1.0 / static_cast<double>(n);
    loss *= inv;
    double reg = 0.0;
    for (double v : w) reg += v * v;
    loss += 0.5 * l2 * reg;
    if (!grad_w.empty()) {
        for (std::size_t k = 0; k < d; ++k) grad_w[k] = grad_w[k] * inv + l2 * w[k];
    }
    if (grad_b) *grad_b = gb * inv;
    return loss;
}

struct split_indices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

inline split_indices make_split(std::size_t n, std::uint64_t seed, double validation_fraction) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng gen(seed);
    gen.shuffle(std::span(idx));
    const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
    split_indices s;
    s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

inline constexpr std::size_t min_probe_examples = 200;

// Full-batch gradient descent on standardized features. The standardization
// is folded back so the stored probe applies to raw vectors.
inline probe train_probe(const labeled_set& data, std::uint64_t split_seed, const probe_hyper& hyper = {}) {
    const std::size_t n = data.size();
    const std::size_t d = data.dim;
    std::size_t positives = 0;
    for (auto l : data.labels) positives += l;
    if (positives == 0 || positives == n) throw training_error("probe data has a single class");
    if (n < min_probe_examples) throw training_error("probe needs at least 200 examples, got " + std::to_string(n));
    const double share = static_cast<double>(positives) / static_cast<double>(n);
    if (share < 0.25 || share > 0.75) throw training_error("probe classes are unbalanced (positive share " + std::to_string(share) + ")");
    for (float f : data.vectors) {
        if (!std::isfinite(f)) throw training_error("probe data has non-finite values");
    }

    const auto split = make_split(n, split_seed, hyper.validation_fraction);
    auto features = [&](const std::vector<std::size_t>& idx, std::vector<double>& x, std::vector<std::uint8_t>& y) {
        x.resize(idx.size() * d);
        y.resize(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto row = data.row(idx[r]);
            for (std::size_t k = 0; k < d; ++k) x[r * d + k] = row[k];
            y[r] = data.labels[idx[r]];
        }
    };
    std::vector<double> xt, xv;
    std::vector<std::uint8_t> yt, yv;
    features(split.train, xt, yt);
    features(split.validation, xv, yv);

    std::vector<double> mean(d, 0.0), scale(d, 0.0);
    for (std::size_t r = 0; r < yt.size(); ++r) {
        for (std::size_t k = 0; k < d; ++k) mean[k] += xt[r * d + k];
    }
    for (auto& m : mean) m /= static_cast<double>(yt.size());
    for (std::size_t r = 0; r < yt.size(); ++r) {
        for (std::size_t k = 0; k < d; ++k) scale[k] += (xt[r * d + k] - mean[k]) * (xt[r * d + k] - mean[k]);
    }
    for (auto& s : scale) {
        s = std::sqrt(s / static_cast<double>(yt.size()));
        if (s < 1e-12) s = 1.0;
    }
    auto standardize = [&](std::vector<double>& x) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean[i % d]) / scale[i % d];
    };
    standardize(xt);
    standardize(xv);

    std::vector<double> w(d, 0.0), gw(d);
    double b = 0.0, gb = 0.0;
    std::vector<double> best_w = w;
    double best_b = b;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0, since_best = 0, rising = 0, epoch = 0;
    double prev_loss = std::numeric_limits<double>::infinity();

    for (epoch = 1; epoch <= hyper.epochs; ++epoch) {
        const double loss = logistic_objective(w, b, xt, yt, hyper.l2, gw, &gb);
        if (!std::isfinite(loss)) throw divergence_error("probe training loss became non-finite at epoch " + std::to_string(epoch));
        rising = loss > prev_loss ? rising + 1 : 0;
        if (rising >= 10) throw divergence_error("probe training loss increased for 10 consecutive epochs (epoch " + std::to_string(epoch) + ")");
        prev_loss = loss;
        for (std::size_t k = 0; k < d; ++k) w[k] -= hyper.learning_rate * gw[k];
        b -= hyper.learning_rate * gb;

        const double val = yv.empty() ? loss : logistic_objective(w, b, xv, yv, 0.0);
        if (val < best_val) {
            best_val = val;
            best_w = w;
            best_b = b;
            best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= hyper.patience) {
            break;
        }
    }

    probe p;
    p.weights.resize(d);
    p.bias = best_b;
    for (std::size_t k = 0; k < d; ++k) {
        p.weights[k] = best_w[k] / scale[k];
        p.bias -= best_w[k] * mean[k] / scale[k];
    }
    p.meta.split_seed = split_seed;
    p.meta.epochs_run = std::min(epoch, hyper.epochs);
    p.meta.best_epoch = best_epoch;
    p.meta.hyper = hyper;
    p.meta.n_train = split.train.size();
    p.meta.n_validation = split.validation.size();
    p.meta.train_accuracy = evaluate_probe(p, data.subset(split.train)).accuracy;
    p.meta.validation_accuracy = split.validation.empty() ? 0.0 : evaluate_probe(p, data.subset(split.validation)).accuracy;
    return p;
}

// ---------------------------------------------------------------------------
// Serialization (see docs/formats.md):
//   8 bytes  magic "SSPROBE\0"
//   u32 LE   format version (1)
//   u32 LE   header length H
//   H bytes  JSON header: dim, metadata
//   f64 LE   dim weights, then bias

inline constexpr std::uint32_t probe_format_version = 1;

namespace detail {
template <typename T>
void put_le(std::ostream& out, T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw parse_error("probe file truncated");
    return v;
}
}  // namespace detail

inline nlohmann::json probe_header(const probe& p) {
    const auto& m = p.meta;
    return {{"dim", p.dim()},
            {"split_seed", m.split_seed},
            {"epochs_run", m.epochs_run},
            {"best_epoch", m.best_epoch},
            {"train_accuracy", m.train_accuracy},
            {"validation_accuracy", m.validation_accuracy},
            {"n_train", m.n_train},
            {"n_validation", m.n_validation},
            {"learning_rate", m.hyper.learning_rate},
            {"epochs", m.hyper.epochs},
            {"l2", m.hyper.l2},
            {"patience", m.hyper.patience},
            {"validation_fraction", m.hyper.validation_fraction}};
}

inline void save_probe(const probe& p, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    const std::string header = probe_header(p).dump();
    out.write("SSPROBE", 8);
    detail::put_le<std::uint32_t>(out, probe_format_version);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (double w : p.weights) detail::put_le(out, w);
    detail::put_le(out, p.bias);
    if (!out) throw io_error("write failed for " + path.string());
}

inline probe load_probe(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "SSPROBE", 8) != 0) throw parse_error(path.string() + " is not a probe file");
    const auto version = detail::get_le<std::uint32_t>(in);
    if (version != probe_format_version) throw parse_error("unsupported probe format version " + std::to_string(version));
    const auto hlen = detail::get_le<std::uint32_t>(in);
    std::string header(hlen, '\0');
    in.read(header.data(), hlen);
    if (!in) throw parse_error("probe file truncated");
    probe p;
    try {
        const auto j = nlohmann::json::parse(header);
        p.weights.resize(j.at("dim").get<std::size_t>());
        auto& m = p.meta;
        m.split_seed = j.at("split_seed").get<std::uint64_t>();
        m.epochs_run = j.at("epochs_run").get<std::size_t>();
        m.best_epoch = j.at("best_epoch").get<std::size_t>();
        m.train_accuracy = j.at("train_accuracy").get<double>();
        m.validation_accuracy = j.at("validation_accuracy").get<double>();
        m.n_train = j.at("n_train").get<std::size_t>();
        m.n_validation = j.at("n_validation").get<std::size_t>();
        m.hyper.learning_rate = j.at("learning_rate").get<double>();
        m.hyper.epochs = j.at("epochs").get<std::size_t>();
        m.hyper.l2 = j.at("l2").get<double>();
        m.hyper.patience = j.at("patience").get<std::size_t>();
        m.hyper.validation_fraction = j.at("validation_fraction").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("probe header: ") + e.what());
    }
    for (auto& w : p.weights) w = detail::get_le<double>(in);
    p.bias = detail::get_le<double>(in);
    for (double w : p.weights) {
        if (!std::isfinite(w)) throw integrity_error("probe has non-finite weights");
    }
    return p;
}

}  // namespace sentiscope
