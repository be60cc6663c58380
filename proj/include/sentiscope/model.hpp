#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentiscope/error.hpp"
#include "sentiscope/rng.hpp"
#include "sentiscope/tensor_archive.hpp"
#include "sentiscope/tokenizer.hpp"

namespace sentiscope {

enum class gelu_kind { tanh_approx, exact_erf };

struct model_config {
    std::size_t n_layers = 12;
    std::size_t d_model = 768;
    std::size_t n_heads = 12;
    std::size_t d_head = 64;
    std::size_t d_mlp = 3072;
    std::size_t vocab = 50257;
    std::size_t max_context = 1024;
    float layernorm_epsilon = 1e-5f;
    gelu_kind gelu = gelu_kind::tanh_approx;

    static model_config gpt2_small() { return {}; }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab == 0 || max_context == 0) {
            throw domain_error("model config has a zero dimension");
        }
        if (d_model != n_heads * d_head) {
            throw domain_error("d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                               std::to_string(n_heads * d_head) + ")");
        }
        if (d_mlp != 4 * d_model) {
            throw domain_error("d_mlp (" + std::to_string(d_mlp) + ") != 4 * d_model");
        }
        if (!(layernorm_epsilon > 0.0f)) throw domain_error("layernorm epsilon must be positive");
    }

    friend bool operator==(const model_config&, const model_config&) = default;
};

inline void to_json(nlohmann::json& j, const model_config& c) {
    j = {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
         {"d_head", c.d_head},     {"d_mlp", c.d_mlp},     {"vocab", c.vocab},
         {"max_context", c.max_context}, {"layernorm_epsilon", c.layernorm_epsilon},
         {"gelu", c.gelu == gelu_kind::tanh_approx ? "tanh" : "erf"}};
}

inline void from_json(const nlohmann::json& j, model_config& c) {
    c = model_config{};
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.d_mlp = j.value("d_mlp", c.d_mlp);
    c.vocab = j.value("vocab", c.vocab);
    c.max_context = j.value("max_context", c.max_context);
    c.layernorm_epsilon = j.value("layernorm_epsilon", c.layernorm_epsilon);
    const auto g = j.value("gelu", std::string("tanh"));
    if (g == "tanh") {
        c.gelu = gelu_kind::tanh_approx;
    } else if (g == "erf") {
        c.gelu = gelu_kind::exact_erf;
    } else {
        throw parse_error("unknown gelu kind '" + g + "'");
    }
}

// Linear weights are row-major [out, in]: y = W x + b.
struct layer_weights {
    std::vector<float> ln1_w, ln1_b;
    std::vector<float> q_w, q_b, k_w, k_b, v_w, v_b;
    std::vector<float> o_w, o_b;
    std::vector<float> ln2_w, ln2_b;
    std::vector<float> mlp_in_w, mlp_in_b;
    std::vector<float> mlp_out_w, mlp_out_b;
};

struct model_weights {
    std::vector<float> wte;  // [vocab, d_model], also the unembedding
    std::vector<float> wpe;  // [max_context, d_model]
    std::vector<layer_weights> layers;
    std::vector<float> lnf_w, lnf_b;
};

// Every tensor in the archive, with its shape and where it lives in
// model_weights. The single source of truth for names and shapes.
struct tensor_slot {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> model_weights::*top = nullptr;
    std::size_t layer = 0;
    std::vector<float> layer_weights::*member = nullptr;

    std::vector<float>& in(model_weights& w) const { return top ? w.*top : w.layers[layer].*member; }
    const std::vector<float>& in(const model_weights& w) const { return top ? w.*top : w.layers[layer].*member; }
};

inline std::vector<tensor_slot> tensor_layout(const model_config& c) {
    const std::size_t d = c.d_model;
    std::vector<tensor_slot> out;
    out.push_back({"wte", {c.vocab, d}, &model_weights::wte});
    out.push_back({"wpe", {c.max_context, d}, &model_weights::wpe});
    struct member_shape {
        const char* suffix;
        std::vector<std::size_t> shape;
        std::vector<float> layer_weights::*member;
    };
    const std::vector<member_shape> per_layer = {
        {"ln1.weight", {d}, &layer_weights::ln1_w},
        {"ln1.bias", {d}, &layer_weights::ln1_b},
        {"attn.q.weight", {d, d}, &layer_weights::q_w},
        {"attn.q.bias", {d}, &layer_weights::q_b},
        {"attn.k.weight", {d, d}, &layer_weights::k_w},
        {"attn.k.bias", {d}, &layer_weights::k_b},
        {"attn.v.weight", {d, d}, &layer_weights::v_w},
        {"attn.v.bias", {d}, &layer_weights::v_b},
        {"attn.o.weight", {d, d}, &layer_weights::o_w},
        {"attn.o.bias", {d}, &layer_weights::o_b},
        {"ln2.weight", {d}, &layer_weights::ln2_w},
        {"ln2.bias", {d}, &layer_weights::ln2_b},
        {"mlp.in.weight", {c.d_mlp, d}, &layer_weights::mlp_in_w},
        {"mlp.in.bias", {c.d_mlp}, &layer_weights::mlp_in_b},
        {"mlp.out.weight", {d, c.d_mlp}, &layer_weights::mlp_out_w},
        {"mlp.out.bias", {d}, &layer_weights::mlp_out_b},
    };
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (const auto& m : per_layer) {
            out.push_back({"blocks." + std::to_string(l) + "." + m.suffix, m.shape, nullptr, l, m.member});
        }
    }
    out.push_back({"ln_f.weight", {d}, &model_weights::lnf_w});
    out.push_back({"ln_f.bias", {d}, &model_weights::lnf_b});
    return out;
}

// Residual stream captured by one forward pass. resid(k) is the stream after
// k blocks: k = 0 is token + positional embedding, k = n_layers feeds the
// final layernorm. A patch at layer L acts on resid(L + 1), the output of
// block L.
struct residual_cache {
    std::size_t n_layers = 0;
    std::size_t seq_len = 0;
    std::size_t d_model = 0;
    std::vector<token_id> ids;
    std::vector<float> resid_data;      // (n_layers + 1) * seq_len * d_model
    std::vector<float> final_post_ln;   // seq_len * d_model
    std::vector<float> attn_out_data;   // n_layers * seq_len * d_model, optional
    std::vector<float> mlp_out_data;    // n_layers * seq_len * d_model, optional

    std::span<float> resid(std::size_t k) {
        return std::span(resid_data).subspan(k * seq_len * d_model, seq_len * d_model);
    }
    std::span<const float> resid(std::size_t k) const {
        return std::span(resid_data).subspan(k * seq_len * d_model, seq_len * d_model);
    }
    std::span<const float> resid_at(std::size_t k, std::size_t pos) const {
        return resid(k).subspan(pos * d_model, d_model);
    }
    std::span<const float> block_output(std::size_t layer) const { return resid(layer + 1); }
    std::span<const float> attn_out(std::size_t layer) const {
        return std::span(attn_out_data).subspan(layer * seq_len * d_model, seq_len * d_model);
    }
    std::span<const float> mlp_out(std::size_t layer) const {
        return std::span(mlp_out_data).subspan(layer * seq_len * d_model, seq_len * d_model);
    }
    bool has_components() const { return !attn_out_data.empty(); }
};

struct forward_result {
    std::vector<float> logits;  // seq_len * vocab, empty when not requested
    residual_cache cache;
};

struct forward_options {
    bool compute_logits = true;
    bool capture_components = false;
};

// Called with the output of block `layer` (the stream about to be consumed by
// block layer + 1, or by the final layernorm) so it can be edited in place.
using block_hook = std::function<void(std::size_t layer, std::span<float> stream, std::size_t seq_len)>;

namespace kernels {

// Dot product with eight interleaved accumulators and a fixed reduction
// order. Results are independent of call site, which the exact patching
// identities rely on.
inline float dot(const float* a, const float* b, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
    }
    for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

// out[t, o] = bias[o] + W[o, :] . x[t, :]
inline void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
                   std::span<const float> bias, std::size_t out_dim, std::span<float> out) {
    for (std::size_t o = 0; o < out_dim; ++o) {
        const float* wr = w.data() + o * in;
        const float b = bias.empty() ? 0.0f : bias[o];
        for (std::size_t t = 0; t < rows; ++t) {
            out[t * out_dim + o] = b + dot(wr, x.data() + t * in, in);
        }
    }
}

inline void layer_norm(std::span<const float> x, std::size_t rows, std::size_t d, std::span<const float> scale,
                       std::span<const float> shift, float eps, std::span<float> out) {
    for (std::size_t t = 0; t < rows; ++t) {
        const float* xr = x.data() + t * d;
        float* yr = out.data() + t * d;
        float mean = 0.0f;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t i = 0; i < d; ++i) {
            const float c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        const float inv = 1.0f / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * inv * scale[i] + shift[i];
    }
}

inline float gelu(float x, gelu_kind kind) {
    if (kind == gelu_kind::exact_erf) return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
    constexpr float k = 0.79788456080286536f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

}  // namespace kernels

class model {
public:
    model(model_config config, model_weights weights) : config_(config), w_(std::move(weights)) {
        config_.validate();
        check_shapes();
    }

    const model_config& config() const { return config_; }
    const model_weights& weights() const { return w_; }

    forward_result forward(std::span<const token_id> ids, const forward_options& opts = {},
                           const block_hook& hook = {}) const {
        check_input(ids);
        forward_result r;
        residual_cache& c = r.cache;
        init_cache(c, ids, opts);
        embed(ids, c.resid(0));
        run_blocks(c, 0, opts, hook);
        finish(r, opts);
        return r;
    }

    // Re-runs blocks first_layer.. on a cache whose resid(first_layer) is
    // already correct. Entries before that are kept as they are.
    forward_result resume(residual_cache cache, std::size_t first_layer, const forward_options& opts = {},
                          const block_hook& hook = {}) const {
        if (first_layer > config_.n_layers) throw domain_error("resume layer out of range");
        forward_result r;
        r.cache = std::move(cache);
        if (opts.capture_components && !r.cache.has_components()) {
            r.cache.attn_out_data.assign(config_.n_layers * r.cache.seq_len * config_.d_model, 0.0f);
            r.cache.mlp_out_data.assign(config_.n_layers * r.cache.seq_len * config_.d_model, 0.0f);
        }
        run_blocks(r.cache, first_layer, opts, hook);
        finish(r, opts);
        return r;
    }

    // logits[pos, :] for the final post-layernorm rows of a cache.
    std::vector<float> unembed(std::span<const float> final_rows, std::size_t rows) const {
        std::vector<float> logits(rows * config_.vocab);
        kernels::linear(final_rows, rows, config_.d_model, w_.wte, {}, config_.vocab, logits);
        return logits;
    }

private:
    void check_input(std::span<const token_id> ids) const {
        if (ids.empty()) throw length_error("forward needs at least one token");
        if (ids.size() > config_.max_context) {
            throw length_error("input has " + std::to_string(ids.size()) + " tokens, max_context is " +
                               std::to_string(config_.max_context));
        }
        for (token_id id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
                throw domain_error("token id " + std::to_string(id) + " outside the model vocabulary");
            }
        }
    }

    void check_shapes() const {
        for (const auto& slot : tensor_layout(config_)) {
            const auto& v = slot.in(w_);
            std::size_t n = 1;
            for (auto s : slot.shape) n *= s;
            if (v.size() != n) {
                throw shape_error("tensor '" + slot.name + "' expected shape " + shape_string(slot.shape) + " (" +
                                  std::to_string(n) + " values), got " + std::to_string(v.size()) + " values");
            }
            for (float f : v) {
                if (!std::isfinite(f)) throw integrity_error("tensor '" + slot.name + "' has non-finite values");
            }
        }
    }

    void init_cache(residual_cache& c, std::span<const token_id> ids, const forward_options& opts) const {
        c.n_layers = config_.n_layers;
        c.seq_len = ids.size();
        c.d_model = config_.d_model;
        c.ids.assign(ids.begin(), ids.end());
        c.resid_data.assign((config_.n_layers + 1) * c.seq_len * c.d_model, 0.0f);
        if (opts.capture_components) {
            c.attn_out_data.assign(config_.n_layers * c.seq_len * c.d_model, 0.0f);
            c.mlp_out_data.assign(config_.n_layers * c.seq_len * c.d_model, 0.0f);
        }
    }

    void embed(std::span<const token_id> ids, std::span<float> out) const {
        const std::size_t d = config_.d_model;
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const float* te = w_.wte.data() + static_cast<std::size_t>(ids[t]) * d;
            const float* pe = w_.wpe.data() + t * d;
            for (std::size_t i = 0; i < d; ++i) out[t * d + i] = te[i] + pe[i];
        }
    }

    void run_blocks(residual_cache& c, std::size_t first_layer, const forward_options& opts,
                    const block_hook& hook) const {
        const std::size_t T = c.seq_len;
        const std::size_t d = config_.d_model;
        std::vector<float> attn(T * d), mlp(T * d);
        for (std::size_t l = first_layer; l < config_.n_layers; ++l) {
            auto in = c.resid(l);
            auto out = c.resid(l + 1);
            attention_block(w_.layers[l], in, T, attn);
            for (std::size_t i = 0; i < T * d; ++i) out[i] = in[i] + attn[i];
            mlp_block(w_.layers[l], out, T, mlp);
            for (std::size_t i = 0; i < T * d; ++i) out[i] += mlp[i];
            if (opts.capture_components) {
                std::copy(attn.begin(), attn.end(), c.attn_out_data.begin() + static_cast<std::ptrdiff_t>(l * T * d));
                std::copy(mlp.begin(), mlp.end(), c.mlp_out_data.begin() + static_cast<std::ptrdiff_t>(l * T * d));
            }
            if (hook) hook(l, out, T);
        }
    }

    void finish(forward_result& r, const forward_options& opts) const {
        residual_cache& c = r.cache;
        c.final_post_ln.assign(c.seq_len * config_.d_model, 0.0f);
        kernels::layer_norm(c.resid(config_.n_layers), c.seq_len, config_.d_model, w_.lnf_w, w_.lnf_b,
                            config_.layernorm_epsilon, c.final_post_ln);
        if (opts.compute_logits) r.logits = unembed(c.final_post_ln, c.seq_len);
    }

    void attention_block(const layer_weights& lw, std::span<const float> x, std::size_t T,
                         std::span<float> out) const {
        const std::size_t d = config_.d_model;
        const std::size_t H = config_.n_heads;
        const std::size_t dh = config_.d_head;
        std::vector<float> h(T * d), q(T * d), k(T * d), v(T * d), mixed(T * d), scores(T);
        kernels::layer_norm(x, T, d, lw.ln1_w, lw.ln1_b, config_.layernorm_epsilon, h);
        kernels::linear(h, T, d, lw.q_w, lw.q_b, d, q);
        kernels::linear(h, T, d, lw.k_w, lw.k_b, d, k);
        kernels::linear(h, T, d, lw.v_w, lw.v_b, d, v);
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        for (std::size_t head = 0; head < H; ++head) {
            const std::size_t off = head * dh;
            for (std::size_t t = 0; t < T; ++t) {
                // Causal: query t sees keys 0..t only.
                float max_score = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = kernels::dot(q.data() + t * d + off, k.data() + s * d + off, dh) * scale;
                    max_score = std::max(max_score, scores[s]);
                }
                float denom = 0.0f;
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = std::exp(scores[s] - max_score);
                    denom += scores[s];
                }
                float* dst = mixed.data() + t * d + off;
                std::fill(dst, dst + dh, 0.0f);
                for (std::size_t s = 0; s <= t; ++s) {
                    const float p = scores[s] / denom;
                    const float* vs = v.data() + s * d + off;
                    for (std::size_t i = 0; i < dh; ++i) dst[i] += p * vs[i];
                }
            }
        }
        kernels::linear(mixed, T, d, lw.o_w, lw.o_b, d, out);
    }

    void mlp_block(const layer_weights& lw, std::span<const float> x, std::size_t T, std::span<float> out) const {
        const std::size_t d = config_.d_model;
        const std::size_t m = config_.d_mlp;
        std::vector<float> h(T * d), hidden(T * m);
        kernels::layer_norm(x, T, d, lw.ln2_w, lw.ln2_b, config_.layernorm_epsilon, h);
        kernels::linear(h, T, d, lw.mlp_in_w, lw.mlp_in_b, m, hidden);
        for (float& f : hidden) f = kernels::gelu(f, config_.gelu);
        kernels::linear(hidden, T, m, lw.mlp_out_w, lw.mlp_out_b, d, out);
    }

    model_config config_;
    model_weights w_;
};

// Position `position` of the final post-layernorm stream, the probe input.
inline std::span<const float> final_representation(const residual_cache& cache, std::size_t position) {
    if (position >= cache.seq_len) {
        throw domain_error("position " + std::to_string(position) + " outside sequence of length " +
                           std::to_string(cache.seq_len));
    }
    return std::span(cache.final_post_ln).subspan(position * cache.d_model, cache.d_model);
}

inline model_weights weights_from_archive(tensor_archive archive, const model_config& config) {
    config.validate();
    model_weights w;
    w.layers.resize(config.n_layers);
    for (const auto& slot : tensor_layout(config)) {
        if (!archive.contains(slot.name)) throw missing_tensor_error("archive is missing tensor '" + slot.name + "'");
        tensor t = archive.take(slot.name);
        if (t.shape != slot.shape) {
            throw shape_error("tensor '" + slot.name + "' expected shape " + shape_string(slot.shape) + ", got " +
                              shape_string(t.shape));
        }
        slot.in(w) = std::move(t.data);
    }
    return w;
}

inline tensor_archive archive_from_weights(const model_weights& w, const model_config& config) {
    tensor_archive archive;
    for (const auto& slot : tensor_layout(config)) archive.put(slot.name, tensor{slot.shape, slot.in(w)});
    archive.set_metadata("sentiscope.config", nlohmann::json(config).dump());
    return archive;
}

inline model load_model(const std::filesystem::path& archive_path, const model_config& config) {
    return model(config, weights_from_archive(tensor_archive::read(archive_path), config));
}

// Reads the config stored in an archive's metadata, falling back to GPT-2 117M.
inline model_config config_from_archive(const std::filesystem::path& archive_path) {
    const auto archive = tensor_archive::read(archive_path);
    auto it = archive.metadata().find("sentiscope.config");
    if (it == archive.metadata().end()) return model_config::gpt2_small();
    return nlohmann::json::parse(it->second).get<model_config>();
}

inline void save_model(const model& m, const std::filesystem::path& path) {
    archive_from_weights(m.weights(), m.config()).write(path);
}

// Random GPT-2-style weights for tests and fixtures: N(0, 0.02) projections,
// unit layernorm scales, small biases.
inline model_weights random_weights(const model_config& config, std::uint64_t seed) {
    config.validate();
    rng gen(seed);
    model_weights w;
    w.layers.resize(config.n_layers);
    for (const auto& slot : tensor_layout(config)) {
        std::size_t n = 1;
        for (auto s : slot.shape) n *= s;
        auto& v = slot.in(w);
        v.resize(n);
        const bool is_scale = slot.name.ends_with("ln1.weight") || slot.name.ends_with("ln2.weight") ||
                              slot.name == "ln_f.weight";
        const bool is_bias = slot.name.ends_with(".bias");
        for (auto& f : v) {
            const double z = gen.normal();
            if (is_scale) {
                f = static_cast<float>(1.0 + 0.1 * z);
            } else if (is_bias) {
                f = static_cast<float>(0.01 * z);
            } else {
                f = static_cast<float>(0.02 * z);
            }
        }
    }
    return w;
}

}  // namespace sentiscope
