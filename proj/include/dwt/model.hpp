#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dwt/corpus.hpp"
#include "dwt/error.hpp"
#include "dwt/graph.hpp"
#include "dwt/ops.hpp"
#include "dwt/prob.hpp"
#include "dwt/rng.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

struct ModelConfig {
    std::size_t layers = 6;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::size_t vocab = 64;
    std::size_t max_positions = 64;
    bool tie_mlm_head = true;

    std::size_t head_dim() const { return hidden / heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (c.layers == 0) fail("layers must be positive");
    if (c.hidden == 0 || c.heads == 0) fail("hidden and heads must be positive");
    if (c.hidden % c.heads != 0) {
        fail("hidden " + std::to_string(c.hidden) + " not divisible by heads " + std::to_string(c.heads));
    }
    if (c.ffn == 0) fail("ffn must be positive");
    if (c.vocab == 0) fail("vocab must be positive");
    if (c.max_positions == 0) fail("max_positions must be positive");
}

// Ordered name -> tensor map holding one model's parameters.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

inline std::string layer_prefix(std::size_t i) { return "layer." + std::to_string(i) + "."; }

// Canonical (name, shape) list implied by a config. Linear weights are stored
// [in × out] so a layer computes x·W + b.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
    validate(c);
    const std::size_t d = c.hidden;
    std::vector<std::pair<std::string, Shape>> out = {
        {"emb.tok", {c.vocab, d}},
        {"emb.pos", {c.max_positions, d}},
        {"emb.ln.g", {d}},
        {"emb.ln.b", {d}},
    };
    for (std::size_t i = 0; i < c.layers; ++i) {
        const std::string p = layer_prefix(i);
        for (const char* m : {"q", "k", "v", "o"}) {
            out.push_back({p + "attn." + m + ".w", {d, d}});
            out.push_back({p + "attn." + m + ".b", {d}});
        }
        out.push_back({p + "ln1.g", {d}});
        out.push_back({p + "ln1.b", {d}});
        out.push_back({p + "ffn.w1", {d, c.ffn}});
        out.push_back({p + "ffn.b1", {c.ffn}});
        out.push_back({p + "ffn.w2", {c.ffn, d}});
        out.push_back({p + "ffn.b2", {d}});
        out.push_back({p + "ln2.g", {d}});
        out.push_back({p + "ln2.b", {d}});
    }
    out.push_back({"head.transform.w", {d, d}});
    out.push_back({"head.transform.b", {d}});
    out.push_back({"head.ln.g", {d}});
    out.push_back({"head.ln.b", {d}});
    if (!c.tie_mlm_head) out.push_back({"head.decoder.w", {d, c.vocab}});
    out.push_back({"head.bias", {c.vocab}});
    return out;
}

// Exact parameter count; a tied head reuses emb.tok and adds nothing.
inline std::uint64_t num_params(const ModelConfig& c) {
    std::uint64_t n = 0;
    for (const auto& [name, shape] : param_shapes(c)) n += numel(shape);
    return n;
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline bool is_gain(const std::string& n) { return ends_with(n, ".g"); }

inline bool is_bias(const std::string& n) {
    return ends_with(n, ".b") || ends_with(n, ".b1") || ends_with(n, ".b2") || n == "head.bias";
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

inline constexpr double kInitStd = 0.02;

// Weights ~ N(0, 0.02), biases 0, LayerNorm gains 1. Each tensor draws from
// its own stream keyed by (seed, name).
template <typename T>
ParamSet<T> init_random(const ModelConfig& c, std::uint64_t seed) {
    ParamSet<T> out;
    for (auto& [name, shape] : param_shapes(c)) {
        Tensor<T> t(shape);
        if (detail::is_gain(name)) {
            for (T& v : t.values()) v = T(1);
        } else if (!detail::is_bias(name)) {
            Rng rng(derive_seed(seed, {detail::fnv1a(name)}));
            std::normal_distribution<double> normal(0.0, kInitStd);
            for (T& v : t.values()) v = static_cast<T>(normal(rng));
        }
        out.emplace(name, std::move(t));
    }
    return out;
}

// Checks that a ParamSet has exactly the names and shapes a config implies.
template <typename T>
void check_params(const ParamSet<T>& params, const ModelConfig& c) {
    const auto shapes = param_shapes(c);
    if (shapes.size() != params.size()) {
        throw ConfigError("parameter set has " + std::to_string(params.size()) + " tensors, config implies " +
                          std::to_string(shapes.size()));
    }
    for (const auto& [name, shape] : shapes) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("parameter set is missing " + name);
        if (it->second.shape() != shape) {
            throw ConfigError("parameter " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                              shape_str(shape));
        }
    }
}

template <typename T>
using BoundParams = std::map<std::string, Var<T>>;

// Places every parameter into the graph as a leaf.
template <typename T>
BoundParams<T> bind_params(Graph<T>& graph, const ParamSet<T>& params, bool requires_grad) {
    BoundParams<T> out;
    for (const auto& [name, t] : params) out.emplace(name, graph.leaf(t, requires_grad));
    return out;
}

template <typename T>
ParamSet<T> named_gradients(const BoundParams<T>& bound, const GradientMap<T>& grads) {
    ParamSet<T> out;
    for (const auto& [name, v] : bound) {
        auto it = grads.find(v.id);
        if (it != grads.end()) out.emplace(name, it->second);
    }
    return out;
}

namespace detail {

template <typename T>
Var<T> param(const BoundParams<T>& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw ConfigError("missing parameter " + name);
    return it->second;
}

template <typename T>
Var<T> self_attention(const BoundParams<T>& p, const std::string& pre, Var<T> x, std::size_t batch,
                      std::size_t seq, const ModelConfig& c) {
    const std::size_t h = c.heads, dh = c.head_dim();
    auto heads = [&](const char* m) {
        Var<T> y = linear(x, param(p, pre + "attn." + m + ".w"), param(p, pre + "attn." + m + ".b"));
        y = swap_axes12(reshape(y, Shape{batch, seq, h, dh}));
        return reshape(y, Shape{batch * h, seq, dh});
    };
    Var<T> q = heads("q");
    Var<T> k = heads("k");
    Var<T> v = heads("v");
    Var<T> scores = scale(bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Var<T> probs = softmax_temperature(scores, 1.0);
    Var<T> ctx = reshape(bmm(probs, v), Shape{batch, h, seq, dh});
    ctx = reshape(swap_axes12(ctx), Shape{batch * seq, c.hidden});
    return linear(ctx, param(p, pre + "attn.o.w"), param(p, pre + "attn.o.b"));
}

}  // namespace detail

// Final hidden states [batch·seq × hidden] of the post-LN encoder.
template <typename T>
Var<T> encode([[maybe_unused]] Graph<T>& graph, const BoundParams<T>& p, const ModelConfig& c, std::span<const Token> ids,
              std::size_t batch, std::size_t seq) {
    using detail::param;
    validate(c);
    if (seq > c.max_positions) {
        throw ConfigError("sequence length " + std::to_string(seq) + " exceeds max_positions " +
                          std::to_string(c.max_positions));
    }
    if (ids.size() != batch * seq) throw DimensionError("encode: id count does not match batch × seq");
    std::vector<std::size_t> pos(batch * seq);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % seq;
    Var<T> x = add(embedding_lookup(param(p, "emb.tok"), ids), embedding_lookup(param(p, "emb.pos"), pos));
    x = layer_norm(x, param(p, "emb.ln.g"), param(p, "emb.ln.b"));
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string pre = layer_prefix(l);
        Var<T> a = detail::self_attention(p, pre, x, batch, seq, c);
        x = layer_norm(add(x, a), param(p, pre + "ln1.g"), param(p, pre + "ln1.b"));
        Var<T> f = gelu(linear(x, param(p, pre + "ffn.w1"), param(p, pre + "ffn.b1")));
        f = linear(f, param(p, pre + "ffn.w2"), param(p, pre + "ffn.b2"));
        x = layer_norm(add(x, f), param(p, pre + "ln2.g"), param(p, pre + "ln2.b"));
    }
    return x;
}

// MLM logits [#masked × vocab], evaluated at the batch's masked positions only.
template <typename T>
Var<T> forward_mlm(Graph<T>& graph, const BoundParams<T>& p, const ModelConfig& c, const MlmBatch& batch) {
    using detail::param;
    Var<T> x = encode(graph, p, c, std::span<const Token>(batch.input_ids), batch.batch, batch.seq_len);
    Var<T> m = embedding_lookup(x, batch.flat_masked_indices());
    m = gelu(linear(m, param(p, "head.transform.w"), param(p, "head.transform.b")));
    m = layer_norm(m, param(p, "head.ln.g"), param(p, "head.ln.b"));
    Var<T> proj = c.tie_mlm_head ? transpose(param(p, "emb.tok")) : param(p, "head.decoder.w");
    return linear(m, proj, param(p, "head.bias"));
}

// Convenience overload: binds params as constants and returns the logits.
template <typename T>
Var<T> forward_mlm(const ParamSet<T>& params, const ModelConfig& c, const MlmBatch& batch, Graph<T>& graph,
                   bool requires_grad = false) {
    BoundParams<T> bound = bind_params(graph, params, requires_grad);
    return forward_mlm(graph, bound, c, batch);
}

// Inference-only logits as a plain tensor.
template <typename T>
Tensor<T> mlm_logits(const ParamSet<T>& params, const ModelConfig& c, const MlmBatch& batch) {
    Graph<T> g;
    return forward_mlm(params, c, batch, g).value();
}

}  // namespace dwt
