#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "biax/attention.hpp"

namespace biax {

/// Ordered (name, tensor) list of trainable parameters.
using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

using Rng = std::mt19937_64;

inline Tensor uniform_parameter(Shape shape, float bound, Rng& rng) {
    std::uniform_real_distribution<float> dist(-bound, bound);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

struct Linear {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const float bound = 1.0f / std::sqrt(static_cast<float>(in));
        weight = uniform_parameter({out, in}, bound, rng);
        bias = uniform_parameter({out}, bound, rng);
    }

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

    void collect(NamedParameters& out, const std::string& prefix) const {
        out.emplace_back(prefix + "weight", weight);
        out.emplace_back(prefix + "bias", bias);
    }

    void zero() {
        for (auto& v : weight.mutable_values()) v = 0.0f;
        for (auto& v : bias.mutable_values()) v = 0.0f;
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim)
        : gamma(Tensor::full({dim}, 1.0f, true)), beta(Tensor::zeros({dim}, true)) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

    void collect(NamedParameters& out, const std::string& prefix) const {
        out.emplace_back(prefix + "gamma", gamma);
        out.emplace_back(prefix + "beta", beta);
    }
};

/// Projected multi-head attention. Queries come from `x`, keys and values from `context`.
struct MultiHeadAttention {
    Linear q, k, v, o;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t n_heads, Rng& rng)
        : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(n_heads) {
        if (n_heads == 0 || dim % n_heads != 0) throw ConfigError("attention width not divisible by heads");
    }

    Tensor operator()(const Tensor& x, const Tensor& context, const AttentionMask* mask,
                      EmptyRows empty = EmptyRows::zero) const {
        return o(masked_softmax_attention(q(x), k(context), v(context), mask, heads, empty));
    }

    void collect(NamedParameters& out, const std::string& prefix) const {
        q.collect(out, prefix + "q.");
        k.collect(out, prefix + "k.");
        v.collect(out, prefix + "v.");
        o.collect(out, prefix + "o.");
    }
};

struct FeedForward {
    Linear up, down;

    FeedForward() = default;
    FeedForward(std::size_t dim, std::size_t hidden, Rng& rng) : up(dim, hidden, rng), down(hidden, dim, rng) {}

    Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }

    void collect(NamedParameters& out, const std::string& prefix) const {
        up.collect(out, prefix + "up.");
        down.collect(out, prefix + "down.");
    }
};

}  // namespace biax
