#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "biax/nn.hpp"

namespace biax {

struct RowEncoderConfig {
    std::size_t dim = 32;
    std::size_t n_cls = 4;
    std::size_t groups = 4;
    std::size_t blocks = 3;
    std::size_t heads = 4;
    std::size_t ff_mult = 2;
};

/// Half-open index range.
struct Range {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    friend bool operator==(const Range&, const Range&) = default;
};

/// [B, n, m', D] -> [B*n, m', D]
inline Tensor reshape_rows(const Tensor& E) {
    if (E.rank() != 4) throw ShapeError("reshape_rows: expected [B, n, m', D]");
    return reshape(E, {E.dim(0) * E.dim(1), E.dim(2), E.dim(3)});
}

/// [B*n, m', D] -> [B, n, m', D]
inline Tensor unreshape_rows(const Tensor& X, std::size_t batch) {
    if (X.rank() != 3 || batch == 0 || X.dim(0) % batch != 0) throw ShapeError("unreshape_rows: bad batch split");
    return reshape(X, {batch, X.dim(0) / batch, X.dim(1), X.dim(2)});
}

/// G contiguous groups over [0, m'); the first G-1 have floor(m'/G) entries and
/// the last absorbs the remainder.
inline std::vector<Range> grouped_partition(std::size_t m_prime, std::size_t groups) {
    if (groups < 1 || groups > m_prime) {
        throw ConfigError("grouped_partition: need 1 <= G <= m' (G=" + std::to_string(groups) +
                          ", m'=" + std::to_string(m_prime) + ")");
    }
    const std::size_t size = m_prime / groups;
    std::vector<Range> out;
    for (std::size_t g = 0; g < groups; ++g) {
        out.push_back({g * size, g + 1 == groups ? m_prime : (g + 1) * size});
    }
    return out;
}

/// Two contiguous halves split at ceil(m'/2); nullopt when m' < 2.
inline std::optional<std::pair<Range, Range>> hierarchical_partition(std::size_t m_prime) {
    if (m_prime < 2) return std::nullopt;
    const std::size_t cut = (m_prime + 1) / 2;
    return std::make_pair(Range{0, cut}, Range{cut, m_prime});
}

/// Feature positions a sequence may attend over: [offset, offset + count).
struct FeatureSpan {
    std::size_t offset = 0;
    std::size_t count = 0;
};

/// One biaxial block: standard, grouped, hierarchical and relational feature
/// attention (pre-norm, residual), then CLS-token attention over the result.
struct BiAxialBlock {
    LayerNorm ln_std, ln_group, ln_hier, ln_rel, ln_cls_q, ln_cls_kv, ln_ff;
    MultiHeadAttention attn_std, attn_group, attn_hier, attn_rel, attn_cls;
    FeedForward ff;
    Tensor cls_tokens;  // [n_cls, D]; only the first block of a stack carries them

    BiAxialBlock() = default;
    BiAxialBlock(const RowEncoderConfig& cfg, bool with_cls_tokens, Rng& rng) {
        const std::size_t D = cfg.dim;
        ln_std = LayerNorm(D);
        ln_group = LayerNorm(D);
        ln_hier = LayerNorm(D);
        ln_rel = LayerNorm(D);
        ln_cls_q = LayerNorm(D);
        ln_cls_kv = LayerNorm(D);
        ln_ff = LayerNorm(D);
        attn_std = MultiHeadAttention(D, cfg.heads, rng);
        attn_group = MultiHeadAttention(D, cfg.heads, rng);
        attn_hier = MultiHeadAttention(D, cfg.heads, rng);
        attn_rel = MultiHeadAttention(D, cfg.heads, rng);
        attn_cls = MultiHeadAttention(D, cfg.heads, rng);
        ff = FeedForward(D, cfg.ff_mult * D, rng);
        if (with_cls_tokens) cls_tokens = uniform_parameter({cfg.n_cls, D}, 1.0f / std::sqrt(float(D)), rng);
    }

    void zero_output_projections() {
        for (auto* a : {&attn_std, &attn_group, &attn_hier, &attn_rel, &attn_cls}) a->o.zero();
        ff.down.zero();
    }

    void collect(NamedParameters& out, const std::string& prefix) const {
        ln_std.collect(out, prefix + "ln_std.");
        ln_group.collect(out, prefix + "ln_group.");
        ln_hier.collect(out, prefix + "ln_hier.");
        ln_rel.collect(out, prefix + "ln_rel.");
        ln_cls_q.collect(out, prefix + "ln_cls_q.");
        ln_cls_kv.collect(out, prefix + "ln_cls_kv.");
        ln_ff.collect(out, prefix + "ln_ff.");
        attn_std.collect(out, prefix + "attn_std.");
        attn_group.collect(out, prefix + "attn_group.");
        attn_hier.collect(out, prefix + "attn_hier.");
        attn_rel.collect(out, prefix + "attn_rel.");
        attn_cls.collect(out, prefix + "attn_cls.");
        ff.collect(out, prefix + "ff.");
        if (cls_tokens.defined()) out.emplace_back(prefix + "cls_tokens", cls_tokens);
    }
};

namespace detail {

// Sequences sharing a span share masks; build once per distinct span.
struct PassMasks {
    AttentionMask mask;
    std::vector<float> update;  // [S * L] row-update factors
};

template <class Visible, class Updates>
PassMasks build_pass(std::size_t S, std::size_t Lq, std::size_t Lk, const std::vector<FeatureSpan>& spans,
                     Visible visible, Updates updates) {
    PassMasks pm{AttentionMask(S, Lq, Lk, false), std::vector<float>(S * Lq, 0.0f)};
    for (std::size_t s = 0; s < S; ++s) {
        const FeatureSpan& sp = spans[s];
        for (std::size_t t = 0; t < Lq; ++t) {
            bool any = false;
            for (std::size_t k = 0; k < Lk; ++k)
                if (visible(sp, t, k)) {
                    pm.mask.allow(s, t, k);
                    any = true;
                }
            pm.update[s * Lq + t] = (any && updates(sp, t)) ? 1.0f : 0.0f;
        }
    }
    return pm;
}

inline bool in_span(const FeatureSpan& sp, std::size_t i) { return i >= sp.offset && i < sp.offset + sp.count; }

inline std::size_t group_of(const FeatureSpan& sp, std::size_t groups, std::size_t i) {
    const std::size_t g = std::min(groups, sp.count);
    const std::size_t local = i - sp.offset;
    const std::size_t size = sp.count / g;
    return std::min(local / size, g - 1);
}

}  // namespace detail

/// Applies one biaxial block to X0 [S, m', D] with CLS_in [S, n_cls, D].
///
/// Each sequence attends only within its span. Groups and halves are laid out
/// over that span; with fewer than G positions each position is its own group.
/// Sequences with fewer than two positions skip the hierarchical pass, which is
/// recorded in `warnings`.
inline std::pair<Tensor, Tensor> biaxial_block(const Tensor& X0, const BiAxialBlock& blk, std::size_t groups,
                                               const Tensor& cls_in, const std::vector<FeatureSpan>& spans,
                                               WarningLog* warnings = nullptr) {
    if (X0.rank() != 3 || cls_in.rank() != 3 || cls_in.dim(0) != X0.dim(0) || cls_in.dim(2) != X0.dim(2)) {
        throw ShapeError("biaxial_block: X0 " + shape_str(X0.shape()) + " vs CLS " + shape_str(cls_in.shape()));
    }
    const std::size_t S = X0.dim(0), L = X0.dim(1), C = cls_in.dim(1);
    if (spans.size() != S) throw ShapeError("biaxial_block: one feature span per sequence required");
    if (groups < 1) throw ConfigError("biaxial_block: need G >= 1");
    for (const auto& sp : spans)
        if (sp.offset + sp.count > L) throw ShapeError("biaxial_block: feature span exceeds sequence");
    using detail::in_span;

    auto residual = [](const Tensor& x, const Tensor& upd, const std::vector<float>& factors) {
        return add(x, scale_rows(upd, factors));
    };

    // Standard: full attention over the span.
    auto std_pass = detail::build_pass(
        S, L, L, spans, [](const FeatureSpan& sp, std::size_t t, std::size_t k) { return in_span(sp, t) && in_span(sp, k); },
        [](const FeatureSpan&, std::size_t) { return true; });
    Tensor h = blk.ln_std(X0);
    Tensor X1 = residual(X0, blk.attn_std(h, h, &std_pass.mask), std_pass.update);

    // Grouped: attention within contiguous groups of the span.
    auto grp_pass = detail::build_pass(
        S, L, L, spans,
        [groups](const FeatureSpan& sp, std::size_t t, std::size_t k) {
            return in_span(sp, t) && in_span(sp, k) &&
                   detail::group_of(sp, groups, t) == detail::group_of(sp, groups, k);
        },
        [](const FeatureSpan&, std::size_t) { return true; });
    h = blk.ln_group(X1);
    Tensor X2 = residual(X1, blk.attn_group(h, h, &grp_pass.mask), grp_pass.update);

    // Hierarchical: first half queries second half, then second half queries the updated first half.
    bool skipped = false;
    for (const auto& sp : spans) skipped = skipped || sp.count < 2;
    if (skipped) warn(warnings, "biaxial_block: hierarchical pass skipped for sequences with fewer than 2 features");
    auto half = [](const FeatureSpan& sp, std::size_t i) -> int {
        if (sp.count < 2 || !in_span(sp, i)) return -1;
        return (i - sp.offset) < (sp.count + 1) / 2 ? 0 : 1;
    };
    auto hierA = detail::build_pass(
        S, L, L, spans, [&](const FeatureSpan& sp, std::size_t t, std::size_t k) { return half(sp, t) == 0 && half(sp, k) == 1; },
        [](const FeatureSpan&, std::size_t) { return true; });
    h = blk.ln_hier(X2);
    Tensor X2a = residual(X2, blk.attn_hier(h, h, &hierA.mask), hierA.update);
    auto hierB = detail::build_pass(
        S, L, L, spans, [&](const FeatureSpan& sp, std::size_t t, std::size_t k) { return half(sp, t) == 1 && half(sp, k) == 0; },
        [](const FeatureSpan&, std::size_t) { return true; });
    h = blk.ln_hier(X2a);
    Tensor X2b = residual(X2a, blk.attn_hier(h, h, &hierB.mask), hierB.update);

    // Relational: second full attention over the structured features.
    h = blk.ln_rel(X2b);
    Tensor X3 = residual(X2b, blk.attn_rel(h, h, &std_pass.mask), std_pass.update);

    // CLS tokens query the span of X3.
    auto cls_pass = detail::build_pass(
        S, C, L, spans, [](const FeatureSpan& sp, std::size_t, std::size_t k) { return in_span(sp, k); },
        [](const FeatureSpan&, std::size_t) { return true; });
    Tensor cls = residual(cls_in, blk.attn_cls(blk.ln_cls_q(cls_in), blk.ln_cls_kv(X3), &cls_pass.mask), cls_pass.update);
    Tensor cls_out = add(cls, blk.ff(blk.ln_ff(cls)));
    return {X3, cls_out};
}

/// Every position of every sequence is a feature.
inline std::pair<Tensor, Tensor> biaxial_block(const Tensor& X0, const BiAxialBlock& blk, std::size_t groups,
                                               const Tensor& cls_in, WarningLog* warnings = nullptr) {
    std::vector<FeatureSpan> spans(X0.dim(0), FeatureSpan{0, X0.dim(1)});
    return biaxial_block(X0, blk, groups, cls_in, spans, warnings);
}

/// Stack of biaxial blocks producing multi-CLS row representations.
class RowEncoder {
public:
    RowEncoder() = default;
    RowEncoder(const RowEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.blocks < 1) throw ConfigError("row encoder needs at least one block");
        for (std::size_t i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg, i == 0, rng);
    }

    const RowEncoderConfig& config() const { return cfg_; }
    std::vector<BiAxialBlock>& blocks() { return blocks_; }
    const std::vector<BiAxialBlock>& blocks() const { return blocks_; }

    /// E: [B, n, m', D] with m' = m + n_cls; d: active features per task.
    /// Returns R: [B, n, n_cls * D].
    Tensor operator()(const Tensor& E, const std::vector<std::size_t>& d, WarningLog* warnings = nullptr) const {
        if (E.rank() != 4 || E.dim(3) != cfg_.dim || E.dim(2) < cfg_.n_cls) {
            throw ShapeError("encode_rows: E " + shape_str(E.shape()) + " does not match the encoder config");
        }
        const std::size_t B = E.dim(0), n = E.dim(1), D = cfg_.dim;
        if (d.size() != B) throw ShapeError("encode_rows: one feature count per task required");
        std::vector<FeatureSpan> spans;
        spans.reserve(B * n);
        for (std::size_t b = 0; b < B; ++b) {
            if (cfg_.n_cls + d[b] > E.dim(2)) throw ShapeError("encode_rows: feature count exceeds m");
            for (std::size_t t = 0; t < n; ++t) spans.push_back({cfg_.n_cls, d[b]});
        }
        Tensor X = reshape_rows(E);
        Tensor cls = broadcast_leading(blocks_.front().cls_tokens, B * n);
        for (const auto& blk : blocks_) std::tie(X, cls) = biaxial_block(X, blk, cfg_.groups, cls, spans, warnings);
        return reshape(cls, {B, n, cfg_.n_cls * D});
    }

    void collect(NamedParameters& out, const std::string& prefix) const {
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + "block" + std::to_string(i) + ".");
    }

private:
    RowEncoderConfig cfg_;
    std::vector<BiAxialBlock> blocks_;
};

}  // namespace biax
