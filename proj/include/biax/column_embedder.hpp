#pragma once

#include <string>
#include <utility>
#include <vector>

#include "biax/nn.hpp"
#include "biax/table_batch.hpp"

namespace biax {

enum class SetAttention { linear, induced };

struct ColumnEmbedderConfig {
    std::size_t dim = 32;
    std::size_t n_cls = 4;
    SetAttention attention = SetAttention::induced;
    std::size_t inducing_points = 16;
    std::size_t blocks = 2;
    std::size_t heads = 4;
    bool attend_support_only = true;
};

/// Prepends n_cls skip-valued slots to the feature axis: [B, n, m] -> [B, n, m + n_cls].
inline Tensor reserve_cls_slots(const Tensor& x, std::size_t n_cls, float skip_value = kSkipValue) {
    if (x.rank() != 3) throw ShapeError("reserve_cls_slots: expected [B, n, m]");
    if (n_cls < 1) throw ContractError("reserve_cls_slots: need at least one reserved slot");
    const std::size_t B = x.dim(0), n = x.dim(1), m = x.dim(2), mp = m + n_cls;
    std::vector<float> out(B * n * mp, skip_value);
    auto xv = x.values();
    for (std::size_t r = 0; r < B * n; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * mp + n_cls + j] = xv[r * m + j];
    return Tensor({B, n, mp}, std::move(out));
}

/// Per-channel affine lift of scalar cells, skipping sentinel cells.
///
/// x: [B, n, m'] -> [B, m', n, D] (columns outermost). Cells equal to
/// skip_value come out as skip_value in every channel and take no gradient.
template <class T>
BasicTensor<T> skippable_linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                                T skip_value = T(kSkipValue)) {
    if (x.rank() != 3) throw ShapeError("skippable_linear: expected [B, n, m']");
    if (w.rank() != 1 || b.shape() != w.shape()) throw ShapeError("skippable_linear: w and b must be [D]");
    const std::size_t B = x.dim(0), n = x.dim(1), m = x.dim(2), D = w.dim(0);
    auto xv = x.values();
    auto wv = w.values();
    auto bv = b.values();
    std::vector<T> out(B * m * n * D);
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t t = 0; t < n; ++t) {
                const T v = xv[(bb * n + t) * m + j];
                T* o = out.data() + ((bb * m + j) * n + t) * D;
                for (std::size_t c = 0; c < D; ++c) o[c] = v == skip_value ? skip_value : v * wv[c] + bv[c];
            }
    std::vector<T> src(xv.begin(), xv.end());
    return make_result<T>(Shape{B, m, n, D}, std::move(out), {w, b},
                          [B, n, m, D, skip_value, src = std::move(src)](TensorNode<T>& self) {
        T* gw = detail::grad_ptr(self, 0);
        T* gb = detail::grad_ptr(self, 1);
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t t = 0; t < n; ++t) {
                    const T v = src[(bb * n + t) * m + j];
                    if (v == skip_value) continue;
                    const T* g = self.grad.data() + ((bb * m + j) * n + t) * D;
                    for (std::size_t c = 0; c < D; ++c) {
                        if (gw) gw[c] += g[c] * v;
                        if (gb) gb[c] += g[c];
                    }
                }
    });
}

/// e[b,t,h,:] = x[b,t,h] * W[b,t,h,:] + bias[b,t,h,:]; skip cells contribute bias only.
inline Tensor embed_cells(const Tensor& x, const Tensor& W, const Tensor& bias, float skip_value = kSkipValue) {
    if (W.rank() != 4 || W.shape() != bias.shape() || x.rank() != 3 || x.dim(0) != W.dim(0) ||
        x.dim(1) != W.dim(1) || x.dim(2) != W.dim(2)) {
        throw ShapeError("embed_cells: x " + shape_str(x.shape()) + " vs W " + shape_str(W.shape()));
    }
    std::vector<float> s(x.values().begin(), x.values().end());
    for (auto& v : s)
        if (v == skip_value) v = 0.0f;
    return scale_rows_add(std::move(s), W, bias);
}

/// One set-attention block applied along the row axis of every column.
struct SetBlock {
    SetAttention kind = SetAttention::induced;
    Tensor inducing;  // [p, D] for induced blocks
    LayerNorm ln_src, ln_ind, ln_hidden, ln_hidden_ff, ln_out;
    MultiHeadAttention to_inducing, from_inducing, self_attn;
    FeedForward ff_hidden, ff_out;

    SetBlock() = default;
    SetBlock(const ColumnEmbedderConfig& cfg, Rng& rng) : kind(cfg.attention) {
        const std::size_t D = cfg.dim;
        ln_src = LayerNorm(D);
        ln_out = LayerNorm(D);
        ff_out = FeedForward(D, 2 * D, rng);
        if (kind == SetAttention::induced) {
            if (cfg.inducing_points < 1) throw ConfigError("induced set attention needs at least one inducing point");
            inducing = uniform_parameter({cfg.inducing_points, D}, 1.0f, rng);
            ln_ind = LayerNorm(D);
            ln_hidden = LayerNorm(D);
            ln_hidden_ff = LayerNorm(D);
            to_inducing = MultiHeadAttention(D, cfg.heads, rng);
            from_inducing = MultiHeadAttention(D, cfg.heads, rng);
            ff_hidden = FeedForward(D, 2 * D, rng);
        } else {
            self_attn = MultiHeadAttention(D, cfg.heads, rng);
        }
    }

    /// src: [S, n, D]; key_valid: [S * n] flags of rows usable as keys.
    Tensor operator()(const Tensor& src, const std::vector<char>& key_valid) const {
        const std::size_t S = src.dim(0), n = src.dim(1);
        const Tensor src_n = ln_src(src);
        Tensor out;
        if (kind == SetAttention::induced) {
            Tensor hidden = induce(src_n, key_valid);
            hidden = add(hidden, ff_hidden(ln_hidden_ff(hidden)));
            out = add(src, from_inducing(src_n, ln_hidden(hidden), nullptr));
        } else {
            std::vector<float> kw(key_valid.begin(), key_valid.end());
            const auto& a = self_attn;
            const Tensor att = linear_attention(a.q(src_n), a.k(src_n), a.v(src_n), FeatureMap::elu_plus_one,
                                                a.heads, &kw, EmptyRows::zero);
            out = add(src, a.o(att));
        }
        return add(out, ff_out(ln_out(out)));
    }

    /// Inducing points attend to the (normalized) column values: I + MHA(LN(I), src_n).
    Tensor induce(const Tensor& src_n, const std::vector<char>& key_valid) const {
        const std::size_t S = src_n.dim(0), n = src_n.dim(1), p = inducing.dim(0);
        AttentionMask mask(S, p, n, false);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t t = 0; t < n; ++t)
                if (key_valid[s * n + t])
                    for (std::size_t i = 0; i < p; ++i) mask.allow(s, i, t);
        const Tensor ind = broadcast_leading(inducing, S);
        return add(ind, to_inducing(ln_ind(ind), src_n, &mask));
    }

    void collect(NamedParameters& out, const std::string& prefix) const {
        ln_src.collect(out, prefix + "ln_src.");
        ln_out.collect(out, prefix + "ln_out.");
        ff_out.collect(out, prefix + "ff_out.");
        if (kind == SetAttention::induced) {
            out.emplace_back(prefix + "inducing", inducing);
            ln_ind.collect(out, prefix + "ln_ind.");
            ln_hidden.collect(out, prefix + "ln_hidden.");
            ln_hidden_ff.collect(out, prefix + "ln_hidden_ff.");
            to_inducing.collect(out, prefix + "to_inducing.");
            from_inducing.collect(out, prefix + "from_inducing.");
            ff_hidden.collect(out, prefix + "ff_hidden.");
        } else {
            self_attn.collect(out, prefix + "attn.");
        }
    }
};

/// Column-wise set-attention embedder: each column is a set of row values
/// that yields per-cell affine parameters (W, bias); cells embed as x*W + bias.
class ColumnEmbedder {
public:
    ColumnEmbedder() = default;
    ColumnEmbedder(const ColumnEmbedderConfig& cfg, Rng& rng) : cfg_(cfg) {
        const float bound = 1.0f;  // fan_in of the scalar lift is 1
        in_w_ = uniform_parameter({cfg.dim}, bound, rng);
        in_b_ = uniform_parameter({cfg.dim}, bound, rng);
        for (std::size_t i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg, rng);
        ln_final_ = LayerNorm(cfg.dim);
        head_w_ = Linear(cfg.dim, cfg.dim, rng);
        head_b_ = Linear(cfg.dim, cfg.dim, rng);
    }

    const ColumnEmbedderConfig& config() const { return cfg_; }
    ColumnEmbedderConfig& mutable_config() { return cfg_; }

    /// Set transform over the row axis of each column.
    ///
    /// src: [B, m, n, D] with skip cells already zeroed; key_valid: [B * m * n]
    /// marks cells that may serve as keys (the caller folds in support-only
    /// restriction and padding). Returns (W, bias), each [B, n, m, D].
    std::pair<Tensor, Tensor> column_set_transform(const Tensor& src, const std::vector<char>& key_valid) const {
        const std::size_t B = src.dim(0), m = src.dim(1), n = src.dim(2), D = src.dim(3);
        Tensor h = reshape(src, {B * m, n, D});
        for (const auto& blk : blocks_) h = blk(h, key_valid);
        h = ln_final_(h);
        auto to_cells = [&](const Tensor& t) { return permute(reshape(t, {B, m, n, D}), {0, 2, 1, 3}); };
        return {to_cells(head_w_(h)), to_cells(head_b_(h))};
    }

    /// Key-validity flags for column_set_transform, laid out [B, m, n].
    std::vector<char> key_mask(const TableBatch& batch, bool support_only) const {
        const std::size_t B = batch.batch, n = batch.rows, m = batch.features;
        std::vector<char> valid(B * m * n, 0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < batch.active_features[b]; ++j)
                for (std::size_t t = 0; t < n; ++t) {
                    if (support_only && t >= batch.n_train) continue;
                    valid[(b * m + j) * n + t] = batch.at(b, t, j) != batch.skip_value;
                }
        return valid;
    }

    /// Full column embedding of a batch: E of shape [B, n, m + n_cls, D].
    /// Reserved slots and padded columns embed to values that downstream
    /// attention masks out.
    Tensor operator()(const TableBatch& batch) const { return embed(batch, cfg_.attend_support_only); }

    Tensor embed(const TableBatch& batch, bool support_only) const {
        batch.validate();
        const std::size_t B = batch.batch, n = batch.rows, m = batch.features, D = cfg_.dim;
        // Padded columns are forced to skip so their stored contents never reach the model.
        std::vector<float> clean(batch.values);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t j = batch.active_features[b]; j < m; ++j) clean[(b * n + t) * m + j] = batch.skip_value;
        const Tensor x({B, n, m}, clean);

        Tensor E = Tensor::zeros({B, n, cfg_.n_cls, D});
        if (m > 0) {
            // Zero the skip channels before set attention; they are masked as keys anyway.
            std::vector<float> keep(B * m * n);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < m; ++j)
                    for (std::size_t t = 0; t < n; ++t)
                        keep[(b * m + j) * n + t] = clean[(b * n + t) * m + j] == batch.skip_value ? 0.0f : 1.0f;
            Tensor lifted = skippable_linear<float>(x, in_w_, in_b_, batch.skip_value);
            Tensor src = scale_rows(lifted, std::move(keep));
            auto [W, bias] = column_set_transform(src, key_mask(batch, support_only));
            E = concat<float>({E, embed_cells(x, W, bias, batch.skip_value)}, 2);
        }
        return E;
    }

    void collect(NamedParameters& out, const std::string& prefix) const {
        out.emplace_back(prefix + "in_w", in_w_);
        out.emplace_back(prefix + "in_b", in_b_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + "block" + std::to_string(i) + ".");
        ln_final_.collect(out, prefix + "ln_final.");
        head_w_.collect(out, prefix + "head_w.");
        head_b_.collect(out, prefix + "head_b.");
    }

    Tensor& in_w() { return in_w_; }
    Tensor& in_b() { return in_b_; }
    std::vector<SetBlock>& blocks() { return blocks_; }
    const std::vector<SetBlock>& blocks() const { return blocks_; }
    const LayerNorm& ln_final() const { return ln_final_; }
    const Linear& head_w() const { return head_w_; }
    const Linear& head_b() const { return head_b_; }

private:
    ColumnEmbedderConfig cfg_;
    Tensor in_w_, in_b_;
    std::vector<SetBlock> blocks_;
    LayerNorm ln_final_;
    Linear head_w_, head_b_;
};

}  // namespace biax
