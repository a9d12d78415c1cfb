#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "biax/nn.hpp"

namespace biax {

enum class IclAttention { softmax, linear };

struct IclConfig {
    std::size_t row_dim = 128;  // n_cls * D
    std::size_t blocks = 3;
    std::size_t heads = 4;
    std::size_t ff_mult = 2;
    std::size_t max_classes = 10;  // C_max
    std::size_t decoder_hidden = 128;
    IclAttention attention = IclAttention::softmax;
};

/// Row-axis mask: every row sees exactly the first n_train rows.
inline AttentionMask build_split_mask(std::size_t n, std::size_t n_train) {
    if (n_train == 0 || n_train >= n) {
        throw ContractError("build_split_mask: need 1 <= n_train < n (n=" + std::to_string(n) +
                            ", n_train=" + std::to_string(n_train) + ")");
    }
    AttentionMask mask = AttentionMask::shared(n, n, false);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t s = 0; s < n_train; ++s) mask.allow(0, t, s);
    return mask;
}

/// Adds label embeddings to support rows. R: [B, n, D_row]; y_train: [B * n_train];
/// label_table: [C_max, D_row] (one-hot followed by a bias-free linear map).
inline Tensor inject_labels(const Tensor& R, const std::vector<int>& y_train, std::size_t n_train,
                            const Tensor& label_table) {
    if (R.rank() != 3) throw ShapeError("inject_labels: R must be [B, n, D_row]");
    const std::size_t B = R.dim(0), n = R.dim(1), Dr = R.dim(2);
    if (label_table.rank() != 2 || label_table.dim(1) != Dr) throw ShapeError("inject_labels: label table width");
    if (n_train > n || y_train.size() != B * n_train) throw ShapeError("inject_labels: label count mismatch");
    const int cmax = static_cast<int>(label_table.dim(0));
    std::vector<int> idx(B * n, -1);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < n_train; ++t) {
            const int y = y_train[b * n_train + t];
            if (y < 0 || y >= cmax) {
                throw ContractError("inject_labels: label " + std::to_string(y) + " outside [0, C_max=" +
                                    std::to_string(cmax) + "); remap through a class tree first");
            }
            idx[b * n + t] = y;
        }
    return add(R, reshape(embedding(label_table, std::move(idx)), {B, n, Dr}));
}

struct IclBlock {
    LayerNorm ln_attn, ln_ff;
    MultiHeadAttention attn;
    FeedForward ff;

    IclBlock() = default;
    IclBlock(const IclConfig& cfg, Rng& rng)
        : ln_attn(cfg.row_dim), ln_ff(cfg.row_dim), attn(cfg.row_dim, cfg.heads, rng),
          ff(cfg.row_dim, cfg.ff_mult * cfg.row_dim, rng) {}

    void collect(NamedParameters& out, const std::string& prefix) const {
        ln_attn.collect(out, prefix + "ln_attn.");
        ln_ff.collect(out, prefix + "ln_ff.");
        attn.collect(out, prefix + "attn.");
        ff.collect(out, prefix + "ff.");
    }
};

/// Label-aware in-context learner: split-masked row transformer plus MLP decoder.
class IclHead {
public:
    IclHead() = default;
    IclHead(const IclConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.max_classes < 2) throw ConfigError("C_max must be at least 2");
        label_table_ = uniform_parameter({cfg.max_classes, cfg.row_dim}, 1.0f, rng);
        for (std::size_t i = 0; i < cfg.blocks; ++i) blocks_.emplace_back(cfg, rng);
        ln_final_ = LayerNorm(cfg.row_dim);
        dec_hidden_ = Linear(cfg.row_dim, cfg.decoder_hidden, rng);
        dec_out_ = Linear(cfg.decoder_hidden, cfg.max_classes, rng);
    }

    const IclConfig& config() const { return cfg_; }
    Tensor& label_table() { return label_table_; }
    const Tensor& label_table() const { return label_table_; }
    std::vector<IclBlock>& blocks() { return blocks_; }
    Linear& decoder_out() { return dec_out_; }
    Linear& decoder_hidden() { return dec_hidden_; }

    Tensor inject(const Tensor& R, const std::vector<int>& y_train, std::size_t n_train) const {
        return inject_labels(R, y_train, n_train, label_table_);
    }

    /// Encoder over label-conditioned rows. Returns Z: [B, n, D_row].
    Tensor encode(const Tensor& R_injected, std::size_t n_train) const {
        const std::size_t n = R_injected.dim(1);
        const AttentionMask mask = build_split_mask(n, n_train);
        Tensor Z = R_injected;
        for (const auto& blk : blocks_) {
            Tensor h = blk.ln_attn(Z);
            Tensor att;
            if (cfg_.attention == IclAttention::softmax) {
                att = blk.attn(h, h, &mask, EmptyRows::reject);
            } else {
                // Split-mask keys are the support prefix for every row, so kernel attention
                // over that prefix realizes the same mask.
                Tensor kv = slice(h, 1, 0, n_train);
                att = blk.attn.o(linear_attention(blk.attn.q(h), blk.attn.k(kv), blk.attn.v(kv),
                                                  FeatureMap::elu_plus_one, blk.attn.heads));
            }
            Z = add(Z, att);
            Z = add(Z, blk.ff(blk.ln_ff(Z)));
        }
        return ln_final_(Z);
    }

    Tensor decode(const Tensor& Z) const { return dec_out_(gelu(dec_hidden_(Z))); }

    /// Logits [B, n, C_max] for all rows; callers read only the query rows.
    Tensor operator()(const Tensor& R_injected, std::size_t n_train) const { return decode(encode(R_injected, n_train)); }

    void collect(NamedParameters& out) const {
        out.emplace_back("icl.label_embed", label_table_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "icl.block" + std::to_string(i) + ".");
        ln_final_.collect(out, "icl.ln_final.");
        dec_hidden_.collect(out, "decoder.hidden.");
        dec_out_.collect(out, "decoder.out.");
    }

private:
    IclConfig cfg_;
    Tensor label_table_;
    std::vector<IclBlock> blocks_;
    LayerNorm ln_final_;
    Linear dec_hidden_, dec_out_;
};

// ---------------------------------------------------------------------------
// Hierarchical classification
// ---------------------------------------------------------------------------

/// Recursive grouping of class ids. A leaf predicts among its `labels`
/// directly; an internal node predicts which child holds the label.
struct ClassTree {
    std::vector<int> labels;  // sorted original ids under this node
    std::vector<ClassTree> children;

    bool is_leaf() const { return children.empty(); }

    std::size_t depth() const {
        std::size_t d = 0;
        for (const auto& c : children) d = std::max(d, c.depth());
        return d + 1;
    }
};

namespace detail {

inline ClassTree build_tree_over(std::vector<int> labels, std::size_t c_max) {
    ClassTree node;
    node.labels = std::move(labels);
    const std::size_t C = node.labels.size();
    if (C <= c_max) return node;
    const std::size_t base = C / c_max, extra = C % c_max;
    std::size_t pos = 0;
    for (std::size_t g = 0; g < c_max; ++g) {
        const std::size_t len = base + (g < extra ? 1 : 0);
        std::vector<int> part(node.labels.begin() + pos, node.labels.begin() + pos + len);
        node.children.push_back(build_tree_over(std::move(part), c_max));
        pos += len;
    }
    return node;
}

}  // namespace detail

/// Flat leaf when C <= C_max; otherwise C_max contiguous, size-balanced groups, recursively.
inline ClassTree build_class_tree(std::size_t num_classes, std::size_t c_max) {
    if (num_classes < 2 || c_max < 2) throw ContractError("build_class_tree: need C >= 2 and C_max >= 2");
    std::vector<int> labels(num_classes);
    for (std::size_t i = 0; i < num_classes; ++i) labels[i] = static_cast<int>(i);
    return detail::build_tree_over(std::move(labels), c_max);
}

/// Runs the model for one relabeled support subset.
///
/// support_positions index into the episode's support rows; relabeled are the
/// matching targets in [0, num_outputs). Returns row-major [n_query x num_outputs]
/// probabilities.
using SubsetForward = std::function<std::vector<float>(const std::vector<std::size_t>& support_positions,
                                                       const std::vector<int>& relabeled, std::size_t num_outputs)>;

namespace detail {

inline void predict_node(const ClassTree& node, const SubsetForward& forward, const std::vector<int>& support_labels,
                         const std::vector<std::size_t>& positions, std::size_t n_query, std::size_t num_classes,
                         const std::vector<float>& mass, std::vector<float>& out, WarningLog* warnings) {
    const std::size_t L = node.labels.size();
    if (positions.empty()) {
        warn(warnings, "hierarchical_predict: no support rows for labels " + std::to_string(node.labels.front()) +
                           ".." + std::to_string(node.labels.back()) + "; spreading mass uniformly");
        for (std::size_t q = 0; q < n_query; ++q)
            for (int c : node.labels) out[q * num_classes + c] += mass[q] / float(L);
        return;
    }
    if (node.is_leaf()) {
        if (L == 1) {
            for (std::size_t q = 0; q < n_query; ++q) out[q * num_classes + node.labels[0]] += mass[q];
            return;
        }
        std::vector<int> local;
        for (auto p : positions) {
            auto it = std::lower_bound(node.labels.begin(), node.labels.end(), support_labels[p]);
            local.push_back(static_cast<int>(it - node.labels.begin()));
        }
        const auto probs = forward(positions, local, L);
        for (std::size_t q = 0; q < n_query; ++q)
            for (std::size_t i = 0; i < L; ++i) out[q * num_classes + node.labels[i]] += mass[q] * probs[q * L + i];
        return;
    }
    const std::size_t K = node.children.size();
    auto child_of = [&](int y) -> std::size_t {
        for (std::size_t c = 0; c < K; ++c) {
            const auto& lab = node.children[c].labels;
            if (y >= lab.front() && y <= lab.back()) return c;
        }
        throw ContractError("hierarchical_predict: support label outside the tree");
    };
    std::vector<int> local;
    std::vector<std::vector<std::size_t>> child_positions(K);
    for (auto p : positions) {
        const std::size_t c = child_of(support_labels[p]);
        local.push_back(static_cast<int>(c));
        child_positions[c].push_back(p);
    }
    const auto probs = forward(positions, local, K);
    for (std::size_t c = 0; c < K; ++c) {
        std::vector<float> child_mass(n_query);
        for (std::size_t q = 0; q < n_query; ++q) child_mass[q] = mass[q] * probs[q * K + c];
        predict_node(node.children[c], forward, support_labels, child_positions[c], n_query, num_classes, child_mass,
                     out, warnings);
    }
}

}  // namespace detail

/// Chain-rule probabilities over all C classes: [n_query x C], row-major.
inline std::vector<float> hierarchical_predict(const SubsetForward& forward, const std::vector<int>& support_labels,
                                               std::size_t n_query, const ClassTree& tree,
                                               WarningLog* warnings = nullptr) {
    const std::size_t C = tree.labels.size();
    std::vector<std::size_t> positions(support_labels.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    std::vector<float> out(n_query * C, 0.0f);
    detail::predict_node(tree, forward, support_labels, positions, n_query, C, std::vector<float>(n_query, 1.0f), out,
                         warnings);
    return out;
}

}  // namespace biax
