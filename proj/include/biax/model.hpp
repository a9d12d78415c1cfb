#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "biax/checkpoint.hpp"
#include "biax/column_embedder.hpp"
#include "biax/icl_head.hpp"
#include "biax/row_encoder.hpp"

namespace biax {

struct ModelConfig {
    std::size_t dim = 32;
    std::size_t n_cls = 4;
    // column embedder
    SetAttention col_attention = SetAttention::induced;
    std::size_t col_blocks = 2;
    std::size_t inducing_points = 16;
    std::size_t col_heads = 4;
    bool attend_support_only = true;
    // row encoder
    std::size_t groups = 4;
    std::size_t row_blocks = 3;
    std::size_t row_heads = 4;
    std::size_t ff_mult = 2;
    // in-context learner
    std::size_t icl_blocks = 3;
    std::size_t icl_heads = 4;
    IclAttention icl_attention = IclAttention::softmax;
    std::size_t max_classes = 10;
    std::size_t decoder_hidden = 0;  // 0: same as the row width
    std::uint64_t seed = 0;

    std::size_t row_dim() const { return n_cls * dim; }

    void validate() const {
        if (dim == 0 || n_cls == 0) throw ConfigError("model: dim and n_cls must be positive");
        if (dim % col_heads || dim % row_heads) throw ConfigError("model: dim must divide by the head counts");
        if (row_dim() % icl_heads) throw ConfigError("model: n_cls*dim must divide by icl_heads");
        if (row_blocks < 1 || icl_blocks < 1) throw ConfigError("model: need at least one row and one ICL block");
        if (groups < 1) throw ConfigError("model: need at least one feature group");
        if (max_classes < 2) throw ConfigError("model: C_max must be at least 2");
    }

    ColumnEmbedderConfig column() const {
        return {dim, n_cls, col_attention, inducing_points, col_blocks, col_heads, attend_support_only};
    }
    RowEncoderConfig row() const { return {dim, n_cls, groups, row_blocks, row_heads, ff_mult}; }
    IclConfig icl() const {
        return {row_dim(), icl_blocks, icl_heads, ff_mult, max_classes, decoder_hidden ? decoder_hidden : row_dim(),
                icl_attention};
    }

    nlohmann::json to_json() const {
        return {{"dim", dim},
                {"n_cls", n_cls},
                {"col_attention", col_attention == SetAttention::induced ? "induced" : "linear"},
                {"col_blocks", col_blocks},
                {"inducing_points", inducing_points},
                {"col_heads", col_heads},
                {"attend_support_only", attend_support_only},
                {"groups", groups},
                {"row_blocks", row_blocks},
                {"row_heads", row_heads},
                {"ff_mult", ff_mult},
                {"icl_blocks", icl_blocks},
                {"icl_heads", icl_heads},
                {"icl_attention", icl_attention == IclAttention::softmax ? "softmax" : "linear"},
                {"max_classes", max_classes},
                {"decoder_hidden", decoder_hidden},
                {"seed", seed}};
    }

    /// Missing keys keep their defaults.
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("dim", c.dim);
        get("n_cls", c.n_cls);
        if (j.contains("col_attention")) {
            const auto s = j.at("col_attention").get<std::string>();
            if (s != "induced" && s != "linear") throw ConfigError("col_attention must be induced or linear");
            c.col_attention = s == "induced" ? SetAttention::induced : SetAttention::linear;
        }
        get("col_blocks", c.col_blocks);
        get("inducing_points", c.inducing_points);
        get("col_heads", c.col_heads);
        get("attend_support_only", c.attend_support_only);
        get("groups", c.groups);
        get("row_blocks", c.row_blocks);
        get("row_heads", c.row_heads);
        get("ff_mult", c.ff_mult);
        get("icl_blocks", c.icl_blocks);
        get("icl_heads", c.icl_heads);
        if (j.contains("icl_attention")) {
            const auto s = j.at("icl_attention").get<std::string>();
            if (s != "softmax" && s != "linear") throw ConfigError("icl_attention must be softmax or linear");
            c.icl_attention = s == "softmax" ? IclAttention::softmax : IclAttention::linear;
        }
        get("max_classes", c.max_classes);
        get("decoder_hidden", c.decoder_hidden);
        get("seed", c.seed);
        return c;
    }
};

/// Column embedder -> biaxial row encoder -> in-context learner.
class Model {
public:
    Model() : Model(ModelConfig{}) {}
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        embedder_ = ColumnEmbedder(cfg.column(), rng);
        encoder_ = RowEncoder(cfg.row(), rng);
        icl_ = IclHead(cfg.icl(), rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ColumnEmbedder& embedder() { return embedder_; }
    const ColumnEmbedder& embedder() const { return embedder_; }
    RowEncoder& encoder() { return encoder_; }
    const RowEncoder& encoder() const { return encoder_; }
    IclHead& icl() { return icl_; }
    const IclHead& icl() const { return icl_; }

    void set_attend_support_only(bool v) {
        cfg_.attend_support_only = v;
        embedder_.mutable_config().attend_support_only = v;
    }

    /// Row representations before label injection: [B, n, n_cls * D].
    Tensor rows(const TableBatch& batch, WarningLog* warnings = nullptr) const {
        return encoder_(embedder_(batch), batch.active_features, warnings);
    }

    /// Logits [B, n, C_max] for every row of every task.
    Tensor logits(const TableBatch& batch, WarningLog* warnings = nullptr) const {
        const Tensor R = rows(batch, warnings);
        std::vector<int> y_train;
        y_train.reserve(batch.batch * batch.n_train);
        for (std::size_t b = 0; b < batch.batch; ++b)
            for (std::size_t t = 0; t < batch.n_train; ++t) y_train.push_back(batch.label(b, t));
        return icl_(icl_.inject(R, y_train, batch.n_train), batch.n_train);
    }

    NamedParameters parameters() const {
        NamedParameters out;
        embedder_.collect(out, "col_embed.");
        encoder_.collect(out, "row_enc.");
        icl_.collect(out);
        return out;
    }

    void zero_grad() {
        for (auto& [name, p] : parameters()) p.zero_grad();
    }

    Checkpoint to_checkpoint(const nlohmann::json& extra = nlohmann::json::object()) const {
        Checkpoint ckpt;
        for (const auto& [name, p] : parameters()) {
            ckpt.tensors.push_back({name, p.shape(), std::vector<float>(p.values().begin(), p.values().end())});
        }
        nlohmann::json cfg = extra;
        cfg["model"] = cfg_.to_json();
        ckpt.config = cfg.dump();
        return ckpt;
    }

    static Model from_checkpoint(const Checkpoint& ckpt) {
        const auto cfg_json = nlohmann::json::parse(ckpt.config.empty() ? "{}" : ckpt.config);
        if (!cfg_json.contains("model")) throw CheckpointError("checkpoint carries no model config");
        Model model(ModelConfig::from_json(cfg_json.at("model")));
        model.load_parameters(ckpt);
        return model;
    }

    void load_parameters(const Checkpoint& ckpt) {
        for (auto& [name, p] : parameters()) {
            const auto* e = ckpt.find(name);
            if (!e) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
            if (e->shape != p.shape()) throw CheckpointError("shape mismatch for tensor '" + name + "'");
            std::copy(e->data.begin(), e->data.end(), p.mutable_values().begin());
        }
    }

    void save(const std::string& path, const nlohmann::json& extra = nlohmann::json::object()) const {
        save_checkpoint(to_checkpoint(extra), path);
    }
    static Model load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

private:
    ModelConfig cfg_;
    ColumnEmbedder embedder_;
    RowEncoder encoder_;
    IclHead icl_;
};

/// One prediction task: n x m features (support rows first), support labels in [0, C).
struct EpisodeInput {
    std::size_t rows = 0;
    std::size_t features = 0;
    std::vector<float> values;  // [rows, features]
    std::vector<int> support_labels;
    std::size_t num_classes = 0;

    std::size_t n_train() const { return support_labels.size(); }
    std::size_t n_query() const { return rows - support_labels.size(); }
};

/// Single-task batch from the given support subset plus every query row.
inline TableBatch episode_batch(const EpisodeInput& ep, const std::vector<std::size_t>& support_positions,
                                const std::vector<int>& labels) {
    TableBatch tb;
    tb.batch = 1;
    tb.features = ep.features;
    tb.n_train = support_positions.size();
    tb.rows = tb.n_train + ep.n_query();
    tb.active_features = {ep.features};
    tb.values.reserve(tb.rows * tb.features);
    auto append_row = [&](std::size_t r) {
        tb.values.insert(tb.values.end(), ep.values.begin() + r * ep.features, ep.values.begin() + (r + 1) * ep.features);
    };
    for (auto p : support_positions) append_row(p);
    for (std::size_t r = ep.n_train(); r < ep.rows; ++r) append_row(r);
    tb.labels.assign(tb.rows, -1);
    std::copy(labels.begin(), labels.end(), tb.labels.begin());
    return tb;
}

/// Per-query class scores [n_query x C] whose softmax is the model's class
/// distribution: raw logits on the flat path, log chain-rule probabilities
/// when C exceeds C_max.
inline std::vector<float> class_scores(const Model& model, const EpisodeInput& ep, WarningLog* warnings = nullptr) {
    const std::size_t C = ep.num_classes, nq = ep.n_query();
    if (C < 2) throw ContractError("class_scores: need at least two classes");
    if (ep.n_train() < 1 || nq < 1) throw ContractError("class_scores: need support and query rows");
    const std::size_t cmax = model.config().max_classes;
    const std::size_t nt = ep.n_train();

    auto subset_logits = [&](const std::vector<std::size_t>& pos, const std::vector<int>& labels) {
        const Tensor lg = model.logits(episode_batch(ep, pos, labels), warnings);
        return std::vector<float>(lg.values().begin() + pos.size() * cmax, lg.values().end());
    };

    std::vector<std::size_t> all(nt);
    for (std::size_t i = 0; i < nt; ++i) all[i] = i;
    std::vector<float> scores(nq * C);
    if (C <= cmax) {
        const auto lg = subset_logits(all, ep.support_labels);
        for (std::size_t q = 0; q < nq; ++q)
            for (std::size_t c = 0; c < C; ++c) scores[q * C + c] = lg[q * cmax + c];
        return scores;
    }
    SubsetForward forward = [&](const std::vector<std::size_t>& pos, const std::vector<int>& labels, std::size_t k) {
        const auto lg = subset_logits(pos, labels);
        std::vector<float> probs(nq * k);
        for (std::size_t q = 0; q < nq; ++q) {
            const float* row = lg.data() + q * cmax;
            const float mx = *std::max_element(row, row + k);
            float z = 0.0f;
            for (std::size_t c = 0; c < k; ++c) z += (probs[q * k + c] = std::exp(row[c] - mx));
            for (std::size_t c = 0; c < k; ++c) probs[q * k + c] /= z;
        }
        return probs;
    };
    const auto probs = hierarchical_predict(forward, ep.support_labels, nq, build_class_tree(C, cmax), warnings);
    for (std::size_t i = 0; i < probs.size(); ++i) scores[i] = std::log(std::max(probs[i], 1e-30f));
    return scores;
}

/// Row-wise softmax of scores / temperature.
inline std::vector<float> tempered_softmax(const std::vector<float>& scores, std::size_t classes, float temperature) {
    if (!(temperature > 0.0f)) throw ContractError("temperature must be positive");
    std::vector<float> out(scores.size());
    for (std::size_t r = 0; r < scores.size() / classes; ++r) {
        const float* s = scores.data() + r * classes;
        float mx = *std::max_element(s, s + classes);
        float z = 0.0f;
        for (std::size_t c = 0; c < classes; ++c) z += (out[r * classes + c] = std::exp((s[c] - mx) / temperature));
        for (std::size_t c = 0; c < classes; ++c) out[r * classes + c] /= z;
    }
    return out;
}

}  // namespace biax
