#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "biax/errors.hpp"
#include "biax/labeled_table.hpp"

namespace biax {

enum class GeneratorKind { mlp_scm, tree };

inline const char* generator_name(GeneratorKind k) { return k == GeneratorKind::mlp_scm ? "mlp_scm" : "tree"; }

/// Prior over synthetic classification tables. Ranges are inclusive.
struct PriorConfig {
    std::size_t n_min = 64, n_max = 512;
    std::size_t m_min = 3, m_max = 24;
    std::size_t c_min = 2, c_max = 10;
    double mlp_weight = 0.7;
    double tree_weight = 0.3;
    double noise = 0.1;                 // latent-noise scale (mlp) / label-flip rate (tree)
    double categorical_fraction = 0.2;  // share of columns quantized to integer codes
    std::size_t tree_depth_min = 2, tree_depth_max = 6;
    std::size_t mlp_layers_min = 1, mlp_layers_max = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_min < 2 || n_min > n_max) throw ConfigError("prior: bad row range");
        if (m_min < 1 || m_min > m_max) throw ConfigError("prior: bad feature range");
        if (c_min < 2 || c_min > c_max) throw ConfigError("prior: bad class range");
        if (2 * c_max > n_min) throw ConfigError("prior: n_min must allow two rows per class");
        if (mlp_weight < 0 || tree_weight < 0 || std::abs(mlp_weight + tree_weight - 1.0) > 1e-9) {
            throw ConfigError("prior: generator weights must be nonnegative and sum to 1");
        }
        if (noise < 0) throw ConfigError("prior: noise must be nonnegative");
        if (categorical_fraction < 0 || categorical_fraction > 1) throw ConfigError("prior: categorical fraction in [0,1]");
        if (tree_depth_min < 1 || tree_depth_min > tree_depth_max) throw ConfigError("prior: bad tree depth range");
        if (mlp_layers_min < 1 || mlp_layers_min > mlp_layers_max) throw ConfigError("prior: bad mlp depth range");
    }

    nlohmann::json to_json() const {
        return {{"n_min", n_min},   {"n_max", n_max},
                {"m_min", m_min},   {"m_max", m_max},
                {"c_min", c_min},   {"c_max", c_max},
                {"mlp_weight", mlp_weight}, {"tree_weight", tree_weight},
                {"noise", noise},   {"categorical_fraction", categorical_fraction},
                {"tree_depth_min", tree_depth_min}, {"tree_depth_max", tree_depth_max},
                {"mlp_layers_min", mlp_layers_min}, {"mlp_layers_max", mlp_layers_max},
                {"seed", seed}};
    }

    static PriorConfig from_json(const nlohmann::json& j) {
        PriorConfig c;
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("n_min", c.n_min);
        get("n_max", c.n_max);
        get("m_min", c.m_min);
        get("m_max", c.m_max);
        get("c_min", c.c_min);
        get("c_max", c.c_max);
        get("mlp_weight", c.mlp_weight);
        get("tree_weight", c.tree_weight);
        get("noise", c.noise);
        get("categorical_fraction", c.categorical_fraction);
        get("tree_depth_min", c.tree_depth_min);
        get("tree_depth_max", c.tree_depth_max);
        get("mlp_layers_min", c.mlp_layers_min);
        get("mlp_layers_max", c.mlp_layers_max);
        get("seed", c.seed);
        return c;
    }
};

struct SyntheticTable : LabeledTable {
    std::vector<std::size_t> categorical_columns;
    GeneratorKind kind = GeneratorKind::mlp_scm;
    std::uint64_t seed = 0;
    std::size_t attempts = 1;  // draws needed to meet class coverage
};

namespace detail {

using PriorRng = std::mt19937_64;

inline std::size_t uniform_size(PriorRng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Class boundaries at random interior quantiles of the latent target.
inline std::vector<int> discretize(const std::vector<double>& z, std::size_t C, PriorRng& rng) {
    std::vector<double> sorted = z;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = z.size();
    std::vector<double> cuts;
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    for (std::size_t c = 1; c < C; ++c) {
        const double q = (double(c) + jitter(rng)) / double(C);
        const auto idx = std::min(n - 1, static_cast<std::size_t>(q * double(n)));
        cuts.push_back(sorted[idx]);
    }
    std::sort(cuts.begin(), cuts.end());
    // Random class order so class id carries no ordinal meaning.
    std::vector<int> relabel(C);
    std::iota(relabel.begin(), relabel.end(), 0);
    std::shuffle(relabel.begin(), relabel.end(), rng);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto bin = std::upper_bound(cuts.begin(), cuts.end(), z[i]) - cuts.begin();
        y[i] = relabel[bin];
    }
    return y;
}

// Maps a column to integer codes over `levels` equal-width bins, in random code order.
inline void quantize_column(std::vector<float>& X, std::size_t n, std::size_t m, std::size_t j, PriorRng& rng) {
    const std::size_t levels = uniform_size(rng, 2, 6);
    float lo = X[j], hi = X[j];
    for (std::size_t r = 0; r < n; ++r) {
        lo = std::min(lo, X[r * m + j]);
        hi = std::max(hi, X[r * m + j]);
    }
    std::vector<int> code(levels);
    std::iota(code.begin(), code.end(), 0);
    std::shuffle(code.begin(), code.end(), rng);
    const float width = hi > lo ? (hi - lo) / float(levels) : 1.0f;
    for (std::size_t r = 0; r < n; ++r) {
        const auto bin = std::min(levels - 1, static_cast<std::size_t>((X[r * m + j] - lo) / width));
        X[r * m + j] = float(code[bin]);
    }
}

inline std::vector<std::size_t> pick_categorical(std::size_t m, double fraction, PriorRng& rng) {
    std::vector<std::size_t> cols(m);
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(cols.begin(), cols.end(), rng);
    cols.resize(static_cast<std::size_t>(std::floor(fraction * double(m))));
    std::sort(cols.begin(), cols.end());
    return cols;
}

// Random MLP over Gaussian causes. Every hidden unit is a latent node; features
// and the target are read off distinct nodes.
inline void sample_mlp(SyntheticTable& t, const PriorConfig& cfg, PriorRng& rng) {
    const std::size_t n = t.n, m = t.m;
    const std::size_t layers = uniform_size(rng, cfg.mlp_layers_min, cfg.mlp_layers_max);
    const std::size_t width = std::max<std::size_t>(m + 1, uniform_size(rng, 8, 32));
    const std::size_t roots = uniform_size(rng, 2, 8);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> W(layers);
    std::vector<std::vector<double>> bias(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t in = l == 0 ? roots : width;
        W[l].resize(width * in);
        bias[l].resize(width);
        for (auto& w : W[l]) w = gauss(rng) / std::sqrt(double(in)) * 1.5;
        for (auto& b : bias[l]) b = 0.3 * gauss(rng);
    }
    // Node picks over all hidden units.
    std::vector<std::size_t> nodes(layers * width);
    std::iota(nodes.begin(), nodes.end(), 0);
    std::shuffle(nodes.begin(), nodes.end(), rng);
    const std::size_t target_node = nodes[m];
    std::vector<double> z(n);
    std::vector<double> h_all(layers * width);
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> prev(roots);
        for (auto& v : prev) v = gauss(rng);
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t in = prev.size();
            std::vector<double> cur(width);
            for (std::size_t o = 0; o < width; ++o) {
                double acc = bias[l][o];
                for (std::size_t i = 0; i < in; ++i) acc += W[l][o * in + i] * prev[i];
                cur[o] = std::tanh(acc) + 0.05 * gauss(rng);
                h_all[l * width + o] = cur[o];
            }
            prev = std::move(cur);
        }
        for (std::size_t j = 0; j < m; ++j) t.X[r * m + j] = float(h_all[nodes[j]]);
        z[r] = h_all[target_node];
    }
    if (cfg.noise > 0) {
        double mu = std::accumulate(z.begin(), z.end(), 0.0) / double(n), var = 0;
        for (double v : z) var += (v - mu) * (v - mu);
        const double sd = std::sqrt(var / double(n)) + 1e-12;
        for (auto& v : z) v += cfg.noise * sd * gauss(rng);
    }
    t.y = discretize(z, t.num_classes, rng);
    for (std::size_t j : t.categorical_columns) quantize_column(t.X, n, m, j, rng);
}

struct TreeNode {
    int feature = -1;  // -1: leaf
    float threshold = 0.0f;
    int left = -1, right = -1;
    int label = 0;
};

// Random axis-aligned tree; split thresholds sit at random quantiles of the rows
// reaching the node so every leaf stays populated.
inline void sample_tree(SyntheticTable& t, const PriorConfig& cfg, PriorRng& rng) {
    const std::size_t n = t.n, m = t.m, C = t.num_classes;
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t j = 0; j < m; ++j) {
        const double scale = std::exp(gauss(rng) * 0.5), shift = gauss(rng);
        for (std::size_t r = 0; r < n; ++r) t.X[r * m + j] = float(shift + scale * gauss(rng));
    }
    for (std::size_t j : t.categorical_columns) quantize_column(t.X, n, m, j, rng);

    std::size_t depth = uniform_size(rng, cfg.tree_depth_min, cfg.tree_depth_max);
    while ((std::size_t(1) << depth) < C) ++depth;
    std::vector<TreeNode> tree;
    std::vector<std::size_t> leaves;
    auto build = [&](auto& self, std::vector<std::size_t> rows, std::size_t level) -> int {
        const int id = static_cast<int>(tree.size());
        tree.emplace_back();
        if (level < depth && rows.size() >= 2) {
            // Try a few features for one with distinct values among these rows.
            for (int attempt = 0; attempt < 8; ++attempt) {
                const std::size_t j = uniform_size(rng, 0, m - 1);
                std::vector<float> v;
                for (auto r : rows) v.push_back(t.X[r * m + j]);
                std::sort(v.begin(), v.end());
                const std::size_t k = std::clamp<std::size_t>(
                    static_cast<std::size_t>((0.25 + 0.5 * unit(rng)) * double(v.size())), 1, v.size() - 1);
                if (v[k - 1] == v[k]) continue;
                const float thr = 0.5f * (v[k - 1] + v[k]);
                std::vector<std::size_t> lo, hi;
                for (auto r : rows) (t.X[r * m + j] < thr ? lo : hi).push_back(r);
                tree[id].feature = static_cast<int>(j);
                tree[id].threshold = thr;
                const int l = self(self, std::move(lo), level + 1);
                const int h = self(self, std::move(hi), level + 1);
                tree[id].left = l;
                tree[id].right = h;
                return id;
            }
        }
        leaves.push_back(static_cast<std::size_t>(id));
        return id;
    };
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    build(build, all, 0);

    // Cover every class when there are enough leaves, then fill at random.
    std::vector<int> assign(leaves.size());
    std::vector<int> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < leaves.size(); ++i)
        assign[i] = i < C ? order[i] : static_cast<int>(uniform_size(rng, 0, C - 1));
    std::shuffle(assign.begin(), assign.end(), rng);
    for (std::size_t i = 0; i < leaves.size(); ++i) tree[leaves[i]].label = assign[i];

    t.y.assign(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        int id = 0;
        while (tree[id].feature >= 0) id = t.X[r * m + tree[id].feature] < tree[id].threshold ? tree[id].left : tree[id].right;
        t.y[r] = tree[id].label;
        if (cfg.noise > 0 && unit(rng) < cfg.noise) t.y[r] = static_cast<int>(uniform_size(rng, 0, C - 1));
    }
}

}  // namespace detail

/// Deterministic in (config, seed). Retries with derived seeds until every
/// class has at least two rows; gives up after 100 draws.
inline SyntheticTable sample_table(const PriorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    for (std::size_t attempt = 0; attempt < 100; ++attempt) {
        std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(attempt), 0x5eedu};
        detail::PriorRng rng(seq);
        SyntheticTable t;
        t.seed = seed;
        t.attempts = attempt + 1;
        t.n = detail::uniform_size(rng, cfg.n_min, cfg.n_max);
        t.m = detail::uniform_size(rng, cfg.m_min, cfg.m_max);
        t.num_classes = detail::uniform_size(rng, cfg.c_min, cfg.c_max);
        t.kind = std::bernoulli_distribution(cfg.tree_weight)(rng) ? GeneratorKind::tree : GeneratorKind::mlp_scm;
        t.X.assign(t.n * t.m, 0.0f);
        t.categorical_columns = detail::pick_categorical(t.m, cfg.categorical_fraction, rng);
        if (t.kind == GeneratorKind::tree)
            detail::sample_tree(t, cfg, rng);
        else
            detail::sample_mlp(t, cfg, rng);
        const auto counts = t.class_counts();
        const bool covered = std::all_of(counts.begin(), counts.end(), [](std::size_t c) { return c >= 2; });
        const bool finite = std::all_of(t.X.begin(), t.X.end(), [](float v) { return std::isfinite(v); });
        if (covered && finite) return t;
    }
    throw GenerationError("sample_table: could not cover every class with two rows after 100 draws (seed " +
                          std::to_string(seed) + ")");
}

/// Writes the table as CSV (header f0..f{m-1},y) plus a JSON sidecar at
/// `csv_path + ".json"` with generator kind, seed and class count.
inline void dump_table(const SyntheticTable& t, const std::string& csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("cannot write " + csv_path);
    for (std::size_t j = 0; j < t.m; ++j) out << 'f' << j << ',';
    out << "y\n";
    out.precision(9);
    for (std::size_t r = 0; r < t.n; ++r) {
        for (std::size_t j = 0; j < t.m; ++j) out << t.at(r, j) << ',';
        out << t.y[r] << '\n';
    }
    nlohmann::json meta{{"generator", generator_name(t.kind)},
                        {"seed", t.seed},
                        {"classes", t.num_classes},
                        {"rows", t.n},
                        {"features", t.m},
                        {"categorical_columns", t.categorical_columns}};
    std::ofstream side(csv_path + ".json");
    if (!side) throw std::runtime_error("cannot write " + csv_path + ".json");
    side << meta.dump(2) << '\n';
}

}  // namespace biax
