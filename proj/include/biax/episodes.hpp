#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "biax/errors.hpp"
#include "biax/labeled_table.hpp"

namespace biax {

/// One support/query split of a table. Labels are remapped to dense ids
/// 0..C-1 over the classes in the support set, in increasing original order.
struct Episode {
    std::size_t table = 0;  // index into the source table list
    std::vector<std::size_t> support_indices;
    std::vector<std::size_t> query_indices;
    std::vector<int> support_labels;  // dense
    std::vector<int> query_labels;    // dense
    std::vector<int> class_map;       // dense id -> original label
    std::size_t num_classes = 0;

    std::size_t n_train() const { return support_indices.size(); }
    std::size_t rows() const { return support_indices.size() + query_indices.size(); }
};

enum class SupportSelection { random, knn };

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a combined word
    std::uint64_t z = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline void check_sizes(const LabeledTable& t, std::size_t n_support, std::size_t n_query) {
    if (n_support + n_query > t.n) {
        throw EpisodeError("episode: " + std::to_string(n_support) + " support + " + std::to_string(n_query) +
                           " query rows exceed the table's " + std::to_string(t.n));
    }
    if (n_query < 1) throw EpisodeError("episode: need at least one query row");
    const auto counts = t.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0) throw EpisodeError("episode: class " + std::to_string(c) + " has no rows");
    if (n_support < counts.size()) {
        throw EpisodeError("episode: " + std::to_string(n_support) + " support rows cannot cover " +
                           std::to_string(counts.size()) + " classes");
    }
}

inline Episode finish_episode(const LabeledTable& t, std::vector<std::size_t> support, std::vector<std::size_t> query) {
    Episode ep;
    ep.support_indices = std::move(support);
    ep.query_indices = std::move(query);
    std::vector<int> present;
    for (auto r : ep.support_indices) present.push_back(t.y[r]);
    std::sort(present.begin(), present.end());
    present.erase(std::unique(present.begin(), present.end()), present.end());
    ep.class_map = present;
    ep.num_classes = present.size();
    auto dense = [&](int y) {
        auto it = std::lower_bound(present.begin(), present.end(), y);
        if (it == present.end() || *it != y) throw EpisodeError("episode: query class missing from the support set");
        return static_cast<int>(it - present.begin());
    };
    for (auto r : ep.support_indices) ep.support_labels.push_back(dense(t.y[r]));
    for (auto r : ep.query_indices) ep.query_labels.push_back(dense(t.y[r]));
    return ep;
}

}  // namespace detail

/// Stratified random split: one support row per class first, the rest at random.
inline Episode make_episode_random(const LabeledTable& t, std::size_t n_support, std::size_t n_query,
                                   std::uint64_t seed) {
    detail::check_sizes(t, n_support, n_query);
    std::mt19937_64 rng(detail::mix_seed(seed, 0x7261));
    std::vector<std::vector<std::size_t>> by_class(t.num_classes);
    for (std::size_t r = 0; r < t.n; ++r) by_class[t.y[r]].push_back(r);
    std::vector<std::size_t> support, rest;
    for (auto& rows : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        support.push_back(rows.front());
        rest.insert(rest.end(), rows.begin() + 1, rows.end());
    }
    std::sort(rest.begin(), rest.end());
    std::shuffle(rest.begin(), rest.end(), rng);
    const std::size_t extra = n_support - support.size();
    support.insert(support.end(), rest.begin(), rest.begin() + extra);
    std::vector<std::size_t> query(rest.begin() + extra, rest.begin() + extra + n_query);
    std::shuffle(support.begin(), support.end(), rng);
    return detail::finish_episode(t, std::move(support), std::move(query));
}

/// Per-feature mean and scale from the given rows; near-constant features keep unit scale.
struct FeatureScaling {
    std::vector<double> mean, scale;

    std::vector<double> apply(const float* row) const {
        std::vector<double> out(mean.size());
        for (std::size_t j = 0; j < mean.size(); ++j) out[j] = (row[j] - mean[j]) / scale[j];
        return out;
    }
};

inline FeatureScaling fit_scaling(const std::vector<const float*>& rows, std::size_t m) {
    FeatureScaling s{std::vector<double>(m, 0.0), std::vector<double>(m, 1.0)};
    if (rows.empty()) return s;
    for (const float* r : rows)
        for (std::size_t j = 0; j < m; ++j) s.mean[j] += r[j];
    for (auto& v : s.mean) v /= double(rows.size());
    std::vector<double> var(m, 0.0);
    for (const float* r : rows)
        for (std::size_t j = 0; j < m; ++j) var[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (std::size_t j = 0; j < m; ++j) {
        const double sd = std::sqrt(var[j] / double(rows.size()));
        s.scale[j] = sd > 1e-8 ? sd : 1.0;
    }
    return s;
}

/// Greedy relevance/diversity support selection.
///
/// Candidates and queries are rows of m features. Distances are Euclidean after
/// standardizing with query-row statistics. Each step picks the candidate
/// maximizing -alpha * meanDist(c, queries) + (1 - alpha) * minDist(c, chosen),
/// where minDist is 0 before anything is chosen. The first picks are restricted
/// to classes not yet covered until every class has a row; ties go to the lower
/// candidate index. Returns candidate positions in pick order.
inline std::vector<std::size_t> select_knn_support(const std::vector<const float*>& candidates,
                                                   const std::vector<int>& candidate_labels,
                                                   const std::vector<const float*>& queries, std::size_t m,
                                                   std::size_t k, double alpha) {
    if (k > candidates.size()) throw EpisodeError("knn selection: k exceeds the candidate pool");
    if (queries.empty()) throw EpisodeError("knn selection: need at least one query");
    if (alpha < 0 || alpha > 1) throw ConfigError("knn selection: alpha must be in [0, 1]");
    const FeatureScaling sc = fit_scaling(queries, m);
    std::vector<std::vector<double>> cz, qz;
    for (const float* c : candidates) cz.push_back(sc.apply(c));
    for (const float* q : queries) qz.push_back(sc.apply(q));
    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
        return std::sqrt(s);
    };
    const std::size_t N = candidates.size();
    std::vector<double> mean_q(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        for (const auto& q : qz) mean_q[i] += dist(cz[i], q);
        mean_q[i] /= double(qz.size());
    }
    std::vector<int> classes(candidate_labels);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (k < classes.size()) throw EpisodeError("knn selection: k cannot cover every class");
    std::map<int, bool> covered;
    for (int c : classes) covered[c] = false;
    std::size_t uncovered = classes.size();

    std::vector<double> min_chosen(N, std::numeric_limits<double>::infinity());
    std::vector<char> taken(N, 0);
    std::vector<std::size_t> picks;
    while (picks.size() < k) {
        std::size_t best = N;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < N; ++i) {
            if (taken[i]) continue;
            if (uncovered > 0 && covered[candidate_labels[i]]) continue;
            const double diversity = picks.empty() ? 0.0 : min_chosen[i];
            const double score = -alpha * mean_q[i] + (1.0 - alpha) * diversity;
            if (score > best_score) {
                best_score = score;
                best = i;
            }
        }
        taken[best] = 1;
        picks.push_back(best);
        if (!covered[candidate_labels[best]]) {
            covered[candidate_labels[best]] = true;
            --uncovered;
        }
        for (std::size_t i = 0; i < N; ++i) min_chosen[i] = std::min(min_chosen[i], dist(cz[i], cz[best]));
    }
    return picks;
}

/// Random query draw, then greedy kNN support selection from the remaining rows.
/// One row per class is held out of the query draw so coverage stays possible.
inline Episode make_episode_knn(const LabeledTable& t, std::size_t n_support, std::size_t n_query, std::uint64_t seed,
                                double alpha = 0.5) {
    detail::check_sizes(t, n_support, n_query);
    std::mt19937_64 rng(detail::mix_seed(seed, 0x6b6e));
    std::vector<std::vector<std::size_t>> by_class(t.num_classes);
    for (std::size_t r = 0; r < t.n; ++r) by_class[t.y[r]].push_back(r);
    std::vector<char> reserved(t.n, 0);
    for (const auto& rows : by_class) reserved[rows[std::uniform_int_distribution<std::size_t>(0, rows.size() - 1)(rng)]] = 1;
    std::vector<std::size_t> eligible;
    for (std::size_t r = 0; r < t.n; ++r)
        if (!reserved[r]) eligible.push_back(r);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    std::vector<std::size_t> query(eligible.begin(), eligible.begin() + n_query);
    std::vector<char> is_query(t.n, 0);
    for (auto r : query) is_query[r] = 1;

    std::vector<std::size_t> pool;
    std::vector<const float*> cand, qrows;
    std::vector<int> cand_labels;
    for (std::size_t r = 0; r < t.n; ++r)
        if (!is_query[r]) {
            pool.push_back(r);
            cand.push_back(t.X.data() + r * t.m);
            cand_labels.push_back(t.y[r]);
        }
    for (auto r : query) qrows.push_back(t.X.data() + r * t.m);
    const auto picks = select_knn_support(cand, cand_labels, qrows, t.m, n_support, alpha);
    std::vector<std::size_t> support;
    for (auto p : picks) support.push_back(pool[p]);
    return detail::finish_episode(t, std::move(support), std::move(query));
}

/// Episode sizing and selection for a stream.
struct StreamConfig {
    std::size_t episodes_per_table = 4;
    std::size_t chunk_size = 8;
    SupportSelection mode = SupportSelection::random;
    std::uint64_t seed = 0;
    double alpha = 0.5;
    std::size_t max_rows = 256;               // cap on support + query rows per episode
    double support_fraction_min = 0.3;
    double support_fraction_max = 0.8;
};

/// Lazily yields chunks of episodes over tables x episodes_per_table, in a
/// seed-determined order. Each episode has its own sub-seed, so episodes from
/// the same table use different splits.
class EpisodeStream {
public:
    EpisodeStream(const std::vector<LabeledTable>& tables, StreamConfig cfg) : tables_(&tables), cfg_(cfg) {
        if (cfg.chunk_size < 1) throw ConfigError("episode stream: chunk_size must be at least 1");
        if (cfg.support_fraction_min <= 0 || cfg.support_fraction_min > cfg.support_fraction_max ||
            cfg.support_fraction_max >= 1) {
            throw ConfigError("episode stream: support fractions must satisfy 0 < min <= max < 1");
        }
        reset();
    }

    void reset() {
        order_.clear();
        for (std::size_t t = 0; t < tables_->size(); ++t)
            for (std::size_t e = 0; e < cfg_.episodes_per_table; ++e) order_.push_back({t, e});
        std::mt19937_64 rng(detail::mix_seed(cfg_.seed, 0x6f72));
        std::shuffle(order_.begin(), order_.end(), rng);
        pos_ = 0;
    }

    std::size_t total() const { return order_.size(); }

    std::optional<std::vector<Episode>> next() {
        if (pos_ >= order_.size()) return std::nullopt;
        std::vector<Episode> chunk;
        for (; pos_ < order_.size() && chunk.size() < cfg_.chunk_size; ++pos_) {
            const auto [t, e] = order_[pos_];
            chunk.push_back(make(t, detail::mix_seed(detail::mix_seed(cfg_.seed, t), e + 1)));
        }
        return chunk;
    }

private:
    Episode make(std::size_t t, std::uint64_t sub_seed) const {
        const LabeledTable& table = (*tables_)[t];
        std::mt19937_64 rng(sub_seed);
        const std::size_t C = table.num_classes;
        const std::size_t rows = std::min(table.n, cfg_.max_rows);
        if (rows < C + 1) throw EpisodeError("episode stream: table too small for its classes");
        const double frac = std::uniform_real_distribution<double>(cfg_.support_fraction_min, cfg_.support_fraction_max)(rng);
        const std::size_t n_support = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * double(rows))), C,
                                                              rows - 1);
        const std::size_t n_query = rows - n_support;
        Episode ep = cfg_.mode == SupportSelection::random ? make_episode_random(table, n_support, n_query, rng())
                                                           : make_episode_knn(table, n_support, n_query, rng(), cfg_.alpha);
        ep.table = t;
        return ep;
    }

    const std::vector<LabeledTable>* tables_;
    StreamConfig cfg_;
    std::vector<std::pair<std::size_t, std::size_t>> order_;
    std::size_t pos_ = 0;
};

}  // namespace biax
