#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "biax/episodes.hpp"
#include "biax/pipeline.hpp"

namespace biax {

struct Metrics {
    double accuracy = 0.0;
    double weighted_f1 = 0.0;
};

/// Accuracy and support-weighted F1 over the classes present in `truth`.
inline Metrics compute_metrics(const std::vector<int>& predictions, const std::vector<int>& truth) {
    if (predictions.size() != truth.size() || truth.empty()) throw ContractError("compute_metrics: need equal, non-empty label lists");
    std::map<int, std::size_t> tp, pred_count, true_count;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++pred_count[predictions[i]];
        ++true_count[truth[i]];
        if (predictions[i] == truth[i]) {
            ++correct;
            ++tp[truth[i]];
        }
    }
    Metrics m;
    const double N = double(truth.size());
    m.accuracy = double(correct) / N;
    for (const auto& [c, support] : true_count) {
        const double t = double(tp[c]);
        const double precision = pred_count[c] ? t / double(pred_count[c]) : 0.0;
        const double recall = t / double(support);
        const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        m.weighted_f1 += double(support) / N * f1;
    }
    return m;
}

/// Mean rank per model; rank 1 is the highest score on a dataset and ties
/// share the average of their ranks. Every model must score every dataset.
inline std::map<std::string, double> mean_rank(const std::map<std::string, std::vector<double>>& scores) {
    if (scores.empty()) return {};
    const std::size_t D = scores.begin()->second.size();
    for (const auto& [model, s] : scores) {
        if (s.size() != D) throw ContractError("mean_rank: model '" + model + "' is missing dataset scores");
        for (double v : s)
            if (std::isnan(v)) throw ContractError("mean_rank: model '" + model + "' has a missing score");
    }
    std::map<std::string, double> out;
    for (const auto& [model, s] : scores) out[model] = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
        for (const auto& [model, s] : scores) {
            std::size_t better = 0, equal = 0;
            for (const auto& [other, t] : scores) {
                better += t[d] > s[d];
                equal += t[d] == s[d];
            }
            // tied block occupies ranks better+1 .. better+equal
            out[model] += double(better) + 0.5 * double(equal + 1);
        }
    }
    if (D > 0)
        for (auto& [model, r] : out) r /= double(D);
    return out;
}

// ---------------------------------------------------------------- datasets

struct Dataset {
    std::string name;
    LabeledTable table;  // NaN marks missing numeric cells
    std::vector<std::string> label_names;
};

/// Reads a CSV; the label column defaults to the last one. Categorical
/// columns become integer codes.
inline Dataset load_dataset_csv(const std::string& path, const std::string& label_column = "") {
    const RawTable raw = read_csv(path);
    if (raw.header.size() < 2) throw DataError("'" + path + "' needs at least one feature and a label column");
    const std::size_t yj = label_column.empty() ? raw.header.size() - 1 : raw.column_index(label_column);
    const RawTable features = raw.without_column(yj);
    auto y_raw = raw.column(yj);
    Dataset ds;
    ds.name = std::filesystem::path(path).stem().string();
    // rows without a label carry no information for evaluation
    RawTable kept;
    kept.header = features.header;
    std::vector<std::string> y;
    for (std::size_t r = 0; r < y_raw.size(); ++r)
        if (!is_missing(y_raw[r])) {
            kept.rows.push_back(features.rows[r]);
            y.push_back(y_raw[r]);
        }
    if (kept.rows.empty()) throw DataError("'" + path + "' has no labeled rows");
    const auto cols = detect_columns(kept);
    const auto X = encode_columns(kept, cols);
    ds.table.n = kept.rows.size();
    ds.table.m = cols.size();
    ds.table.X.assign(X.begin(), X.end());
    ds.table.y = detail::dense_labels(y, ds.label_names);
    ds.table.num_classes = ds.label_names.size();
    return ds;
}

/// Every *.csv in a directory, in name order.
inline std::vector<Dataset> load_dataset_dir(const std::string& dir, const std::string& label_column = "") {
    if (!std::filesystem::is_directory(dir)) throw DataError("'" + dir + "' is not a directory");
    std::vector<std::string> paths;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".csv") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    std::vector<Dataset> out;
    for (const auto& p : paths) out.push_back(load_dataset_csv(p, label_column));
    return out;
}

// ---------------------------------------------------------------- few-shot

enum class SelectionStrategy { uniform, knn_diverse };

inline const char* selection_name(SelectionStrategy s) { return s == SelectionStrategy::uniform ? "uniform" : "knn"; }

inline SelectionStrategy parse_selection(const std::string& s) {
    if (s == "uniform") return SelectionStrategy::uniform;
    if (s == "knn" || s == "knn_diverse") return SelectionStrategy::knn_diverse;
    throw ConfigError("selection must be uniform or knn, got '" + s + "'");
}

struct FewshotConfig {
    std::vector<std::size_t> k_list{5, 10, 20, 32, 64, 128};
    SelectionStrategy selection = SelectionStrategy::uniform;
    std::size_t seeds = 5;
    std::uint64_t base_seed = 0;
    double test_fraction = 0.2;
    double knn_alpha = 0.5;
    std::size_t max_test_rows = 0;  // 0 keeps the whole test split
    PipelineConfig pipeline;
};

/// Stratified 80/20-style split; every class keeps at least one training row.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_test_split(const LabeledTable& t, double test_fraction,
                                                                                      std::uint64_t seed) {
    std::mt19937_64 rng(detail::mix_seed(seed, 0x5e11));
    std::vector<std::vector<std::size_t>> by_class(t.num_classes);
    for (std::size_t r = 0; r < t.n; ++r) by_class[t.y[r]].push_back(r);
    std::vector<std::size_t> train, test;
    for (auto& rows : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        std::size_t nt = static_cast<std::size_t>(std::round(test_fraction * double(rows.size())));
        nt = std::min(nt, rows.size() > 0 ? rows.size() - 1 : 0);
        test.insert(test.end(), rows.begin(), rows.begin() + nt);
        train.insert(train.end(), rows.begin() + nt, rows.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

/// k rows from `pool`, one per class first, the rest uniformly at random.
inline std::vector<std::size_t> stratified_sample(const std::vector<std::size_t>& pool, const std::vector<int>& y,
                                                  std::size_t k, std::uint64_t seed) {
    if (k > pool.size()) throw EpisodeError("stratified_sample: k exceeds the pool");
    std::mt19937_64 rng(detail::mix_seed(seed, 0x57a7));
    std::map<int, std::vector<std::size_t>> by_class;
    for (auto r : pool) by_class[y[r]].push_back(r);
    if (k < by_class.size()) throw EpisodeError("stratified_sample: k cannot cover every class");
    std::vector<std::size_t> out, rest;
    for (auto& [c, rows] : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        out.push_back(rows.front());
        rest.insert(rest.end(), rows.begin() + 1, rows.end());
    }
    std::sort(rest.begin(), rest.end());
    std::shuffle(rest.begin(), rest.end(), rng);
    out.insert(out.end(), rest.begin(), rest.begin() + (k - out.size()));
    std::sort(out.begin(), out.end());
    return out;
}

/// Greedy relevance/diversity selection of k training rows against the test
/// rows. Missing cells are filled with training medians for the distances.
inline std::vector<std::size_t> knn_sample(const LabeledTable& t, const std::vector<std::size_t>& train,
                                           const std::vector<std::size_t>& test, std::size_t k, double alpha) {
    std::vector<float> med(t.m, 0.0f);
    for (std::size_t j = 0; j < t.m; ++j) {
        std::vector<double> v;
        for (auto r : train)
            if (!std::isnan(t.at(r, j))) v.push_back(t.at(r, j));
        med[j] = static_cast<float>(detail::median_of(v));
    }
    auto filled = [&](std::size_t r) {
        std::vector<float> row(t.X.begin() + r * t.m, t.X.begin() + (r + 1) * t.m);
        for (std::size_t j = 0; j < t.m; ++j)
            if (std::isnan(row[j])) row[j] = med[j];
        return row;
    };
    std::vector<std::vector<float>> cand, qry;
    for (auto r : train) cand.push_back(filled(r));
    for (auto r : test) qry.push_back(filled(r));
    std::vector<const float*> cp, qp;
    std::vector<int> labels;
    for (std::size_t i = 0; i < train.size(); ++i) {
        cp.push_back(cand[i].data());
        labels.push_back(t.y[train[i]]);
    }
    for (const auto& q : qry) qp.push_back(q.data());
    std::vector<std::size_t> out;
    for (auto p : select_knn_support(cp, labels, qp, t.m, k, alpha)) out.push_back(train[p]);
    return out;
}

struct EvalRecord {
    std::string model;
    std::string dataset;
    std::string selection;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double weighted_f1 = 0.0;
};

struct KSummary {
    std::size_t k = 0;
    std::size_t cells = 0;
    double acc_mean = 0, acc_std = 0, f1_mean = 0, f1_std = 0;
};

struct EvalReport {
    std::vector<EvalRecord> records;
    std::vector<std::string> warnings;

    std::vector<std::string> models() const {
        std::vector<std::string> out;
        for (const auto& r : records)
            if (std::find(out.begin(), out.end(), r.model) == out.end()) out.push_back(r.model);
        return out;
    }

    /// Mean and population std over (dataset, seed) cells, per model and k.
    std::vector<KSummary> summary(const std::string& model) const {
        std::map<std::size_t, std::vector<const EvalRecord*>> by_k;
        for (const auto& r : records)
            if (r.model == model) by_k[r.k].push_back(&r);
        std::vector<KSummary> out;
        for (const auto& [k, rs] : by_k) {
            KSummary s;
            s.k = k;
            s.cells = rs.size();
            for (const auto* r : rs) {
                s.acc_mean += r->accuracy / double(rs.size());
                s.f1_mean += r->weighted_f1 / double(rs.size());
            }
            for (const auto* r : rs) {
                s.acc_std += std::pow(r->accuracy - s.acc_mean, 2) / double(rs.size());
                s.f1_std += std::pow(r->weighted_f1 - s.f1_mean, 2) / double(rs.size());
            }
            s.acc_std = std::sqrt(s.acc_std);
            s.f1_std = std::sqrt(s.f1_std);
            out.push_back(s);
        }
        return out;
    }

    /// Seed-averaged accuracy per dataset at one k.
    std::map<std::string, double> dataset_accuracy(const std::string& model, std::size_t k) const {
        std::map<std::string, std::pair<double, std::size_t>> acc;
        for (const auto& r : records)
            if (r.model == model && r.k == k) {
                acc[r.dataset].first += r.accuracy;
                ++acc[r.dataset].second;
            }
        std::map<std::string, double> out;
        for (const auto& [d, v] : acc) out[d] = v.first / double(v.second);
        return out;
    }

    /// Mean rank of each model over datasets scored at k by every model.
    std::map<std::string, double> ranks(std::size_t k) const {
        const auto ms = models();
        std::map<std::string, std::map<std::string, double>> per;
        std::set<std::string> common;
        bool first = true;
        for (const auto& m : ms) {
            per[m] = dataset_accuracy(m, k);
            std::set<std::string> names;
            for (const auto& [d, a] : per[m]) names.insert(d);
            if (first) {
                common = names;
                first = false;
            } else {
                std::set<std::string> both;
                std::set_intersection(common.begin(), common.end(), names.begin(), names.end(), std::inserter(both, both.end()));
                common = both;
            }
        }
        std::map<std::string, std::vector<double>> scores;
        for (const auto& m : ms)
            for (const auto& d : common) scores[m].push_back(per[m][d]);
        return mean_rank(scores);
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "model,dataset,selection,k,seed,accuracy,weighted_f1\n";
        out << std::setprecision(17);
        for (const auto& r : records)
            out << r.model << ',' << r.dataset << ',' << r.selection << ',' << r.k << ',' << r.seed << ',' << r.accuracy
                << ',' << r.weighted_f1 << '\n';
        return out.str();
    }

    static EvalReport from_csv(const std::string& text) {
        std::istringstream in(text);
        const RawTable t = parse_csv(in);
        const std::vector<std::string> want{"model", "dataset", "selection", "k", "seed", "accuracy", "weighted_f1"};
        if (t.header != want) throw DataError("eval report: unexpected header");
        EvalReport rep;
        for (const auto& row : t.rows) {
            EvalRecord r;
            r.model = row[0];
            r.dataset = row[1];
            r.selection = row[2];
            r.k = std::stoull(row[3]);
            r.seed = std::stoull(row[4]);
            if (!parse_number(row[5], r.accuracy) || !parse_number(row[6], r.weighted_f1))
                throw DataError("eval report: bad metric value");
            rep.records.push_back(r);
        }
        return rep;
    }

    /// Human-readable table: mean +- std per k for each model, then mean ranks.
    std::string summary_table() const {
        std::ostringstream out;
        out << std::fixed << std::setprecision(4);
        const auto ms = models();
        for (const auto& m : ms) {
            out << "model " << m << "\n";
            out << "     k  cells   accuracy          weighted F1\n";
            for (const auto& s : summary(m))
                out << std::setw(6) << s.k << std::setw(7) << s.cells << "   " << s.acc_mean << " +- " << s.acc_std << "   "
                    << s.f1_mean << " +- " << s.f1_std << "\n";
        }
        if (ms.size() > 1 && !records.empty()) {
            std::set<std::size_t> ks;
            for (const auto& r : records) ks.insert(r.k);
            out << "mean rank (accuracy) per k\n";
            for (auto k : ks) {
                out << std::setw(6) << k;
                for (const auto& [m, rk] : ranks(k)) out << "  " << m << '=' << std::setprecision(2) << rk << std::setprecision(4);
                out << "\n";
            }
        }
        return out.str();
    }
};

/// Few-shot sweep of one model: per dataset a fixed train/test split, then per
/// k and seed a support draw of k training rows, fit on the support and predict
/// every test row. Cells with k below the class count or above the training
/// size are skipped with a warning.
inline void run_fewshot(const std::vector<Dataset>& datasets, const FewshotConfig& cfg, const Model& model,
                        const std::string& model_name, EvalReport& report) {
    cfg.pipeline.validate();
    if (cfg.seeds < 1) throw ConfigError("fewshot: need at least one seed");
    if (cfg.k_list.empty()) throw ConfigError("fewshot: empty k list");
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        const auto& ds = datasets[d];
        const auto& t = ds.table;
        auto [train, test] = train_test_split(t, cfg.test_fraction, detail::mix_seed(cfg.base_seed, d));
        if (test.empty()) {
            report.warnings.push_back(ds.name + ": no test rows, skipped");
            continue;
        }
        if (cfg.max_test_rows && test.size() > cfg.max_test_rows) test.resize(cfg.max_test_rows);
        std::vector<double> Xq;
        std::vector<int> truth;
        for (auto r : test) {
            Xq.insert(Xq.end(), t.X.begin() + r * t.m, t.X.begin() + (r + 1) * t.m);
            truth.push_back(t.y[r]);
        }
        for (std::size_t k : cfg.k_list) {
            if (k < t.num_classes) {
                report.warnings.push_back(ds.name + ": k=" + std::to_string(k) + " is below the class count " +
                                          std::to_string(t.num_classes) + ", skipped");
                continue;
            }
            if (k > train.size()) {
                report.warnings.push_back(ds.name + ": k=" + std::to_string(k) + " exceeds the " +
                                          std::to_string(train.size()) + " training rows, skipped");
                continue;
            }
            for (std::size_t s = 0; s < cfg.seeds; ++s) {
                const std::uint64_t seed = cfg.base_seed + s;
                const auto support = cfg.selection == SelectionStrategy::uniform
                                         ? stratified_sample(train, t.y, k, detail::mix_seed(seed, d * 1000 + k))
                                         : knn_sample(t, train, test, k, cfg.knn_alpha);
                std::vector<double> Xs;
                std::vector<int> ys;
                for (auto r : support) {
                    Xs.insert(Xs.end(), t.X.begin() + r * t.m, t.X.begin() + (r + 1) * t.m);
                    ys.push_back(t.y[r]);
                }
                PipelineConfig pc = cfg.pipeline;
                pc.seed = detail::mix_seed(cfg.pipeline.seed, seed);
                const auto state = fit_numeric(Xs, support.size(), t.m, ys, pc);
                const auto probs = predict_proba_encoded(Xq, state, model);
                const auto preds = argmax_rows(probs, state.num_classes);
                const auto mt = compute_metrics(preds, truth);
                report.records.push_back({model_name, ds.name, selection_name(cfg.selection), k, seed, mt.accuracy, mt.weighted_f1});
            }
        }
    }
}

inline EvalReport run_fewshot(const std::vector<Dataset>& datasets, const FewshotConfig& cfg, const Model& model,
                              const std::string& model_name = "model") {
    EvalReport rep;
    run_fewshot(datasets, cfg, model, model_name, rep);
    return rep;
}

inline EvalReport run_fewshot(const std::vector<Dataset>& datasets, const FewshotConfig& cfg,
                              const std::vector<std::string>& model_paths) {
    EvalReport rep;
    std::map<std::string, std::size_t> used;
    for (const auto& p : model_paths) {
        // file stem, suffixed when two checkpoints share one
        std::string name = std::filesystem::path(p).stem().string();
        if (used[name]++) name += "#" + std::to_string(used[name]);
        run_fewshot(datasets, cfg, Model::load(p), name, rep);
    }
    return rep;
}

}  // namespace biax
