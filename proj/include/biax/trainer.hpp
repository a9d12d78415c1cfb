#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "biax/episodes.hpp"
#include "biax/model.hpp"
#include "biax/synthetic_prior.hpp"

namespace biax {

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t episodes_per_step = 64;
    std::size_t micro_batch_size = 8;
    double lr = 3e-4;
    std::size_t warmup_steps = 100;
    std::size_t decay_steps = 0;   // cosine horizon; 0 means `steps`
    double min_lr_fraction = 0.1;  // floor of the cosine decay
    double clip_norm = 1.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
    std::string checkpoint_dir = "checkpoints";
    std::string log_path;  // NDJSON; empty disables
    // episode construction
    std::size_t episodes_per_table = 4;
    SupportSelection selection = SupportSelection::random;
    double knn_alpha = 0.5;
    std::size_t max_rows = 128;
    double support_fraction_min = 0.3, support_fraction_max = 0.8;
    float clip_z = 4.0f;

    void validate() const {
        if (steps < 1) throw ConfigError("train: steps must be positive");
        if (micro_batch_size < 1 || episodes_per_step < 1 || episodes_per_step % micro_batch_size != 0) {
            throw ConfigError("train: episodes_per_step must be a positive multiple of micro_batch_size");
        }
        if (episodes_per_table < 1) throw ConfigError("train: episodes_per_table must be positive");
        if (lr < 0 || clip_norm <= 0) throw ConfigError("train: need lr >= 0 and clip_norm > 0");
    }

    nlohmann::json to_json() const {
        return {{"steps", steps},
                {"episodes_per_step", episodes_per_step},
                {"micro_batch_size", micro_batch_size},
                {"lr", lr},
                {"warmup_steps", warmup_steps},
                {"decay_steps", decay_steps},
                {"min_lr_fraction", min_lr_fraction},
                {"clip_norm", clip_norm},
                {"seed", seed},
                {"checkpoint_interval", checkpoint_interval},
                {"checkpoint_dir", checkpoint_dir},
                {"log_path", log_path},
                {"episodes_per_table", episodes_per_table},
                {"selection", selection == SupportSelection::random ? "random" : "knn"},
                {"knn_alpha", knn_alpha},
                {"max_rows", max_rows},
                {"support_fraction_min", support_fraction_min},
                {"support_fraction_max", support_fraction_max},
                {"clip_z", clip_z}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("steps", c.steps);
        get("episodes_per_step", c.episodes_per_step);
        get("micro_batch_size", c.micro_batch_size);
        get("lr", c.lr);
        get("warmup_steps", c.warmup_steps);
        get("decay_steps", c.decay_steps);
        get("min_lr_fraction", c.min_lr_fraction);
        get("clip_norm", c.clip_norm);
        get("seed", c.seed);
        get("checkpoint_interval", c.checkpoint_interval);
        get("checkpoint_dir", c.checkpoint_dir);
        get("log_path", c.log_path);
        get("episodes_per_table", c.episodes_per_table);
        if (j.contains("selection")) {
            const auto s = j.at("selection").get<std::string>();
            if (s != "random" && s != "knn") throw ConfigError("selection must be random or knn");
            c.selection = s == "random" ? SupportSelection::random : SupportSelection::knn;
        }
        get("knn_alpha", c.knn_alpha);
        get("max_rows", c.max_rows);
        get("support_fraction_min", c.support_fraction_min);
        get("support_fraction_max", c.support_fraction_max);
        get("clip_z", c.clip_z);
        return c;
    }
};

/// Support rows first, then query rows; features standardized with support
/// statistics and clipped to +-clip_z, as at inference time.
inline EpisodeInput episode_input(const LabeledTable& t, const Episode& ep, float clip_z = 4.0f) {
    EpisodeInput in;
    in.features = t.m;
    in.rows = ep.rows();
    in.num_classes = ep.num_classes;
    in.support_labels = ep.support_labels;
    std::vector<const float*> support;
    for (auto r : ep.support_indices) support.push_back(t.X.data() + r * t.m);
    const FeatureScaling sc = fit_scaling(support, t.m);
    auto push = [&](std::size_t r) {
        const auto z = sc.apply(t.X.data() + r * t.m);
        for (double v : z) in.values.push_back(static_cast<float>(std::clamp(v, double(-clip_z), double(clip_z))));
    };
    for (auto r : ep.support_indices) push(r);
    for (auto r : ep.query_indices) push(r);
    return in;
}

/// Stacks episodes with equal row and support counts into one batch, padding
/// the feature axis with skip cells. Query labels go into `labels` for the loss.
inline TableBatch stack_episodes(const std::vector<const EpisodeInput*>& eps, const std::vector<const std::vector<int>*>& query_labels) {
    if (eps.empty()) throw ContractError("stack_episodes: empty batch");
    TableBatch tb;
    tb.batch = eps.size();
    tb.rows = eps.front()->rows;
    tb.n_train = eps.front()->n_train();
    for (const auto* e : eps) {
        if (e->rows != tb.rows || e->n_train() != tb.n_train) throw ContractError("stack_episodes: mixed episode sizes");
        tb.features = std::max(tb.features, e->features);
    }
    tb.values.assign(tb.batch * tb.rows * tb.features, tb.skip_value);
    tb.labels.assign(tb.batch * tb.rows, -1);
    for (std::size_t b = 0; b < eps.size(); ++b) {
        const auto* e = eps[b];
        tb.active_features.push_back(e->features);
        tb.num_classes.push_back(static_cast<int>(e->num_classes));
        for (std::size_t t = 0; t < tb.rows; ++t)
            for (std::size_t j = 0; j < e->features; ++j) tb.at(b, t, j) = e->values[t * e->features + j];
        for (std::size_t t = 0; t < tb.n_train; ++t) tb.labels[b * tb.rows + t] = e->support_labels[t];
        const auto& q = *query_labels[b];
        for (std::size_t i = 0; i < q.size(); ++i) tb.labels[b * tb.rows + tb.n_train + i] = q[i];
    }
    return tb;
}

struct LossResult {
    Tensor loss;  // mean cross-entropy over query rows
    std::size_t correct = 0;
    std::size_t queries = 0;
};

/// Query-row cross-entropy of a stacked batch; support rows carry no loss terms.
/// Each row's softmax runs over its task's first C logits.
inline LossResult batch_loss(const Model& model, const TableBatch& tb) {
    if (tb.num_classes.size() != tb.batch) throw ContractError("batch_loss: class counts required");
    const std::size_t cmax = model.config().max_classes;
    for (int c : tb.num_classes)
        if (c < 2 || std::size_t(c) > cmax) throw ContractError("batch_loss: training needs 2 <= C <= C_max");
    const Tensor logits = model.logits(tb);
    std::vector<int> targets(tb.batch * tb.rows, -1), counts(tb.batch * tb.rows, 0);
    LossResult out;
    for (std::size_t b = 0; b < tb.batch; ++b)
        for (std::size_t t = 0; t < tb.rows; ++t) {
            const std::size_t r = b * tb.rows + t;
            counts[r] = tb.num_classes[b];
            if (t < tb.n_train) continue;
            targets[r] = tb.labels[r];
            const float* row = logits.values().data() + r * cmax;
            const auto pred = std::max_element(row, row + counts[r]) - row;
            out.correct += pred == targets[r];
            ++out.queries;
        }
    out.loss = cross_entropy(reshape(logits, {tb.batch * tb.rows, cmax}), targets, counts);
    return out;
}

/// Loss of a single episode.
inline LossResult episode_loss(const Model& model, const EpisodeInput& ep, const std::vector<int>& query_labels) {
    return batch_loss(model, stack_episodes({&ep}, {&query_labels}));
}

struct PreparedEpisode {
    EpisodeInput input;
    std::vector<int> query_labels;
};

inline PreparedEpisode prepare_episode(const LabeledTable& t, const Episode& ep, float clip_z = 4.0f) {
    return {episode_input(t, ep, clip_z), ep.query_labels};
}

struct AccumulateResult {
    double loss = 0.0;  // mean over episodes of per-episode query loss
    std::size_t correct = 0, queries = 0;
};

/// Accumulates sum over micro-batches of (batch loss * batch size) / episodes
/// into the parameter gradients. Episodes are grouped by (rows, n_train) and
/// each group is cut into micro-batches of at most `micro_batch_size`, in
/// first-appearance order so the reduction order is fixed.
inline AccumulateResult accumulate_gradients(const Model& model, const std::vector<PreparedEpisode>& eps,
                                             std::size_t micro_batch_size) {
    if (eps.empty()) throw ContractError("accumulate_gradients: no episodes");
    std::vector<std::pair<std::size_t, std::size_t>> keys;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const auto key = std::make_pair(eps[i].input.rows, eps[i].input.n_train());
        if (!groups.count(key)) keys.push_back(key);
        groups[key].push_back(i);
    }
    AccumulateResult res;
    const double inv_total = 1.0 / double(eps.size());
    for (const auto& key : keys) {
        const auto& idx = groups[key];
        for (std::size_t start = 0; start < idx.size(); start += micro_batch_size) {
            std::vector<const EpisodeInput*> ins;
            std::vector<const std::vector<int>*> labs;
            for (std::size_t k = start; k < std::min(idx.size(), start + micro_batch_size); ++k) {
                ins.push_back(&eps[idx[k]].input);
                labs.push_back(&eps[idx[k]].query_labels);
            }
            auto lr = batch_loss(model, stack_episodes(ins, labs));
            const float weight = static_cast<float>(double(ins.size()) * inv_total);
            const double value = lr.loss.item();
            res.loss += value * double(ins.size()) * inv_total;
            res.correct += lr.correct;
            res.queries += lr.queries;
            if (std::isfinite(value)) scale(lr.loss, weight).backward();
        }
    }
    return res;
}

/// Global L2 norm of all gradients.
inline double gradient_norm(const NamedParameters& params) {
    double s = 0;
    for (const auto& [name, p] : params)
        for (float g : p.grad()) s += double(g) * g;
    return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most max_norm. Returns the norm before clipping.
inline double clip_gradients(NamedParameters& params, double max_norm) {
    const double norm = gradient_norm(params);
    if (norm > max_norm && norm > 0) {
        const double f = max_norm / norm;
        for (auto& [name, p] : params)
            for (float& g : p.mutable_grad()) g = static_cast<float>(g * f);
    }
    return norm;
}

/// Linear warmup to the peak rate, then cosine decay to min_lr_fraction * lr.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) return cfg.lr * double(step + 1) / double(cfg.warmup_steps);
    const std::size_t horizon = cfg.decay_steps ? cfg.decay_steps : cfg.steps;
    if (horizon <= cfg.warmup_steps) return cfg.lr;
    const double progress = std::min(1.0, double(step - cfg.warmup_steps) / double(horizon - cfg.warmup_steps));
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return cfg.lr * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

/// Adaptive moment estimation, no weight decay.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(NamedParameters& params, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
        for (auto& [name, p] : params) {
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.numel(), 0.0f);
                v.assign(p.numel(), 0.0f);
            }
            auto g = p.grad();
            auto w = p.mutable_values();
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = float(b1_ * m[i] + (1 - b1_) * g[i]);
                v[i] = float(b2_ * v[i] + (1 - b2_) * double(g[i]) * g[i]);
                const double mhat = m[i] / c1, vhat = v[i] / c2;
                w[i] = float(w[i] - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    std::size_t steps_taken() const { return t_; }

private:
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<float>> m_, v_;
};

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double query_acc = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    bool skipped = false;
};

/// One optimizer update from a chunk of episodes.
inline StepMetrics train_step(Model& model, Adam& opt, const std::vector<PreparedEpisode>& chunk, const TrainConfig& cfg,
                              std::size_t step) {
    auto params = model.parameters();
    for (auto& [name, p] : params) p.zero_grad();
    const auto acc = accumulate_gradients(model, chunk, cfg.micro_batch_size);
    StepMetrics sm;
    sm.step = step;
    sm.loss = acc.loss;
    sm.query_acc = acc.queries ? double(acc.correct) / double(acc.queries) : 0.0;
    sm.lr = learning_rate(cfg, step);
    sm.grad_norm = gradient_norm(params);
    if (!std::isfinite(sm.loss) || !std::isfinite(sm.grad_norm)) {
        sm.skipped = true;
        return sm;
    }
    clip_gradients(params, cfg.clip_norm);
    opt.step(params, sm.lr);
    return sm;
}

/// Episodes for one training step: fresh tables from the prior, then a stream over them.
inline std::vector<PreparedEpisode> sample_step_episodes(const TrainConfig& cfg, const PriorConfig& prior, std::size_t step) {
    const std::size_t n_tables = (cfg.episodes_per_step + cfg.episodes_per_table - 1) / cfg.episodes_per_table;
    std::vector<LabeledTable> tables;
    for (std::size_t i = 0; i < n_tables; ++i)
        tables.push_back(sample_table(prior, detail::mix_seed(detail::mix_seed(cfg.seed ^ prior.seed, step), i)));
    StreamConfig sc;
    sc.episodes_per_table = cfg.episodes_per_table;
    sc.chunk_size = cfg.episodes_per_step;
    sc.mode = cfg.selection;
    sc.seed = detail::mix_seed(cfg.seed, 0x5354ull + step);
    sc.alpha = cfg.knn_alpha;
    sc.max_rows = cfg.max_rows;
    sc.support_fraction_min = cfg.support_fraction_min;
    sc.support_fraction_max = cfg.support_fraction_max;
    EpisodeStream stream(tables, sc);
    std::vector<PreparedEpisode> out;
    auto chunk = stream.next();
    for (const auto& ep : *chunk) out.push_back(prepare_episode(tables[ep.table], ep, cfg.clip_z));
    return out;
}

/// Query accuracy of a model on the given prepared episodes.
inline double evaluate_accuracy(const Model& model, const std::vector<PreparedEpisode>& eps) {
    std::size_t correct = 0, total = 0;
    for (const auto& e : eps) {
        auto r = episode_loss(model, e.input, e.query_labels);
        correct += r.correct;
        total += r.queries;
    }
    return total ? double(correct) / double(total) : 0.0;
}

struct TrainResult {
    std::string checkpoint;
    std::vector<StepMetrics> history;
    std::vector<std::string> checkpoints;
};

/// Episodic meta-training loop. Writes an NDJSON log line per step and
/// checkpoints at the configured interval and at the end. `on_step` may be
/// used for progress reporting.
inline TrainResult meta_train(const TrainConfig& cfg, const PriorConfig& prior, const ModelConfig& model_cfg,
                              Model* trained = nullptr, const std::function<void(const StepMetrics&)>& on_step = {}) {
    cfg.validate();
    prior.validate();
    if (prior.c_max > model_cfg.max_classes) {
        throw ConfigError("train: prior class range exceeds C_max; training never uses the class tree");
    }
    Model model(model_cfg);
    Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open training log '" + cfg.log_path + "'");
    }
    TrainResult result;
    const nlohmann::json echo{{"train", cfg.to_json()}, {"prior", prior.to_json()}};
    auto write_ckpt = [&](const std::string& name, std::size_t completed) {
        const auto path = (std::filesystem::path(cfg.checkpoint_dir) / name).string();
        try {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            model.save(path, echo);
        } catch (const std::exception& e) {
            throw CheckpointError(std::string(e.what()) + " (training stopped after " + std::to_string(completed) +
                                  " completed steps" + (cfg.log_path.empty() ? "" : "; log at " + cfg.log_path) + ")");
        }
        result.checkpoints.push_back(path);
        return path;
    };
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto eps = sample_step_episodes(cfg, prior, step);
        const auto sm = train_step(model, opt, eps, cfg, step);
        result.history.push_back(sm);
        if (log) {
            const auto wall =
                std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json rec{{"step", sm.step}, {"loss", sm.loss}, {"query_acc", sm.query_acc}, {"lr", sm.lr},
                               {"wall_ms", wall}};
            if (sm.skipped) rec["event"] = "skipped_non_finite";
            log << rec.dump() << '\n';
            log.flush();
        }
        if (on_step) on_step(sm);
        if (cfg.checkpoint_interval && (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.steps) {
            write_ckpt("step_" + std::to_string(step + 1) + ".ckpt", step + 1);
        }
    }
    result.checkpoint = write_ckpt("final.ckpt", cfg.steps);
    if (trained) *trained = std::move(model);
    return result;
}

}  // namespace biax
