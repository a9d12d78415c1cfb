#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "biax/trainer.hpp"
#include "test_support.hpp"

using namespace biax;

namespace {

ModelConfig small_model(std::uint64_t seed = 1) {
    ModelConfig c;
    c.dim = 8;
    c.n_cls = 2;
    c.col_blocks = 1;
    c.inducing_points = 4;
    c.col_heads = 2;
    c.groups = 2;
    c.row_blocks = 1;
    c.row_heads = 2;
    c.icl_blocks = 1;
    c.icl_heads = 2;
    c.max_classes = 4;
    c.seed = seed;
    return c;
}

PriorConfig small_prior() {
    PriorConfig p;
    p.n_min = 16;
    p.n_max = 32;
    p.m_min = 2;
    p.m_max = 5;
    p.c_min = 2;
    p.c_max = 3;
    return p;
}

TrainConfig small_train(const std::string& dir) {
    TrainConfig t;
    t.steps = 3;
    t.episodes_per_step = 4;
    t.micro_batch_size = 2;
    t.episodes_per_table = 2;
    t.warmup_steps = 1;
    t.lr = 1e-3;
    t.max_rows = 24;
    t.checkpoint_dir = dir;
    return t;
}

std::string temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

// Several episodes of one shape so micro-batches actually stack.
std::vector<PreparedEpisode> same_shape_episodes(std::size_t count, std::uint64_t seed) {
    PriorConfig p = small_prior();
    p.n_min = p.n_max = 20;
    std::vector<PreparedEpisode> out;
    for (std::size_t i = 0; i < count; ++i) {
        auto t = sample_table(p, seed + i);
        auto ep = make_episode_random(t, 10, 6, seed * 31 + i);
        out.push_back(prepare_episode(t, ep));
    }
    return out;
}

TEST(Loss, UniformLogitsGiveLogC) {
    for (int C : {2, 3, 7}) {
        Tensor logits = Tensor::zeros({5, 8}, true);
        std::vector<int> targets{0, 1, -1, C - 1, 0}, counts(5, C);
        EXPECT_NEAR(cross_entropy(logits, targets, counts).item(), std::log(double(C)), 1e-6);
    }
}

TEST(Loss, ConfidentCorrectLogitsGiveNearZero) {
    std::vector<float> v(3 * 4, -20.0f);
    std::vector<int> targets{2, 0, 1};
    for (std::size_t r = 0; r < 3; ++r) v[r * 4 + targets[r]] = 20.0f;
    Tensor logits = Tensor({3, 4}, v, true);
    EXPECT_LT(cross_entropy(logits, targets, {3, 3, 3}).item(), 1e-6);
}

TEST(Loss, EpisodeLossMatchesScalarLoop) {
    Model model(small_model());
    auto eps = same_shape_episodes(1, 5);
    const auto& e = eps[0];
    auto lr = episode_loss(model, e.input, e.query_labels);
    auto tb = stack_episodes({&e.input}, {&e.query_labels});
    const Tensor logits = model.logits(tb);
    const std::size_t cmax = model.config().max_classes, C = e.input.num_classes;
    double total = 0;
    for (std::size_t i = 0; i < e.query_labels.size(); ++i) {
        const float* x = logits.values().data() + (e.input.n_train() + i) * cmax;
        double mx = -1e300, s = 0;
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, double(x[c]));
        for (std::size_t c = 0; c < C; ++c) s += std::exp(double(x[c]) - mx);
        total += mx + std::log(s) - x[e.query_labels[i]];
    }
    EXPECT_NEAR(lr.loss.item(), total / double(e.query_labels.size()), 1e-5);
    EXPECT_EQ(lr.queries, e.query_labels.size());
}

TEST(Loss, SupportLabelsCarryNoLoss) {
    // Flipping a query label changes the loss; the support labels feed the model
    // but never appear as targets.
    Model model(small_model());
    auto e = same_shape_episodes(1, 9)[0];
    auto tb = stack_episodes({&e.input}, {&e.query_labels});
    for (std::size_t t = 0; t < tb.n_train; ++t) EXPECT_EQ(tb.labels[t], e.input.support_labels[t]);
    auto base = batch_loss(model, tb);
    EXPECT_EQ(base.queries, tb.rows - tb.n_train);
}

TEST(EpisodeInput, SupportFirstAndStandardizedBySupport) {
    PriorConfig p = small_prior();
    auto t = sample_table(p, 3);
    auto ep = make_episode_random(t, 8, 5, 1);
    auto in = episode_input(t, ep);
    EXPECT_EQ(in.rows, 13u);
    EXPECT_EQ(in.n_train(), 8u);
    EXPECT_EQ(in.support_labels, ep.support_labels);
    for (std::size_t j = 0; j < t.m; ++j) {
        double mean = 0;
        for (std::size_t r = 0; r < 8; ++r) mean += in.values[r * t.m + j];
        EXPECT_NEAR(mean / 8, 0.0, 0.3);  // clipping can shift it slightly
    }
    for (float v : in.values) EXPECT_LE(std::abs(v), 4.0f);
}

TEST(StackEpisodes, PadsFeaturesWithSkipCells) {
    EpisodeInput a, b;
    a.features = 2;
    b.features = 3;
    a.rows = b.rows = 3;
    a.num_classes = b.num_classes = 2;
    a.support_labels = b.support_labels = {0, 1};
    a.values.assign(6, 1.0f);
    b.values.assign(9, 2.0f);
    std::vector<int> qa{1}, qb{0};
    auto tb = stack_episodes({&a, &b}, {&qa, &qb});
    EXPECT_EQ(tb.features, 3u);
    EXPECT_EQ(tb.active_features, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(tb.at(0, 1, 2), kSkipValue);
    EXPECT_EQ(tb.at(1, 1, 2), 2.0f);
    EXPECT_EQ(tb.labels, (std::vector<int>{0, 1, 1, 0, 1, 0}));
    EpisodeInput c = a;
    c.rows = 4;
    c.values.assign(8, 0.0f);
    EXPECT_THROW(stack_episodes({&a, &c}, {&qa, &qa}), ContractError);
}

TEST(Accumulation, MicroBatchesMatchOneBatch) {
    auto eps = same_shape_episodes(8, 20);
    Model model(small_model(3));
    auto grads = [&](std::size_t micro) {
        auto params = model.parameters();
        model.zero_grad();
        auto r = accumulate_gradients(model, eps, micro);
        std::vector<float> g;
        for (auto& [name, p] : params) g.insert(g.end(), p.grad().begin(), p.grad().end());
        return std::make_pair(r.loss, g);
    };
    auto [loss8, g8] = grads(8);
    auto [loss2, g2] = grads(2);
    auto [loss1, g1] = grads(1);
    EXPECT_NEAR(loss8, loss2, 1e-5);
    EXPECT_NEAR(loss8, loss1, 1e-5);
    ASSERT_EQ(g8.size(), g2.size());
    double scale = 0;
    for (float v : g8) scale = std::max(scale, double(std::abs(v)));
    ASSERT_GT(scale, 0.0);
    for (std::size_t i = 0; i < g8.size(); ++i) {
        ASSERT_NEAR(g8[i], g2[i], 1e-5 * std::max(1.0, scale)) << i;
        ASSERT_NEAR(g8[i], g1[i], 1e-5 * std::max(1.0, scale)) << i;
    }
}

TEST(Accumulation, MixedShapesAverageOverEpisodes) {
    // Mean over episodes, whatever their query counts.
    PriorConfig p = small_prior();
    auto t = sample_table(p, 4);
    std::vector<PreparedEpisode> eps{prepare_episode(t, make_episode_random(t, 6, 3, 0)),
                                     prepare_episode(t, make_episode_random(t, 8, 7, 1))};
    Model model(small_model());
    model.zero_grad();
    auto r = accumulate_gradients(model, eps, 4);
    const double l0 = episode_loss(model, eps[0].input, eps[0].query_labels).loss.item();
    const double l1 = episode_loss(model, eps[1].input, eps[1].query_labels).loss.item();
    EXPECT_NEAR(r.loss, 0.5 * (l0 + l1), 1e-6);
    EXPECT_EQ(r.queries, 10u);
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
    Model model(small_model());
    std::vector<float> before;
    for (auto& [n, p] : model.parameters()) before.insert(before.end(), p.values().begin(), p.values().end());
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.warmup_steps = 0;
    cfg.micro_batch_size = 2;
    Adam opt;
    auto eps = same_shape_episodes(4, 40);
    for (std::size_t s = 0; s < 3; ++s) {
        auto sm = train_step(model, opt, eps, cfg, s);
        EXPECT_EQ(sm.lr, 0.0);
        EXPECT_GT(sm.grad_norm, 0.0);
    }
    std::vector<float> after;
    for (auto& [n, p] : model.parameters()) after.insert(after.end(), p.values().begin(), p.values().end());
    EXPECT_EQ(before, after);
}

TEST(Optimizer, FirstAdamStepMovesEachWeightByLr) {
    // With bias correction the first update is lr * g / (|g| + eps).
    Tensor w = Tensor({3}, {1.0f, 2.0f, 3.0f}, true);
    w.mutable_grad()[0] = 0.5f;
    w.mutable_grad()[1] = -2.0f;
    w.mutable_grad()[2] = 0.0f;
    NamedParameters params{{"w", w}};
    Adam opt;
    opt.step(params, 0.1);
    EXPECT_NEAR(w.values()[0], 0.9f, 1e-6);
    EXPECT_NEAR(w.values()[1], 2.1f, 1e-6);
    EXPECT_EQ(w.values()[2], 3.0f);
}

TEST(Optimizer, ClippingScalesToMaxNorm) {
    Tensor a({2}, {0.0f, 0.0f}, true), b({1}, {0.0f}, true);
    a.mutable_grad()[0] = 3.0f;
    a.mutable_grad()[1] = 4.0f;
    b.mutable_grad()[0] = 12.0f;
    NamedParameters params{{"a", a}, {"b", b}};
    EXPECT_NEAR(clip_gradients(params, 1.0), 13.0, 1e-9);
    EXPECT_NEAR(gradient_norm(params), 1.0, 1e-6);
    EXPECT_NEAR(a.grad()[1] / a.grad()[0], 4.0 / 3.0, 1e-6);
    // below the threshold nothing changes
    EXPECT_NEAR(clip_gradients(params, 5.0), 1.0, 1e-6);
    EXPECT_NEAR(gradient_norm(params), 1.0, 1e-6);
}

TEST(Schedule, WarmupThenCosine) {
    TrainConfig c;
    c.lr = 1.0;
    c.warmup_steps = 4;
    c.steps = 14;
    c.min_lr_fraction = 0.1;
    EXPECT_NEAR(learning_rate(c, 0), 0.25, 1e-12);
    EXPECT_NEAR(learning_rate(c, 3), 1.0, 1e-12);
    EXPECT_NEAR(learning_rate(c, 4), 1.0, 1e-12);
    EXPECT_NEAR(learning_rate(c, 9), 0.55, 1e-12);
    EXPECT_NEAR(learning_rate(c, 14), 0.1, 1e-12);
    EXPECT_NEAR(learning_rate(c, 100), 0.1, 1e-12);
    for (std::size_t s = 4; s < 14; ++s) EXPECT_GE(learning_rate(c, s), learning_rate(c, s + 1));
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig c;
    c.episodes_per_step = 10;
    c.micro_batch_size = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c.micro_batch_size = 5;
    EXPECT_NO_THROW(c.validate());
    c.selection = SupportSelection::knn;
    EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
    EXPECT_THROW(TrainConfig::from_json({{"selection", "nearest"}}), ConfigError);
}

std::vector<nlohmann::json> read_log(const std::string& path) {
    std::ifstream in(path);
    std::vector<nlohmann::json> out;
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("wall_ms"));
        j.erase("wall_ms");
        out.push_back(j);
    }
    return out;
}

TEST(MetaTrain, SameSeedGivesIdenticalLogAndCheckpoint) {
    const auto dir = temp_dir("biax_train_det");
    auto run = [&](const std::string& sub) {
        auto cfg = small_train(dir + "/" + sub);
        cfg.log_path = dir + "/" + sub + ".ndjson";
        auto res = meta_train(cfg, small_prior(), small_model());
        return std::make_pair(read_log(cfg.log_path), load_checkpoint(res.checkpoint));
    };
    auto [log_a, ck_a] = run("a");
    auto [log_b, ck_b] = run("b");
    ASSERT_EQ(log_a.size(), 3u);
    EXPECT_EQ(log_a, log_b);
    for (const auto& rec : log_a)
        for (auto key : {"step", "loss", "query_acc", "lr"}) EXPECT_TRUE(rec.contains(key));
    ASSERT_EQ(ck_a.tensors.size(), ck_b.tensors.size());
    for (std::size_t i = 0; i < ck_a.tensors.size(); ++i) EXPECT_EQ(ck_a.tensors[i].data, ck_b.tensors[i].data);
    std::filesystem::remove_all(dir);
}

TEST(MetaTrain, CheckpointsAtIntervalAndEnd) {
    const auto dir = temp_dir("biax_train_ckpt");
    auto cfg = small_train(dir);
    cfg.steps = 4;
    cfg.checkpoint_interval = 2;
    Model trained(small_model());
    auto res = meta_train(cfg, small_prior(), small_model(), &trained);
    ASSERT_EQ(res.checkpoints.size(), 2u);
    EXPECT_TRUE(std::filesystem::exists(dir + "/step_2.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/final.ckpt"));
    auto reloaded = Model::load(res.checkpoint);
    auto a = trained.parameters(), b = reloaded.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_TRUE(std::equal(a[i].second.values().begin(), a[i].second.values().end(), b[i].second.values().begin()));
    }
    std::filesystem::remove_all(dir);
}

TEST(MetaTrain, UnwritableCheckpointDirReportsProgress) {
    const auto dir = temp_dir("biax_train_bad");
    const auto blocker = dir + "/file";
    std::ofstream(blocker) << "x";
    auto cfg = small_train(blocker + "/sub");
    cfg.steps = 1;
    try {
        meta_train(cfg, small_prior(), small_model());
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("1 completed steps"), std::string::npos) << e.what();
    }
    std::filesystem::remove_all(dir);
}

TEST(MetaTrain, RejectsPriorWiderThanModelClasses) {
    auto p = small_prior();
    p.c_max = 6;
    p.n_min = 20;
    EXPECT_THROW(meta_train(small_train(temp_dir("biax_train_c")), p, small_model()), ConfigError);
}

TEST(MetaTrain, EveryParameterMovesAfterOneStep) {
    Model model(small_model());
    std::vector<std::vector<float>> before;
    for (auto& [n, p] : model.parameters()) before.emplace_back(p.values().begin(), p.values().end());
    TrainConfig cfg;
    cfg.warmup_steps = 0;
    cfg.lr = 1e-3;
    cfg.micro_batch_size = 4;
    Adam opt;
    train_step(model, opt, same_shape_episodes(4, 60), cfg, 0);
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& v = params[i].second.values();
        EXPECT_FALSE(std::equal(v.begin(), v.end(), before[i].begin())) << params[i].first;
    }
}

TEST(MetaTrain, LossTrendsDownOnFixedEpisodes) {
    // Repeated steps on one set of episodes must fit them.
    Model model(small_model(7));
    TrainConfig cfg;
    cfg.warmup_steps = 0;
    cfg.lr = 3e-3;
    cfg.steps = 50;
    cfg.micro_batch_size = 4;
    Adam opt;
    auto eps = same_shape_episodes(8, 80);
    std::vector<double> losses;
    for (std::size_t s = 0; s < 50; ++s) losses.push_back(train_step(model, opt, eps, cfg, s).loss);
    std::vector<double> x(losses.size());
    std::iota(x.begin(), x.end(), 0.0);
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    const double my = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (losses[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    EXPECT_LT(num / den, 0.0);
    EXPECT_LT(losses.back(), losses.front());
}

}  // namespace
