#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "biax/eval.hpp"
#include "biax/synthetic_prior.hpp"

using namespace biax;

namespace {

ModelConfig tiny_model() {
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
    c.seed = 2;
    return c;
}

Dataset synthetic(std::uint64_t seed, std::size_t n = 60) {
    PriorConfig p;
    p.n_min = p.n_max = n;
    p.m_min = 2;
    p.m_max = 4;
    p.c_min = 2;
    p.c_max = 3;
    Dataset d;
    d.name = "syn" + std::to_string(seed);
    d.table = sample_table(p, seed);
    return d;
}

TEST(Metrics, PerfectPredictions) {
    auto m = compute_metrics({0, 1, 2, 1}, {0, 1, 2, 1});
    EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(m.weighted_f1, 1.0);
}

TEST(Metrics, HandConfusionMatrix) {
    auto m = compute_metrics({0, 0, 1, 1}, {0, 0, 0, 1});
    EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
    // class 0: precision 1, recall 2/3, F1 0.8; class 1: precision 1/2, recall 1, F1 2/3
    EXPECT_NEAR(m.weighted_f1, 0.75 * 0.8 + 0.25 * 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(m.weighted_f1, 0.7667, 1e-4);
}

TEST(Metrics, ConstantPredictorOnBalancedSet) {
    auto m = compute_metrics({0, 0, 0, 0}, {0, 1, 0, 1});
    EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
    // F1 for class 0 is 2/3, class 1 has none correct
    EXPECT_NEAR(m.weighted_f1, 0.5 * 2.0 / 3.0, 1e-12);
}

TEST(Metrics, InvariantToExampleOrderAndBounded) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> c(0, 3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> p(30), t(30);
        for (auto& v : p) v = c(rng);
        for (auto& v : t) v = c(rng);
        auto a = compute_metrics(p, t);
        std::vector<std::size_t> idx(30);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<int> p2, t2;
        for (auto i : idx) {
            p2.push_back(p[i]);
            t2.push_back(t[i]);
        }
        auto b = compute_metrics(p2, t2);
        EXPECT_NEAR(a.accuracy, b.accuracy, 1e-12);
        EXPECT_NEAR(a.weighted_f1, b.weighted_f1, 1e-12);
        EXPECT_GE(a.weighted_f1, 0.0);
        EXPECT_LE(a.weighted_f1, 1.0);
    }
    EXPECT_THROW(compute_metrics({}, {}), ContractError);
    EXPECT_THROW(compute_metrics({0}, {0, 1}), ContractError);
}

TEST(MeanRank, TotalOrderAndTies) {
    auto r = mean_rank({{"A", {0.9, 0.8}}, {"B", {0.5, 0.4}}});
    EXPECT_DOUBLE_EQ(r["A"], 1.0);
    EXPECT_DOUBLE_EQ(r["B"], 2.0);
    auto t = mean_rank({{"A", {0.7}}, {"B", {0.7}}});
    EXPECT_DOUBLE_EQ(t["A"], 1.5);
    EXPECT_DOUBLE_EQ(t["B"], 1.5);
    EXPECT_THROW(mean_rank({{"A", {0.1, 0.2}}, {"B", {0.3}}}), ContractError);
    EXPECT_THROW(mean_rank({{"A", {std::nan("")}}, {"B", {0.3}}}), ContractError);
}

// Sort-based oracle: sort descending, assign positions, average tied runs.
std::map<std::string, double> rank_oracle(const std::map<std::string, std::vector<double>>& s) {
    std::map<std::string, double> out;
    const std::size_t D = s.begin()->second.size();
    for (std::size_t d = 0; d < D; ++d) {
        std::vector<std::pair<double, std::string>> v;
        for (const auto& [m, x] : s) v.push_back({x[d], m});
        std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first > b.first; });
        for (std::size_t i = 0; i < v.size();) {
            std::size_t j = i;
            while (j < v.size() && v[j].first == v[i].first) ++j;
            const double avg = 0.5 * double(i + 1 + j);
            for (std::size_t q = i; q < j; ++q) out[v[q].second] += avg / double(D);
            i = j;
        }
    }
    return out;
}

TEST(MeanRank, MatchesSortOracleAndSumsToTriangle) {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> g(0, 4);  // coarse scores force ties
    for (int trial = 0; trial < 100; ++trial) {
        std::map<std::string, std::vector<double>> s;
        for (auto m : {"x", "y", "z"})
            for (int d = 0; d < 3; ++d) s[m].push_back(0.2 * g(rng));
        auto r = mean_rank(s), o = rank_oracle(s);
        double total = 0;
        for (const auto& [m, v] : r) {
            EXPECT_NEAR(v, o[m], 1e-12);
            EXPECT_GE(v, 1.0);
            EXPECT_LE(v, 3.0);
            total += v;
        }
        EXPECT_NEAR(total, 6.0, 1e-12);
    }
}

TEST(Split, StratifiedAndDisjoint) {
    auto d = synthetic(1, 100);
    auto [train, test] = train_test_split(d.table, 0.2, 3);
    EXPECT_EQ(train.size() + test.size(), 100u);
    EXPECT_NEAR(double(test.size()), 20.0, double(d.table.num_classes));
    std::set<std::size_t> a(train.begin(), train.end());
    for (auto r : test) EXPECT_FALSE(a.count(r));
    std::set<int> cls;
    for (auto r : train) cls.insert(d.table.y[r]);
    EXPECT_EQ(cls.size(), d.table.num_classes);
}

TEST(StratifiedSample, FullPoolIsEverything) {
    auto d = synthetic(2);
    auto [train, test] = train_test_split(d.table, 0.2, 0);
    auto all = stratified_sample(train, d.table.y, train.size(), 5);
    EXPECT_EQ(all, train);
    auto few = stratified_sample(train, d.table.y, d.table.num_classes, 5);
    std::set<int> cls;
    for (auto r : few) cls.insert(d.table.y[r]);
    EXPECT_EQ(cls.size(), d.table.num_classes);
    EXPECT_THROW(stratified_sample(train, d.table.y, 1, 0), EpisodeError);
}

TEST(Fewshot, DeterministicAndBounded) {
    Model model(tiny_model());
    std::vector<Dataset> ds{synthetic(3), synthetic(4)};
    FewshotConfig cfg;
    cfg.k_list = {5, 20};
    cfg.seeds = 2;
    cfg.pipeline.views = 2;
    auto a = run_fewshot(ds, cfg, model), b = run_fewshot(ds, cfg, model);
    ASSERT_EQ(a.records.size(), 8u);
    EXPECT_EQ(a.to_csv(), b.to_csv());
    for (const auto& r : a.records) {
        EXPECT_GE(r.accuracy, 0.0);
        EXPECT_LE(r.accuracy, 1.0);
        EXPECT_GE(r.weighted_f1, 0.0);
        EXPECT_LE(r.weighted_f1, 1.0);
    }
}

TEST(Fewshot, KnnSelectionRuns) {
    Model model(tiny_model());
    FewshotConfig cfg;
    cfg.k_list = {8};
    cfg.seeds = 1;
    cfg.selection = SelectionStrategy::knn_diverse;
    cfg.pipeline.views = 1;
    auto rep = run_fewshot({synthetic(5)}, cfg, model);
    ASSERT_EQ(rep.records.size(), 1u);
    EXPECT_EQ(rep.records[0].selection, "knn");
}

TEST(Fewshot, SkipsKBelowClassCountOrAboveTrainSize) {
    Model model(tiny_model());
    PriorConfig p;
    p.n_min = p.n_max = 40;
    p.c_min = p.c_max = 3;
    Dataset d{"three", sample_table(p, 7), {}};
    FewshotConfig cfg;
    cfg.k_list = {2, 5, 500};
    cfg.seeds = 1;
    cfg.pipeline.views = 1;
    auto rep = run_fewshot({d}, cfg, model);
    ASSERT_EQ(rep.records.size(), 1u);
    EXPECT_EQ(rep.records[0].k, 5u);
    EXPECT_EQ(rep.warnings.size(), 2u);
}

TEST(Report, CsvRoundTripIsLossless) {
    EvalReport rep;
    rep.records.push_back({"m1", "d1", "uniform", 5, 0, 0.1 + 0.2, 1.0 / 3.0});
    rep.records.push_back({"m2", "d1", "knn", 32, 4, 0.75, 0.8095238095238095});
    auto back = EvalReport::from_csv(rep.to_csv());
    ASSERT_EQ(back.records.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.records[i].model, rep.records[i].model);
        EXPECT_EQ(back.records[i].k, rep.records[i].k);
        EXPECT_EQ(back.records[i].seed, rep.records[i].seed);
        EXPECT_EQ(back.records[i].accuracy, rep.records[i].accuracy);
        EXPECT_EQ(back.records[i].weighted_f1, rep.records[i].weighted_f1);
    }
    EXPECT_EQ(back.to_csv(), rep.to_csv());
    EXPECT_THROW(EvalReport::from_csv("a,b\n1,2\n"), DataError);
}

TEST(Report, SummaryAndRanks) {
    EvalReport rep;
    for (std::uint64_t s = 0; s < 2; ++s) {
        rep.records.push_back({"good", "d1", "uniform", 5, s, 0.9, 0.9});
        rep.records.push_back({"bad", "d1", "uniform", 5, s, 0.6, 0.5});
        rep.records.push_back({"good", "d2", "uniform", 5, s, s ? 0.25 : 0.75, 0.8});
        rep.records.push_back({"bad", "d2", "uniform", 5, s, 0.5, 0.8});
    }
    auto sm = rep.summary("good");
    ASSERT_EQ(sm.size(), 1u);
    EXPECT_EQ(sm[0].cells, 4u);
    EXPECT_NEAR(sm[0].acc_mean, 0.7, 1e-12);
    auto r = rep.ranks(5);
    EXPECT_DOUBLE_EQ(r["good"], 1.25);  // wins d1 (rank 1), ties d2 (1.5)
    EXPECT_DOUBLE_EQ(r["bad"], 1.75);
    const auto table = rep.summary_table();
    EXPECT_NE(table.find("model good"), std::string::npos);
    EXPECT_NE(table.find("mean rank"), std::string::npos);
}

TEST(Datasets, CsvLoadingEncodesCategoriesAndLabels) {
    const auto dir = std::filesystem::temp_directory_path() / "biax_eval_data";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "b.csv") << "x,color,label\n1,red,yes\n2,blue,no\nNA,red,yes\n4,,no\n5,blue,\n";
    std::ofstream(dir / "a.csv") << "f0,y\n1,0\n2,1\n";
    std::ofstream(dir / "notes.txt") << "ignored";
    auto ds = load_dataset_dir(dir.string());
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds[0].name, "a");
    const auto& b = ds[1].table;
    EXPECT_EQ(b.n, 4u);  // unlabeled row dropped
    EXPECT_EQ(b.m, 2u);
    EXPECT_TRUE(std::isnan(b.at(2, 0)));
    EXPECT_EQ(b.at(0, 1), 0.0f);
    EXPECT_EQ(b.at(1, 1), 1.0f);
    EXPECT_EQ(b.at(3, 1), 2.0f);  // missing category code
    EXPECT_EQ(ds[1].label_names, (std::vector<std::string>{"no", "yes"}));
    EXPECT_EQ(b.y, (std::vector<int>{1, 0, 1, 0}));
    auto named = load_dataset_csv((dir / "b.csv").string(), "x");
    EXPECT_EQ(named.table.m, 2u);
    EXPECT_THROW(load_dataset_dir((dir / "missing").string()), DataError);
    std::filesystem::remove_all(dir);
}

}  // namespace
