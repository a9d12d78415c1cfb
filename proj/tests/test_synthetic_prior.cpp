#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "biax/synthetic_prior.hpp"

using namespace biax;

namespace {

PriorConfig stump_prior() {
    PriorConfig c;
    c.n_min = c.n_max = 64;
    c.m_min = 2;
    c.m_max = 6;
    c.c_min = c.c_max = 2;
    c.mlp_weight = 0.0;
    c.tree_weight = 1.0;
    c.noise = 0.0;
    c.categorical_fraction = 0.0;
    c.tree_depth_min = c.tree_depth_max = 1;
    return c;
}

// Best accuracy of any single-feature threshold rule, by exhaustive search.
double best_stump_accuracy(const SyntheticTable& t) {
    double best = 0;
    for (std::size_t j = 0; j < t.m; ++j) {
        std::vector<float> cuts;
        for (std::size_t r = 0; r < t.n; ++r) cuts.push_back(t.at(r, j));
        for (float c : cuts)
            for (int lo_label = 0; lo_label < 2; ++lo_label) {
                std::size_t ok = 0;
                for (std::size_t r = 0; r < t.n; ++r) {
                    const int pred = t.at(r, j) < c ? lo_label : 1 - lo_label;
                    ok += pred == t.y[r];
                }
                best = std::max(best, double(ok) / double(t.n));
            }
    }
    return best;
}

TEST(SyntheticPrior, DeterministicPerSeed) {
    PriorConfig cfg;
    for (std::uint64_t s : {0ull, 1ull, 12345ull}) {
        auto a = sample_table(cfg, s), b = sample_table(cfg, s);
        EXPECT_EQ(a.X, b.X);
        EXPECT_EQ(a.y, b.y);
        EXPECT_EQ(a.kind, b.kind);
    }
}

TEST(SyntheticPrior, DistinctSeedsGiveDistinctTables) {
    PriorConfig cfg;
    std::set<std::vector<float>> seen;
    for (std::uint64_t s = 0; s < 30; ++s) seen.insert(sample_table(cfg, s).X);
    EXPECT_EQ(seen.size(), 30u);
}

TEST(SyntheticPrior, DepthOneNoiselessTreeIsStumpSeparable) {
    auto cfg = stump_prior();
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto t = sample_table(cfg, s);
        EXPECT_EQ(t.kind, GeneratorKind::tree);
        EXPECT_DOUBLE_EQ(best_stump_accuracy(t), 1.0) << "seed " << s;
    }
}

TEST(SyntheticPrior, DegenerateRangesFixShapes) {
    PriorConfig cfg;
    cfg.n_min = cfg.n_max = 8;
    cfg.m_min = cfg.m_max = 3;
    cfg.c_min = cfg.c_max = 2;
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto t = sample_table(cfg, s);
        EXPECT_EQ(t.n, 8u);
        EXPECT_EQ(t.m, 3u);
        EXPECT_EQ(t.X.size(), 24u);
        for (int y : t.y) EXPECT_TRUE(y == 0 || y == 1);
    }
}

TEST(SyntheticPrior, CoverageAndFinitenessOverManySeeds) {
    PriorConfig cfg;
    std::size_t trees = 0;
    for (std::uint64_t s = 0; s < 200; ++s) {
        auto t = sample_table(cfg, s);
        ASSERT_GE(t.n, cfg.n_min);
        ASSERT_LE(t.n, cfg.n_max);
        ASSERT_GE(t.m, cfg.m_min);
        ASSERT_LE(t.m, cfg.m_max);
        ASSERT_GE(t.num_classes, cfg.c_min);
        ASSERT_LE(t.num_classes, cfg.c_max);
        for (auto c : t.class_counts()) ASSERT_GE(c, 2u);
        for (float v : t.X) ASSERT_TRUE(std::isfinite(v));
        trees += t.kind == GeneratorKind::tree;
    }
    // 0.3 tree weight over 200 draws
    EXPECT_GT(trees, 30u);
    EXPECT_LT(trees, 90u);
}

TEST(SyntheticPrior, CategoricalColumnsAreIntegerCodesNumericAreContinuous) {
    PriorConfig cfg;
    cfg.categorical_fraction = 0.5;
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto t = sample_table(cfg, s);
        std::set<std::size_t> cats(t.categorical_columns.begin(), t.categorical_columns.end());
        EXPECT_EQ(cats.size(), t.m / 2);
        for (std::size_t j = 0; j < t.m; ++j) {
            std::set<float> distinct;
            for (std::size_t r = 0; r < t.n; ++r) {
                const float v = t.at(r, j);
                distinct.insert(v);
                if (cats.count(j)) ASSERT_EQ(v, std::round(v));
            }
            if (cats.count(j))
                EXPECT_LE(distinct.size(), 6u);
            else
                EXPECT_GT(distinct.size(), t.n / 2);
        }
    }
}

TEST(SyntheticPrior, InvalidConfigsAreRejected) {
    PriorConfig c;
    c.mlp_weight = 0.5;
    EXPECT_THROW(sample_table(c, 0), ConfigError);
    PriorConfig d;
    d.c_max = 40;
    EXPECT_THROW(sample_table(d, 0), ConfigError);
    PriorConfig e;
    e.m_min = 5;
    e.m_max = 4;
    EXPECT_THROW(sample_table(e, 0), ConfigError);
}

TEST(SyntheticPrior, DumpWritesCsvAndSidecar) {
    auto t = sample_table(stump_prior(), 3);
    const auto path = (std::filesystem::temp_directory_path() / "biax_prior_dump.csv").string();
    dump_table(t, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header.substr(0, 3), "f0,");
    EXPECT_EQ(header.substr(header.size() - 2), ",y");
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    EXPECT_EQ(lines, t.n);
    std::ifstream side(path + ".json");
    auto meta = nlohmann::json::parse(side);
    EXPECT_EQ(meta["generator"], "tree");
    EXPECT_EQ(meta["seed"], 3);
    EXPECT_EQ(meta["classes"], 2);
    std::filesystem::remove(path);
    std::filesystem::remove(path + ".json");
}

TEST(SyntheticPrior, ConfigJsonRoundTrip) {
    auto c = stump_prior();
    c.seed = 9;
    EXPECT_EQ(PriorConfig::from_json(c.to_json()).to_json(), c.to_json());
}

}  // namespace
