#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "biax/attention.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace biax;
using biax::testing::random_tensor;

namespace {

void expect_matches(const Tensor& got, const oracle::Mat& want, double tol, std::size_t row_offset = 0) {
    const std::size_t D = got.shape().back();
    for (std::size_t r = 0; r < want.size(); ++r)
        for (std::size_t j = 0; j < D; ++j) ASSERT_NEAR(got[(row_offset + r) * D + j], want[r][j], tol) << r << "," << j;
}

TEST(SoftmaxAttention, SingleKeyReturnsValue) {
    Tensor q({1, 4}, {0.3f, -1.0f, 2.0f, 0.1f});
    Tensor k({1, 4}, {1.0f, 1.0f, -1.0f, 0.5f});
    Tensor v({1, 4}, {7.0f, -2.0f, 0.25f, 3.0f});
    auto mask = AttentionMask::shared(1, 1);
    auto out = masked_softmax_attention(q, k, v, &mask, 1);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out[j], v[j]);
}

TEST(SoftmaxAttention, OnlyUnmaskedKeyIsSelected) {
    std::mt19937_64 rng(1);
    auto q = random_tensor<float>({1, 2}, rng, -1, 1, false);
    auto k = random_tensor<float>({3, 2}, rng, -1, 1, false);
    auto v = random_tensor<float>({3, 2}, rng, -1, 1, false);
    auto mask = AttentionMask::shared(1, 3, false);
    mask.allow(0, 0, 2);
    auto out = masked_softmax_attention(q, k, v, &mask, 1);
    EXPECT_FLOAT_EQ(out[0], v[4]);
    EXPECT_FLOAT_EQ(out[1], v[5]);
}

TEST(SoftmaxAttention, RandomFourByFourTwoHeadsMatchesLoopOracle) {
    std::mt19937_64 rng(2);
    auto q = random_tensor<float>({4, 4}, rng, -1, 1, false);
    auto k = random_tensor<float>({4, 4}, rng, -1, 1, false);
    auto v = random_tensor<float>({4, 4}, rng, -1, 1, false);
    auto out = masked_softmax_attention(q, k, v, nullptr, 2);
    expect_matches(out, oracle::attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v), 2), 1e-5);
}

TEST(SoftmaxAttention, FullyMaskedRowIsRejectedOrZeroed) {
    Tensor q = Tensor::full({2, 2}, 1.0f), k = Tensor::full({2, 2}, 1.0f), v = Tensor::full({2, 2}, 3.0f);
    auto mask = AttentionMask::shared(2, 2);
    mask.block(0, 1, 0);
    mask.block(0, 1, 1);
    EXPECT_THROW(masked_softmax_attention(q, k, v, &mask, 1), MaskError);
    auto out = masked_softmax_attention(q, k, v, &mask, 1, EmptyRows::zero);
    EXPECT_EQ(out[0], 3.0f);
    EXPECT_EQ(out[2], 0.0f);
    EXPECT_EQ(out[3], 0.0f);
}

TEST(SoftmaxAttention, DimensionErrors) {
    Tensor q = Tensor::zeros({2, 4}), k = Tensor::zeros({3, 4}), v = Tensor::zeros({2, 4});
    EXPECT_THROW(masked_softmax_attention(q, k, v, nullptr, 1), ShapeError);
    EXPECT_THROW(masked_softmax_attention(q, q, q, nullptr, 3), ShapeError);
    auto mask = AttentionMask::shared(3, 3);
    EXPECT_THROW(masked_softmax_attention(q, q, q, &mask, 1), ShapeError);
}

TEST(SoftmaxAttention, AllZeroMaskIsBitIdenticalToNoMask) {
    std::mt19937_64 rng(3);
    auto q = random_tensor<float>({2, 5, 8}, rng, -2, 2, false);
    auto k = random_tensor<float>({2, 6, 8}, rng, -2, 2, false);
    auto v = random_tensor<float>({2, 6, 8}, rng, -2, 2, false);
    AttentionMask open(2, 5, 6);
    auto a = masked_softmax_attention(q, k, v, &open, 4);
    auto b = masked_softmax_attention(q, k, v, nullptr, 4);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(SoftmaxAttention, KeyPermutationEquivariance) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t Lq = 3, Lk = 6, D = 4;
        auto q = random_tensor<float>({Lq, D}, rng, -1, 1, false);
        auto k = random_tensor<float>({Lk, D}, rng, -1, 1, false);
        auto v = random_tensor<float>({Lk, D}, rng, -1, 1, false);
        auto mask = AttentionMask::shared(Lq, Lk);
        std::bernoulli_distribution drop(0.3);
        for (std::size_t t = 0; t < Lq; ++t)
            for (std::size_t s = 1; s < Lk; ++s)
                if (drop(rng)) mask.block(0, t, s);
        std::vector<std::size_t> perm(Lk);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<float> kp(Lk * D), vp(Lk * D);
        auto pmask = AttentionMask::shared(Lq, Lk);
        for (std::size_t s = 0; s < Lk; ++s) {
            for (std::size_t j = 0; j < D; ++j) {
                kp[s * D + j] = k[perm[s] * D + j];
                vp[s * D + j] = v[perm[s] * D + j];
            }
            for (std::size_t t = 0; t < Lq; ++t)
                if (!mask.visible(0, t, perm[s])) pmask.block(0, t, s);
        }
        auto a = masked_softmax_attention(q, k, v, &mask, 2);
        auto b = masked_softmax_attention(q, Tensor({Lk, D}, kp), Tensor({Lk, D}, vp), &pmask, 2);
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    }
}

TEST(SoftmaxAttention, RandomMaskedCasesMatchLoopOracle) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> len(1, 16), hsel(0, 2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t heads = std::size_t(1) << hsel(rng), D = heads * 4, Lq = len(rng), Lk = len(rng);
        auto q = random_tensor<float>({Lq, D}, rng, -1, 1, false);
        auto k = random_tensor<float>({Lk, D}, rng, -1, 1, false);
        auto v = random_tensor<float>({Lk, D}, rng, -1, 1, false);
        auto mask = AttentionMask::shared(Lq, Lk);
        std::bernoulli_distribution drop(0.4);
        for (std::size_t t = 0; t < Lq; ++t)
            for (std::size_t s = 1; s < Lk; ++s)
                if (drop(rng)) mask.block(0, t, s);
        auto out = masked_softmax_attention(q, k, v, &mask, heads);
        expect_matches(out, oracle::attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v), heads,
                                              [&](std::size_t t, std::size_t s) { return mask.visible(0, t, s); }),
                       1e-5);
    }
}

TEST(LinearAttention, SingleKeyReturnsValue) {
    std::mt19937_64 rng(6);
    auto q = random_tensor<float>({3, 4}, rng, -1, 1, false);
    Tensor k({1, 4}, {0.2f, -0.4f, 1.0f, 0.0f});
    Tensor v({1, 4}, {1.0f, 2.0f, 3.0f, -4.0f});
    auto out = linear_attention(q, k, v, FeatureMap::elu_plus_one);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[t * 4 + j], v[j], 1e-6);
}

TEST(LinearAttention, IdenticalKeysAverageValues) {
    Tensor q({1, 2}, {0.5f, -0.3f});
    Tensor k({2, 2}, {0.7f, 0.1f, 0.7f, 0.1f});
    Tensor v({2, 2}, {1.0f, 4.0f, 3.0f, -2.0f});
    auto out = linear_attention(q, k, v, FeatureMap::elu_plus_one);
    EXPECT_NEAR(out[0], 2.0f, 1e-6);
    EXPECT_NEAR(out[1], 1.0f, 1e-6);
}

TEST(LinearAttention, RandomFiveByThreeMatchesExplicitMatrix) {
    std::mt19937_64 rng(7);
    auto q = random_tensor<float>({5, 3}, rng, -1, 1, false);
    auto k = random_tensor<float>({5, 3}, rng, -1, 1, false);
    auto v = random_tensor<float>({5, 3}, rng, -1, 1, false);
    auto out = linear_attention(q, k, v, FeatureMap::elu_plus_one);
    expect_matches(out, oracle::linear_attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v), true), 1e-5);
}

TEST(LinearAttention, AccumulatorFormMatchesExplicitFormUpToSixtyFour) {
    std::mt19937_64 rng(8);
    for (std::size_t L : {1, 7, 32, 64}) {
        for (bool elu_map : {true, false}) {
            const double lo = elu_map ? -1.0 : 0.05;
            auto q = random_tensor<float>({L, 8}, rng, lo, 1, false);
            auto k = random_tensor<float>({L, 8}, rng, lo, 1, false);
            auto v = random_tensor<float>({L, 8}, rng, -1, 1, false);
            auto out = linear_attention(q, k, v, elu_map ? FeatureMap::elu_plus_one : FeatureMap::identity, 2);
            expect_matches(out,
                           oracle::linear_attention(oracle::to_mat(q), oracle::to_mat(k), oracle::to_mat(v), elu_map, 2),
                           1e-5);
        }
    }
}

TEST(LinearAttention, DegenerateNormalizerIsReported) {
    Tensor q({1, 2}, {1.0f, -1.0f});
    Tensor k({1, 2}, {1.0f, 1.0f});
    Tensor v({1, 2}, {1.0f, 1.0f});
    EXPECT_THROW(linear_attention(q, k, v, FeatureMap::identity), NumericalError);
}

TEST(LinearAttention, ZeroKeyWeightsDropKeys) {
    std::mt19937_64 rng(9);
    auto q = random_tensor<float>({2, 4}, rng, -1, 1, false);
    auto k = random_tensor<float>({3, 4}, rng, -1, 1, false);
    auto v = random_tensor<float>({3, 4}, rng, -1, 1, false);
    std::vector<float> w{1, 0, 1};
    auto a = linear_attention(q, k, v, FeatureMap::elu_plus_one, 1, &w);
    std::vector<float> kk, vv;
    for (std::size_t s : {0, 2})
        for (std::size_t j = 0; j < 4; ++j) {
            kk.push_back(k[s * 4 + j]);
            vv.push_back(v[s * 4 + j]);
        }
    auto b = linear_attention(q, Tensor({2, 4}, kk), Tensor({2, 4}, vv), FeatureMap::elu_plus_one);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

}  // namespace
