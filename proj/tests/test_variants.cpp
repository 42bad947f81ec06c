#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "vblora/variants.hpp"

using namespace vblora;
using namespace vblora::testing_util;

namespace {

SelectionPolicy policy_of(SelectionKind kind, std::size_t k = 2) {
    SelectionPolicy p;
    p.kind = kind;
    p.k = k;
    p.inference_k = k;
    return p;
}

std::vector<double> normal_logits(std::size_t h, Rng& rng, double sd = 1.0) {
    std::vector<double> s(h);
    for (auto& v : s) v = rng.normal(0.0, sd);
    return s;
}

}  // namespace

TEST(SelectionKind, NamesRoundTrip) {
    for (auto kind : {SelectionKind::TopK, SelectionKind::NoisyTopK, SelectionKind::GumbelSoftmax,
                      SelectionKind::StraightThroughGS, SelectionKind::SelectAll})
        EXPECT_EQ(parse_selection_kind(to_string(kind)), kind);
    EXPECT_THROW(parse_selection_kind("softmax"), InvalidArgument);
}

TEST(SelectTrain, TopKMatchesCore) {
    Rng rng(1);
    const auto bank = random_bank<double>(10, 4, rng);
    const auto sigma = normal_logits(10, rng);
    const auto a = select_train(policy_of(SelectionKind::TopK, 3), std::span<const double>(sigma), bank, nullptr);
    const auto b = topk_admix<double>(sigma, bank, 3);
    EXPECT_EQ(a.indices, b.indices);
    EXPECT_EQ(a.values, b.values);
}

TEST(SelectTrain, StochasticKindsNeedRng) {
    const std::vector<double> sigma{0.1, 0.2, 0.3};
    for (auto kind : {SelectionKind::NoisyTopK, SelectionKind::GumbelSoftmax, SelectionKind::StraightThroughGS}) {
        try {
            select_train_admixture<double>(policy_of(kind), sigma, nullptr);
            FAIL() << "no error for " << to_string(kind);
        } catch (const InvalidArgument& e) {
            EXPECT_NE(std::string(e.what()).find(std::string(to_string(kind))), std::string::npos);
        }
    }
}

TEST(SelectTrain, NoisyTopKUsesCleanWeightsOnNoisySupport) {
    Rng rng(2);
    auto policy = policy_of(SelectionKind::NoisyTopK, 3);
    policy.noise_scale = 2.0;
    bool saw_non_topk = false;
    for (int trial = 0; trial < 200; ++trial) {
        const auto sigma = normal_logits(12, rng, 0.5);
        Rng noise(1000 + trial), replay(1000 + trial);
        const auto mix = select_train_admixture<double>(policy, sigma, &noise);
        // Replay the noise to find the expected support.
        std::vector<double> noisy(12);
        for (std::size_t s = 0; s < 12; ++s) noisy[s] = sigma[s] + 2.0 * replay.normal();
        auto support = topk_indices<double>(noisy, 3);
        std::stable_sort(support.begin(), support.end(), [&](auto a, auto b) { return sigma[a] > sigma[b]; });
        ASSERT_EQ(mix.indices, support);
        const auto w = softmax_over(sigma, support);
        for (std::size_t s = 0; s < 3; ++s) EXPECT_NEAR(mix.weights[s], static_cast<double>(w[s]), 1e-14);
        saw_non_topk |= mix.indices != topk_indices<double>(sigma, 3);
    }
    EXPECT_TRUE(saw_non_topk);
}

TEST(SelectTrain, NoisyTopKWithZeroNoiseIsTopK) {
    Rng rng(3);
    auto policy = policy_of(SelectionKind::NoisyTopK, 2);
    policy.noise_scale = 0.0;
    const auto sigma = normal_logits(8, rng);
    const auto mix = select_train_admixture<double>(policy, sigma, &rng);
    EXPECT_EQ(mix.indices, topk_indices<double>(sigma, 2));
}

TEST(SelectTrain, GumbelSoftmaxIsDenseTemperedSoftmax) {
    Rng rng(4);
    auto policy = policy_of(SelectionKind::GumbelSoftmax);
    policy.tau = 0.5;
    const auto sigma = normal_logits(7, rng);
    Rng noise(77), replay(77);
    const auto mix = select_train_admixture<double>(policy, sigma, &noise);
    ASSERT_EQ(mix.indices.size(), 7u);
    EXPECT_DOUBLE_EQ(mix.grad_scale, 2.0);
    std::vector<double> scaled(7);
    for (std::size_t s = 0; s < 7; ++s) scaled[s] = (sigma[s] + replay.gumbel()) / 0.5;
    const auto w = softmax_over(scaled, mix.indices);
    double total = 0;
    for (std::size_t s = 0; s < 7; ++s) {
        EXPECT_NEAR(mix.weights[s], static_cast<double>(w[s]), 1e-13);
        total += mix.weights[s];
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(SelectTrain, GumbelSoftmaxGradientMatchesFiniteDifferences) {
    // With the noise held fixed the GS forward is smooth; differentiate through it.
    Rng rng(5);
    auto policy = policy_of(SelectionKind::GumbelSoftmax);
    policy.tau = 0.7;
    const auto bank = random_bank<double>(6, 3, rng);
    const auto sigma = normal_logits(6, rng);
    const std::vector<double> g{0.3, -1.1, 0.8};
    const auto loss = [&](const std::vector<double>& sg) {
        Rng noise(42);
        const auto u = select_train(policy, std::span<const double>(sg), bank, &noise);
        return std::inner_product(u.values.begin(), u.values.end(), g.begin(), 0.0);
    };
    Rng noise(42);
    const auto mix = select_train_admixture<double>(policy, sigma, &noise);
    std::vector<double> grad(6, 0.0);
    accumulate_admixture_backward<double>(mix, g, bank, grad, nullptr);
    for (std::size_t s = 0; s < 6; ++s) {
        auto up = sigma, down = sigma;
        up[s] += 1e-6, down[s] -= 1e-6;
        EXPECT_NEAR(grad[s], (loss(up) - loss(down)) / 2e-6, 1e-8);
    }
}

TEST(SelectTrain, StraightThroughIsOneHotForwardSoftBackward) {
    Rng rng(6);
    auto policy = policy_of(SelectionKind::StraightThroughGS);
    const auto bank = random_bank<double>(9, 4, rng);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sigma = normal_logits(9, rng);
        Rng a(trial), b(trial);
        const auto st = select_train_admixture<double>(policy, sigma, &a);
        auto gs_policy = policy;
        gs_policy.kind = SelectionKind::GumbelSoftmax;
        const auto gs = select_train_admixture<double>(gs_policy, sigma, &b);
        ASSERT_EQ(st.indices.size(), 1u);
        EXPECT_EQ(st.weights[0], 1.0);
        EXPECT_EQ(st.indices[0], gs.indices[0]);  // argmax of the perturbed logits
        EXPECT_EQ(st.grad_indices, gs.grad_indices);
        EXPECT_EQ(st.grad_weights, gs.grad_weights);
        const auto u = to_subvector(st, bank);
        const auto row = bank.vector(st.indices[0]);
        EXPECT_TRUE(std::equal(u.values.begin(), u.values.end(), row.begin()));
    }
}

TEST(SelectTrain, SelectAllUsesEveryRow) {
    Rng rng(7);
    const auto sigma = normal_logits(11, rng);
    const auto mix = select_train_admixture<double>(policy_of(SelectionKind::SelectAll), sigma, nullptr);
    EXPECT_EQ(mix.indices.size(), 11u);
}

TEST(SelectInfer, DeterministicTopKForEveryKind) {
    Rng rng(8);
    const auto bank = random_bank<double>(10, 4, rng);
    const auto sigma = normal_logits(10, rng);
    for (auto kind : {SelectionKind::TopK, SelectionKind::NoisyTopK, SelectionKind::GumbelSoftmax,
                      SelectionKind::StraightThroughGS, SelectionKind::SelectAll}) {
        const auto policy = policy_of(kind, 3);
        const auto a = select_infer(policy, std::span<const double>(sigma), bank);
        const auto b = select_infer(policy, std::span<const double>(sigma), bank);
        EXPECT_EQ(a.values, b.values);
        const std::size_t support = kind == SelectionKind::SelectAll ? 10 : 3;
        EXPECT_EQ(a.indices, topk_indices<double>(sigma, support)) << to_string(kind);
    }
}

TEST(SelectInfer, GumbelKindsUseInferenceK) {
    auto policy = policy_of(SelectionKind::GumbelSoftmax, 2);
    policy.inference_k = 4;
    EXPECT_EQ(policy.inference_support(10), 4u);
    policy.kind = SelectionKind::SelectAll;
    EXPECT_EQ(policy.inference_support(10), 10u);
    policy.kind = SelectionKind::NoisyTopK;
    EXPECT_EQ(policy.inference_support(10), 2u);
}

TEST(SelectionPolicy, ValidationNamesTheKey) {
    const auto key_of = [](const SelectionPolicy& p, std::size_t h) -> std::string {
        try {
            p.validate(h);
        } catch (const InvalidArgument& e) {
            const std::string what = e.what();
            return what.substr(0, what.find(':'));
        }
        return "";
    };
    EXPECT_EQ(key_of(policy_of(SelectionKind::TopK, 0), 4), "k");
    EXPECT_EQ(key_of(policy_of(SelectionKind::TopK, 5), 4), "k");
    EXPECT_EQ(key_of(policy_of(SelectionKind::SelectAll, 99), 4), "");
    auto gs = policy_of(SelectionKind::GumbelSoftmax);
    gs.tau = 0.0;
    EXPECT_EQ(key_of(gs, 4), "tau");
    gs.tau = 1.0;
    gs.inference_k = 9;
    EXPECT_EQ(key_of(gs, 4), "inference_k");
    auto noisy = policy_of(SelectionKind::NoisyTopK);
    noisy.noise_scale = -1.0;
    EXPECT_EQ(key_of(noisy, 4), "noise_scale");
}

TEST(SelectInfer, RejectsNonFiniteLogits) {
    const std::vector<double> sigma{0.0, NAN, 1.0};
    EXPECT_THROW(select_infer_admixture<double>(policy_of(SelectionKind::GumbelSoftmax), sigma), InvalidArgument);
}
