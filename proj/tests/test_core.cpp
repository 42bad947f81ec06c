#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "vblora/core.hpp"

using namespace vblora;
using namespace vblora::testing_util;

TEST(InitBank, UniformWithinBoundAndSeeded) {
    const auto bank = init_bank(90, 256, 7);
    EXPECT_EQ(bank.size(), 90u);
    EXPECT_EQ(bank.vector_length(), 256u);
    double lo = 1, hi = -1, mean = 0;
    for (float v : bank.values.data()) {
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
        mean += v;
    }
    mean /= static_cast<double>(bank.values.size());
    EXPECT_GE(lo, -kBankInitBound);
    EXPECT_LT(hi, kBankInitBound);
    // 23040 draws from U(-0.02, 0.02): the range is nearly filled and the mean near 0.
    EXPECT_LT(lo, -0.0199);
    EXPECT_GT(hi, 0.0199);
    EXPECT_NEAR(mean, 0.0, 5 * 0.02 / std::sqrt(3.0 * 23040));
    EXPECT_EQ(bank.values, init_bank(90, 256, 7).values);
    EXPECT_NE(bank.values, init_bank(90, 256, 8).values);
}

TEST(InitBank, RejectsEmptyShapes) {
    EXPECT_THROW(init_bank(0, 4, 1), InvalidArgument);
    EXPECT_THROW(init_bank(4, 0, 1), InvalidArgument);
}

TEST(InitLogits, ShapeFollowsSubvectorLayout) {
    const auto logits = init_logits(1024, 4, 90, 256, 3);
    EXPECT_EQ(logits.num_subvectors(), 4u);
    EXPECT_EQ(logits.rank(), 4u);
    EXPECT_EQ(logits.bank_size(), 90u);
    EXPECT_EQ(logits.data().size(), 4u * 4u * 90u);
}

TEST(InitLogits, StandardDeviationIsPointZeroOne) {
    const auto logits = init_logits<double>(4096, 8, 64, 16, 11);
    double sum = 0, sq = 0;
    for (double v : logits.data()) sum += v, sq += v * v;
    const double n = static_cast<double>(logits.data().size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    EXPECT_NEAR(sd, 0.01, 0.0005);
}

TEST(InitLogits, IndivisibleDimensionRejected) {
    EXPECT_THROW(init_logits(100, 2, 8, 16, 1), InvalidArgument);
}

TEST(TopkAdmix, TwoOfThreeWeightsAreLogisticOfGap) {
    VectorBank<double> bank{Matrix<double>(3, 2)};
    bank.values(0, 0) = 1, bank.values(0, 1) = 0;
    bank.values(1, 0) = 0, bank.values(1, 1) = 1;
    bank.values(2, 0) = 5, bank.values(2, 1) = 5;
    const std::vector<double> sigma{2.0, 1.0, 0.0};
    const auto u = topk_admix<double>(sigma, bank, 2);
    ASSERT_EQ(u.indices, (std::vector<std::uint32_t>{0, 1}));
    const double w0 = 1.0 / (1.0 + std::exp(-1.0));
    EXPECT_NEAR(u.weights[0], w0, 1e-15);
    EXPECT_NEAR(u.weights[1], 1.0 - w0, 1e-15);
    EXPECT_NEAR(u.weights[0], 0.7311, 1e-4);
    EXPECT_NEAR(u.values[0], w0, 1e-15);
    EXPECT_NEAR(u.values[1], 1.0 - w0, 1e-15);
}

TEST(TopkAdmix, TiesGoToLowerIndex) {
    const std::vector<float> sigma{0.5f, 1.0f, 1.0f, 1.0f};
    EXPECT_EQ(topk_indices<float>(sigma, 2), (std::vector<std::uint32_t>{1, 2}));
    const std::vector<float> flat(6, 0.0f);
    EXPECT_EQ(topk_indices<float>(flat, 3), (std::vector<std::uint32_t>{0, 1, 2}));
}

TEST(TopkAdmix, RejectsBadArguments) {
    Rng rng(1);
    const auto bank = random_bank<float>(4, 3, rng);
    const std::vector<float> sigma{0, 1, 2, 3};
    EXPECT_THROW(topk_admix<float>(sigma, bank, 5), InvalidArgument);
    EXPECT_THROW(topk_admix<float>(sigma, bank, 0), InvalidArgument);
    const std::vector<float> bad{0, NAN, 2, 3};
    EXPECT_THROW(topk_admix<float>(bad, bank, 2), InvalidArgument);
    const std::vector<float> inf{0, INFINITY, 2, 3};
    EXPECT_THROW(topk_admix<float>(inf, bank, 2), InvalidArgument);
    const std::vector<float> short_sigma{0, 1};
    EXPECT_THROW(topk_admix<float>(short_sigma, bank, 1), InvalidArgument);
}

TEST(TopkAdmix, PropertiesOnRandomInstances) {
    Rng rng(2024);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t h = 2 + rng.below(30);
        const std::size_t b = 1 + rng.below(8);
        const std::size_t k = 1 + rng.below(h);
        const auto bank = random_bank<double>(h, b, rng);
        std::vector<double> sigma(h);
        for (auto& s : sigma) s = rng.normal(0.0, 2.0);
        const auto u = topk_admix<double>(sigma, bank, k);

        ASSERT_EQ(u.indices.size(), k);
        // Oracle: full sort by (value desc, index asc).
        std::vector<std::uint32_t> order(h);
        std::iota(order.begin(), order.end(), 0u);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto c) { return sigma[a] > sigma[c]; });
        order.resize(k);
        EXPECT_EQ(u.indices, order);

        const auto expected = softmax_over(sigma, order);
        double total = 0;
        for (std::size_t s = 0; s < k; ++s) {
            EXPECT_GE(u.weights[s], 0.0);
            EXPECT_NEAR(u.weights[s], static_cast<double>(expected[s]), 1e-14);
            if (s > 0) EXPECT_GE(u.weights[s - 1], u.weights[s]);
            total += u.weights[s];
        }
        EXPECT_NEAR(total, 1.0, 1e-15);
        for (std::size_t t = 0; t < b; ++t) {
            long double acc = 0;
            for (std::size_t s = 0; s < k; ++s) acc += expected[s] * bank.values(order[s], t);
            EXPECT_NEAR(u.values[t], static_cast<double>(acc), 1e-13);
        }
    }
}

TEST(TopkAdmix, SelectAllEqualsDenseSoftmax) {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = 2 + rng.below(20);
        const auto bank = random_bank<double>(h, 6, rng);
        std::vector<double> sigma(h);
        for (auto& s : sigma) s = rng.normal(0.0, 1.5);
        const auto u = topk_admix<double>(sigma, bank, h);
        std::vector<std::uint32_t> all(h);
        std::iota(all.begin(), all.end(), 0u);
        const auto p = softmax_over(sigma, all);
        for (std::size_t t = 0; t < 6; ++t) {
            long double dense = 0;
            for (std::size_t s = 0; s < h; ++s) dense += p[s] * bank.values(s, t);
            EXPECT_NEAR(u.values[t], static_cast<double>(dense), 1e-7);
        }
    }
}

TEST(TopkAdmix, CanonicalLastWeightIsOneMinusOthers) {
    const std::vector<float> sigma{0.3f, -1.2f, 2.5f, 0.9f, 0.0f};
    const auto mix = topk_select<float>(sigma, 4);
    float acc = 0;
    for (std::size_t s = 0; s + 1 < 4; ++s) acc += mix.weights[s];
    EXPECT_EQ(mix.weights[3], 1.0f - acc);
}

TEST(TkamBackward, MatchesFiniteDifferences) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t h = 3 + rng.below(8);
        const std::size_t b = 1 + rng.below(5);
        const std::size_t k = 1 + rng.below(h);
        auto bank = random_bank<double>(h, b, rng);
        std::vector<double> sigma(h), g(b);
        for (auto& s : sigma) s = rng.normal();
        for (auto& v : g) v = rng.normal();
        const auto loss = [&](const std::vector<double>& sg, const VectorBank<double>& bk) {
            const auto u = topk_admix<double>(sg, bk, k);
            return std::inner_product(u.values.begin(), u.values.end(), g.begin(), 0.0);
        };
        const auto grad = tkam_backward<double>(g, sigma, bank, k);
        const auto selected = topk_indices<double>(sigma, k);
        const double eps = 1e-6;
        for (std::size_t s = 0; s < h; ++s) {
            const bool is_selected = std::find(selected.begin(), selected.end(), s) != selected.end();
            if (!is_selected) {
                EXPECT_EQ(grad.grad_sigma[s], 0.0);
                continue;
            }
            auto up = sigma, down = sigma;
            up[s] += eps, down[s] -= eps;
            if (topk_indices<double>(up, k) != selected || topk_indices<double>(down, k) != selected) continue;
            const double fd = (loss(up, bank) - loss(down, bank)) / (2 * eps);
            EXPECT_NEAR(grad.grad_sigma[s], fd, 1e-8 + 1e-6 * std::abs(fd));
        }
        ASSERT_EQ(grad.rows, selected);
        for (std::size_t s = 0; s < k; ++s) {
            for (std::size_t t = 0; t < b; ++t) {
                auto up = bank, down = bank;
                up.values(selected[s], t) += eps;
                down.values(selected[s], t) -= eps;
                const double fd = (loss(sigma, up) - loss(sigma, down)) / (2 * eps);
                EXPECT_NEAR(grad.grad_rows(s, t), fd, 1e-8);
            }
        }
    }
}

TEST(TkamBackward, ClosedFormForSelectedLogits) {
    // grad_sigma_s = w_s (alpha_s . g - u . g)
    Rng rng(9);
    const auto bank = random_bank<double>(6, 4, rng);
    const std::vector<double> sigma{0.1, 0.7, -0.3, 1.1, 0.4, -2.0};
    const std::vector<double> g{0.5, -1.0, 2.0, 0.25};
    const auto u = topk_admix<double>(sigma, bank, 3);
    const auto grad = tkam_backward<double>(g, sigma, bank, 3);
    const double ug = std::inner_product(u.values.begin(), u.values.end(), g.begin(), 0.0);
    for (std::size_t s = 0; s < 3; ++s) {
        const auto row = bank.vector(u.indices[s]);
        const double ag = std::inner_product(row.begin(), row.end(), g.begin(), 0.0);
        EXPECT_NEAR(grad.grad_sigma[u.indices[s]], u.weights[s] * (ag - ug), 1e-15);
    }
}

TEST(ComposeA, OneHotSelectionTilesTheChosenVector) {
    VectorBank<float> bank{Matrix<float>(2, 2)};
    bank.values(0, 0) = 1, bank.values(0, 1) = 2, bank.values(1, 0) = 3, bank.values(1, 1) = 4;
    LogitTensor<float> logits(2, 1, 2, Side::A);
    for (std::size_t j = 0; j < 2; ++j) logits.slice(j, 0)[0] = 1.0f;
    const auto A = compose_A(logits, bank, 1);
    ASSERT_EQ(A.rows(), 1u);
    ASSERT_EQ(A.cols(), 4u);
    EXPECT_EQ(std::vector<float>(A.data().begin(), A.data().end()), (std::vector<float>{1, 2, 1, 2}));
}

TEST(ComposeA, FactorShapesAtModelScale) {
    const auto bank = init_bank(90, 256, 1);
    auto la = init_logits(1024, 4, 90, 256, 2, Side::A);
    auto lb = init_logits(1024, 4, 90, 256, 3, Side::B);
    const auto A = compose_A(la, bank, 2);
    const auto B = compose_B(lb, bank, 2);
    EXPECT_EQ(A.rows(), 4u);
    EXPECT_EQ(A.cols(), 1024u);
    EXPECT_EQ(B.rows(), 1024u);
    EXPECT_EQ(B.cols(), 4u);
}

TEST(ComposeA, EveryBlockIsItsSubVector) {
    Rng rng(31);
    const std::size_t h = 12, b = 8, r = 3, nsub = 5;
    const auto bank = random_bank<float>(h, b, rng);
    const auto logits = random_logits<float>(nsub, r, h, Side::A, rng);
    const auto A = compose_A(logits, bank, 2);
    for (std::size_t j = 0; j < nsub; ++j) {
        for (std::size_t i = 0; i < r; ++i) {
            const auto u = topk_admix<float>(logits.slice(j, i), bank, 2);
            for (std::size_t t = 0; t < b; ++t) {
                EXPECT_EQ(A(i, j * b + t), u.values[t]);
                // Convex hull of the two selected rows, coordinate-wise.
                const float lo = std::min(bank.values(u.indices[0], t), bank.values(u.indices[1], t));
                const float hi = std::max(bank.values(u.indices[0], t), bank.values(u.indices[1], t));
                EXPECT_GE(A(i, j * b + t), lo - 1e-6f);
                EXPECT_LE(A(i, j * b + t), hi + 1e-6f);
            }
        }
    }
}

TEST(ComposeB, IsTransposeOfComposeAForSameLogits) {
    Rng rng(4);
    const auto bank = random_bank<float>(10, 4, rng);
    auto la = random_logits<float>(6, 3, 10, Side::A, rng);
    LogitTensor<float> lb(6, 3, 10, Side::B);
    std::copy(la.data().begin(), la.data().end(), lb.data().begin());
    for (std::size_t k : {1u, 2u, 5u, 10u}) {
        const auto A = compose_A(la, bank, k);
        const auto B = compose_B(lb, bank, k);
        EXPECT_EQ(B, A.transposed()) << "k=" << k;
    }
}

TEST(Compose, SideTagAndArgumentChecks) {
    Rng rng(4);
    const auto bank = random_bank<float>(5, 4, rng);
    auto la = random_logits<float>(2, 1, 5, Side::A, rng);
    auto lb = random_logits<float>(2, 1, 5, Side::B, rng);
    EXPECT_THROW(compose_A(lb, bank, 2), InvalidArgument);
    EXPECT_THROW(compose_B(la, bank, 2), InvalidArgument);
    EXPECT_THROW(compose_A(la, bank, 6), InvalidArgument);
    auto wrong_h = random_logits<float>(2, 1, 4, Side::A, rng);
    EXPECT_THROW(compose_A(wrong_h, bank, 2), InvalidArgument);
    la.data()[3] = NAN;
    EXPECT_THROW(compose_A(la, bank, 2), InvalidArgument);
}

TEST(MergeDelta, UniformLogitsGiveTiledOuterProduct) {
    Rng rng(12);
    const std::size_t h = 6, b = 3, r = 2, k = 3;
    const auto bank = random_bank<double>(h, b, rng);
    const LogitTensor<double> la(4, r, h, Side::A), lb(2, r, h, Side::B);  // all zero
    const ComposedFactors<double> f{compose_A(la, bank, k), compose_B(lb, bank, k)};
    const auto dW = merge_delta(f);
    ASSERT_EQ(dW.rows(), 6u);
    ASSERT_EQ(dW.cols(), 12u);
    // Zero logits tie everywhere: rows 0..k-1 with weights 1/k each.
    std::vector<double> m(b, 0.0);
    for (std::size_t s = 0; s < k; ++s)
        for (std::size_t t = 0; t < b; ++t) m[t] += bank.values(s, t) / static_cast<double>(k);
    for (std::size_t p = 0; p < dW.rows(); ++p)
        for (std::size_t q = 0; q < dW.cols(); ++q)
            EXPECT_NEAR(dW(p, q), static_cast<double>(r) * m[p % b] * m[q % b], 1e-14);
}

TEST(MergeDelta, RankIsAtMostR) {
    Rng rng(8);
    const std::size_t h = 16, b = 8, r = 4, d = 64;
    const auto bank = random_bank<double>(h, b, rng);
    const ComposedFactors<double> f{compose_A(random_logits<double>(d / b, r, h, Side::A, rng), bank, 2),
                                    compose_B(random_logits<double>(d / b, r, h, Side::B, rng), bank, 2)};
    const auto dW = merge_delta(f);
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = dW(i, j);
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
    EXPECT_GT(sv(3) / sv(0), 1e-6);
    EXPECT_LT(sv(4) / sv(0), 1e-6);
}

template <typename T>
void check_merge_equivalence(double tol, std::uint64_t seed) {
    Rng rng(seed);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t b = 1 + rng.below(4), h = 2 + rng.below(10), r = 1 + rng.below(4);
        const std::size_t d_in = b * (1 + rng.below(6)), d_out = b * (1 + rng.below(6)), n = 1 + rng.below(5);
        const auto bank = random_bank<T>(h, b, rng);
        const std::size_t k = 1 + rng.below(h);
        const ComposedFactors<T> f{compose_A(random_logits<T>(d_in / b, r, h, Side::A, rng), bank, k),
                                   compose_B(random_logits<T>(d_out / b, r, h, Side::B, rng), bank, k)};
        const auto W = random_matrix<T>(d_in, d_out, rng);
        const auto x = random_matrix<T>(n, d_in, rng);
        const auto unmerged = adapted_forward(x, W, f);
        const auto merged = matmul(x, merged_weight(W, f));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d_out; ++j)
                EXPECT_NEAR(unmerged(i, j), merged(i, j), tol * std::max<double>(1.0, std::abs(merged(i, j))));
    }
}

TEST(MergedWeight, ForwardEquivalenceFloat) { check_merge_equivalence<float>(1e-5, 41); }
TEST(MergedWeight, ForwardEquivalenceDouble) { check_merge_equivalence<double>(1e-12, 42); }

TEST(AdaptedForward, IdentityInputRecoversDeltaTranspose) {
    Rng rng(3);
    const auto bank = random_bank<double>(5, 2, rng);
    const ComposedFactors<double> f{compose_A(random_logits<double>(3, 2, 5, Side::A, rng), bank, 2),
                                    compose_B(random_logits<double>(2, 2, 5, Side::B, rng), bank, 2)};
    Matrix<double> eye(6, 6);
    for (std::size_t i = 0; i < 6; ++i) eye(i, i) = 1.0;
    const auto y = adapted_forward(eye, Matrix<double>(6, 4), f);
    const auto dWt = merge_delta(f).transposed();
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y(i, j), dWt(i, j), 1e-15);
    EXPECT_THROW(adapted_forward(eye, Matrix<double>(6, 5), f), InvalidArgument);
}

TEST(ComposeSideBackward, TouchesOnlySelectedBankRows) {
    Rng rng(15);
    const std::size_t h = 16, b = 4, r = 2, k = 2;
    const auto bank = random_bank<double>(h, b, rng);
    const auto logits = random_logits<double>(1, r, h, Side::A, rng);
    const auto side = compose_side<double>(logits, bank, topk_selector<double>(k));
    Matrix<double> grad_bank(h, b);
    LogitTensor<double> grad_logits(1, r, h, Side::A);
    const auto g = random_matrix<double>(r, b, rng);
    compose_side_backward(side, g, Side::A, bank, &grad_logits, &grad_bank);
    std::vector<bool> selected(h, false);
    for (const auto& cell : side.cells)
        for (auto s : cell.indices) selected[s] = true;
    for (std::size_t s = 0; s < h; ++s) {
        bool nonzero = false;
        for (std::size_t t = 0; t < b; ++t) nonzero |= grad_bank(s, t) != 0.0;
        EXPECT_EQ(nonzero, static_cast<bool>(selected[s])) << "row " << s;
    }
}

TEST(Determinism, SameSeedSameFactors) {
    const auto make = [](std::uint64_t seed) {
        Rng rng(seed);
        const auto bank = init_bank(32, 16, rng);
        const auto la = init_logits(64, 2, 32, 16, rng, Side::A);
        return compose_A(la, bank, 2);
    };
    EXPECT_EQ(make(99), make(99));
    EXPECT_NE(make(99), make(100));
}
