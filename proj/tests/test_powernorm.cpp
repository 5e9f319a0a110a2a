#include "powernorm/normalization.hpp"

#include "powernorm/pn_reference.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace powernorm;
using namespace powernorm::testing;
using powernorm::reference::pn_reference_step;

namespace {

std::vector<double> to_std(std::span<const double> s) { return {s.begin(), s.end()}; }

PNState<double> state_with_psi(std::vector<double> psi2, double alpha_fwd = 0.9, double alpha_bwd = 0.9,
                               double eps = 0.0) {
    auto s = PNState<double>::init(psi2.size(), alpha_fwd, alpha_bwd, 0, eps);
    for (std::size_t j = 0; j < psi2.size(); ++j) s.psi2[j] = psi2[j];
    return s;
}

} // namespace

TEST(PnForward, HandCase) {
    auto s = state_with_psi({4.0});
    const auto out = pn_forward(MatrixD{{2}, {6}}, AffineParams<double>::identity(1), s, Mode::Training);
    EXPECT_EQ(out.cache.normalized, (MatrixD{{1}, {3}}));
    EXPECT_EQ(out.y, (MatrixD{{1}, {3}}));
    EXPECT_EQ(out.cache.batch_psi2[0], 20.0);
    EXPECT_NEAR(s.psi2[0], 5.6, 1e-14);
    EXPECT_EQ(s.step, 1u);
}

TEST(PnForward, AlphaOneFreezesRunningMean) {
    std::mt19937_64 rng(41);
    auto s = state_with_psi({2.0, 3.0}, 1.0);
    for (int t = 0; t < 10; ++t) {
        pn_forward(random_matrix(5, 2, rng, 0.0, 4.0), AffineParams<double>::identity(2), s, Mode::Training);
    }
    EXPECT_EQ(s.psi2, (VectorD{2.0, 3.0}));
}

TEST(PnForward, ConvergesGeometricallyUnderConstantStatistics) {
    // Rows +-c give psi_B^2 = c^2 exactly for every batch.
    const double c = 3.0;
    const MatrixD x{{c}, {-c}};
    const double alpha = 0.9;
    auto s = state_with_psi({1.0}, alpha);
    for (int t = 1; t <= 100; ++t) {
        pn_forward(x, AffineParams<double>::identity(1), s, Mode::Training);
        const double expected = c * c + std::pow(alpha, t) * (1.0 - c * c);
        EXPECT_NEAR(s.psi2[0], expected, 1e-12 * c * c) << "t=" << t;
    }
}

TEST(PnForward, UpdateFormsAgree) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const VectorD prev = random_positive(3, rng, 0.1, 5.0);
        auto s = state_with_psi(to_std(prev), 0.95);
        const MatrixD x = random_matrix(4, 3, rng, 0.0, 2.0);
        const VectorD psi_b2 = col_second_moment(x);
        pn_forward(x, AffineParams<double>::identity(3), s, Mode::Training);
        for (std::size_t j = 0; j < 3; ++j) {
            const double convex = 0.95 * prev[j] + (1.0 - 0.95) * psi_b2[j];
            EXPECT_NEAR(s.psi2[j], convex, 1e-12);
        }
    }
}

TEST(PnForward, InferenceIsPure) {
    std::mt19937_64 rng(43);
    auto s = state_with_psi({2.0, 0.5}, 0.9, 0.9, 1e-5);
    s.nu = VectorD{0.3, -0.1};
    const auto before = s;
    const MatrixD x = random_matrix(3, 2, rng);
    const auto p = AffineParams<double>{VectorD{1.5, 0.5}, VectorD{0.1, 0.2}};
    const auto a = pn_forward(x, p, s, Mode::Inference);
    const auto b = pn_forward(x, p, s, Mode::Inference);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(s.psi2, before.psi2);
    EXPECT_EQ(s.nu, before.nu);
    EXPECT_EQ(s.step, before.step);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a.y(i, 0), 1.5 * (x(i, 0) / std::sqrt(2.0 + 1e-5)) + 0.1);
    }
}

TEST(PnForward, Errors) {
    PNState<double> empty;
    EXPECT_THROW(pn_forward(MatrixD{{1}}, AffineParams<double>::identity(1), empty, Mode::Training),
                 UninitializedState);
    auto s = PNState<double>::init(2);
    EXPECT_THROW(pn_forward(MatrixD{{1, 2, 3}}, AffineParams<double>::identity(3), s, Mode::Training),
                 ShapeMismatch);
}

TEST(PnBackward, ZeroNuGivesScaledUpstream) {
    std::mt19937_64 rng(44);
    auto s = state_with_psi({4.0, 9.0});
    const MatrixD x = random_matrix(3, 2, rng);
    const MatrixD dy = random_matrix(3, 2, rng);
    auto out = pn_forward(x, AffineParams<double>::identity(2), s, Mode::Training);
    const auto g = pn_backward(dy, out.cache, s);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(g.dx(i, 0), dy(i, 0) / 2.0);
        EXPECT_EQ(g.dx(i, 1), dy(i, 1) / 3.0);
    }
}

TEST(PnBackward, NuUpdateHandCase) {
    // X-hat = [[1],[3]], dL/dX-hat = [[1],[1]]: Gamma = 5, Lambda = 2.
    auto s = state_with_psi({4.0}, 0.9, 0.9);
    auto out = pn_forward(MatrixD{{2}, {6}}, AffineParams<double>::identity(1), s, Mode::Training);
    pn_backward(MatrixD{{1}, {1}}, out.cache, s);

    // Same arithmetic by hand, in the same order.
    const double om = 1.0 - 0.9;
    const double hand = 0.0 * (1.0 - om * 5.0) + om * 2.0;
    EXPECT_EQ(s.nu[0], hand);
    // 1 - 0.9 is not exactly 0.1 in binary; the result sits within an ulp of 0.2.
    EXPECT_NEAR(s.nu[0], 0.2, 4 * std::numeric_limits<double>::epsilon());

    const auto ref = pn_reference_step({2, 6}, {1, 1}, 2, 1, {1}, {0}, {4}, {0}, 0.9, 0.9, 0.0, false);
    EXPECT_EQ(s.nu[0], ref.nu[0]);
}

TEST(PnBackward, BitIdenticalToStraightLineReference) {
    std::mt19937_64 rng(45);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t B = dim(rng);
        const std::size_t d = dim(rng);
        const double eps = trial % 2 ? 1e-5 : 0.0;
        auto s = PNState<double>::init(d, 0.95, 0.9, 2, eps);
        const AffineParams<double> p{random_vector(d, rng, 1.0, 0.3), random_vector(d, rng, 0.0, 0.3)};
        std::vector<double> psi2 = to_std(s.psi2);
        std::vector<double> nu = to_std(s.nu);
        // Several consecutive steps so nu is non-zero and warmup is crossed.
        for (int t = 0; t < 6; ++t) {
            const MatrixD x = random_matrix(B, d, rng, 0.0, 1.5);
            const MatrixD dy = random_matrix(B, d, rng);
            const bool warm = s.in_warmup();
            auto out = pn_forward(x, p, s, Mode::Training);
            const auto g = pn_backward(dy, out.cache, s);
            const auto ref = pn_reference_step(to_std(x.values()), to_std(dy.values()), B, d,
                                               to_std(p.gamma), to_std(p.beta), psi2, nu, 0.95, 0.9,
                                               eps, warm);
            EXPECT_EQ(to_std(out.y.values()), ref.y) << trial << "/" << t;
            EXPECT_EQ(to_std(g.dx.values()), ref.dx) << trial << "/" << t;
            EXPECT_EQ(to_std(s.psi2), ref.psi2) << trial << "/" << t;
            EXPECT_EQ(to_std(s.nu), ref.nu) << trial << "/" << t;
            EXPECT_EQ(to_std(g.dgamma), ref.dgamma);
            EXPECT_EQ(to_std(g.dbeta), ref.dbeta);
            psi2 = ref.psi2;
            nu = ref.nu;
        }
    }
}

TEST(PnBackward, RowNormObeysTriangleBound) {
    std::mt19937_64 rng(46);
    auto s = PNState<double>::init(5, 0.95, 0.95, 0, 0.0);
    const AffineParams<double> p{random_vector(5, rng, 1.0, 0.2), VectorD(5, 0.0)};
    for (int t = 0; t < 200; ++t) {
        const MatrixD x = random_matrix(6, 5, rng);
        const MatrixD dy = random_matrix(6, 5, rng);
        auto out = pn_forward(x, p, s, Mode::Training);
        const VectorD nu_prev = s.nu;
        const auto g = pn_backward(dy, out.cache, s);
        const double nu_norm = norm(nu_prev);
        for (std::size_t i = 0; i < 6; ++i) {
            double lhs = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                const double v = g.dx(i, j) * out.cache.divisor[j];
                lhs += v * v;
            }
            lhs = std::sqrt(lhs);
            const double rhs = row_norm(out.cache.grad_hat, i) + nu_norm * row_norm(out.cache.normalized, i);
            EXPECT_LE(lhs, rhs * (1 + 1e-12)) << "t=" << t << " i=" << i;
        }
    }
}

TEST(PnBackward, NuStaysBoundedOverLongRun) {
    std::mt19937_64 rng(47);
    const std::size_t d = 4;
    auto s = PNState<double>::init(d, 0.95, 0.95, 0, 1e-5);
    const auto p = AffineParams<double>::identity(d);
    const double limit = 1.0 / (1.0 - 0.95);
    // Uniform inputs keep every X-hat entry below sqrt(3), so the row norms
    // satisfy the alpha condition with room to spare.
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    double first_half = 0, second_half = 0;
    for (int t = 0; t < 1000; ++t) {
        MatrixD x(8, d);
        for (auto& v : x.values()) v = unif(rng);
        const MatrixD dy = random_matrix(8, d, rng);
        auto out = pn_forward(x, p, s, Mode::Training);
        pn_backward(dy, out.cache, s);
        double c1 = 0;
        for (std::size_t i = 0; i < 8; ++i) c1 = std::max(c1, row_norm(out.cache.normalized, i));
        ASSERT_LT(c1 * c1, limit) << "assumption violated at t=" << t;
        const double n = norm(s.nu);
        ASSERT_TRUE(std::isfinite(n));
        (t < 500 ? first_half : second_half) = std::max(t < 500 ? first_half : second_half, n);
    }
    EXPECT_GT(first_half, 0.0);
    EXPECT_LE(second_half, 1.5 * first_half);
}

TEST(PnBackward, WarmupUsesBatchStatisticAndFreezesNu) {
    std::mt19937_64 rng(48);
    auto s = PNState<double>::init(2, 0.9, 0.9, 3, 0.0);
    const auto p = AffineParams<double>::identity(2);
    for (int t = 0; t < 3; ++t) {
        ASSERT_TRUE(s.in_warmup());
        const MatrixD x = random_matrix(4, 2, rng);
        const VectorD prev = s.psi2;
        auto out = pn_forward(x, p, s, Mode::Training);
        EXPECT_TRUE(out.cache.warmup);
        const VectorD psi_b2 = col_second_moment(x);
        for (std::size_t j = 0; j < 2; ++j) {
            EXPECT_EQ(out.cache.divisor[j], std::sqrt(psi_b2[j]));
            EXPECT_NE(s.psi2[j], prev[j]);
        }
        pn_backward(random_matrix(4, 2, rng), out.cache, s);
        EXPECT_EQ(s.nu, (VectorD{0.0, 0.0}));
    }
    EXPECT_FALSE(s.in_warmup());
    const VectorD running = s.psi2;
    auto out = pn_forward(random_matrix(4, 2, rng), p, s, Mode::Training);
    EXPECT_FALSE(out.cache.warmup);
    EXPECT_EQ(out.cache.divisor[0], std::sqrt(running[0]));
    pn_backward(random_matrix(4, 2, rng), out.cache, s);
    EXPECT_NE(s.nu[0], 0.0);
}

TEST(PnBackward, StaleCacheIsRejected) {
    std::mt19937_64 rng(49);
    auto s = PNState<double>::init(2);
    const auto p = AffineParams<double>::identity(2);
    auto first = pn_forward(random_matrix(3, 2, rng), p, s, Mode::Training);
    auto second = pn_forward(random_matrix(3, 2, rng), p, s, Mode::Training);
    EXPECT_THROW(pn_backward(random_matrix(3, 2, rng), first.cache, s), StaleCache);
    pn_backward(random_matrix(3, 2, rng), second.cache, s);
    EXPECT_THROW(pn_backward(random_matrix(3, 2, rng), second.cache, s), StaleCache);
}

TEST(PnBackward, ShapeMismatch) {
    auto s = PNState<double>::init(2);
    auto out = pn_forward(MatrixD{{1, 2}, {3, 4}}, AffineParams<double>::identity(2), s, Mode::Training);
    EXPECT_THROW(pn_backward(MatrixD(3, 2), out.cache, s), ShapeMismatch);
}

TEST(PnBackward, InferenceCacheLeavesStateAlone) {
    auto s = state_with_psi({4.0}, 0.9, 0.9, 0.0);
    s.nu = VectorD{0.5};
    auto out = pn_forward(MatrixD{{2}}, AffineParams<double>{VectorD{3.0}, VectorD{0.0}}, s, Mode::Inference);
    const auto g = pn_backward(MatrixD{{1}}, out.cache, s);
    EXPECT_EQ(g.dx(0, 0), 1.5);
    EXPECT_EQ(s.nu[0], 0.5);
}

TEST(PnFloat, SinglePrecisionRuns) {
    auto s = PNState<float>::init(1, 0.9f, 0.9f, 0, 0.0f);
    s.psi2[0] = 4.0f;
    auto out = pn_forward(Matrix<float>{{2.f}, {6.f}}, AffineParams<float>::identity(1), s, Mode::Training);
    EXPECT_EQ(out.cache.normalized(1, 0), 3.0f);
    pn_backward(Matrix<float>{{1.f}, {1.f}}, out.cache, s);
    EXPECT_NEAR(s.nu[0], 0.2f, 1e-6f);
}
