#include "powernorm/numerics.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace powernorm;
using powernorm::testing::random_matrix;
using powernorm::testing::random_vector;

namespace {

// Loop oracles, written against raw indices.
VectorD loop_col_mean(const MatrixD& x) {
    VectorD out(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double s = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, j);
        out[j] = s / double(x.rows());
    }
    return out;
}

VectorD loop_col_second_moment(const MatrixD& x) {
    VectorD out(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double s = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, j) * x(i, j);
        out[j] = s / double(x.rows());
    }
    return out;
}

VectorD loop_col_variance(const MatrixD& x) {
    const VectorD m = loop_col_mean(x);
    VectorD out(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double s = 0;
        for (std::size_t i = 0; i < x.rows(); ++i) s += (x(i, j) - m[j]) * (x(i, j) - m[j]);
        out[j] = s / double(x.rows());
    }
    return out;
}

void expect_near(const VectorD& a, const VectorD& b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], tol) << "k=" << k;
}

} // namespace

TEST(ColMean, SymmetricTwoPoint) {
    EXPECT_EQ(col_mean(MatrixD{{1}, {3}}), (VectorD{2}));
}

TEST(ColMean, Zeros) {
    EXPECT_EQ(col_mean(MatrixD{{0, 0}, {0, 0}}), (VectorD{0, 0}));
}

TEST(ColMean, MatchesLoopOracle) {
    std::mt19937_64 rng(11);
    const MatrixD x = random_matrix(5, 3, rng);
    expect_near(col_mean(x), loop_col_mean(x), 1e-12);
}

TEST(ColSecondMoment, HandValues) {
    EXPECT_EQ(col_second_moment(MatrixD{{3}, {4}}), (VectorD{12.5}));
    EXPECT_EQ(col_second_moment(MatrixD{{1}, {-1}}), (VectorD{1}));
}

TEST(ColSecondMoment, MatchesLoopOracle) {
    std::mt19937_64 rng(12);
    const MatrixD x = random_matrix(7, 4, rng);
    expect_near(col_second_moment(x), loop_col_second_moment(x), 1e-12);
}

TEST(ColVariance, HandValues) {
    EXPECT_EQ(col_variance(MatrixD{{1}, {3}}, VectorD{2}), (VectorD{1}));
    EXPECT_EQ(col_variance(MatrixD{{5}, {5}, {5}}, VectorD{5}), (VectorD{0}));
}

TEST(ColVariance, MatchesLoopOracle) {
    std::mt19937_64 rng(13);
    const MatrixD x = random_matrix(6, 2, rng);
    expect_near(col_variance(x, col_mean(x)), loop_col_variance(x), 1e-12);
}

TEST(ColVariance, ShapeMismatch) {
    EXPECT_THROW(col_variance(MatrixD{{1, 2}}, VectorD{1}), ShapeMismatch);
}

TEST(ColVariance, EqualsSecondMomentMinusSquaredMean) {
    std::mt19937_64 rng(14);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    for (int trial = 0; trial < 200; ++trial) {
        const MatrixD x = random_matrix(dim(rng), dim(rng), rng, 0.3, 1.5);
        const VectorD mean = col_mean(x);
        const VectorD var = col_variance(x, mean);
        const VectorD m2 = col_second_moment(x);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            EXPECT_NEAR(var[j], m2[j] - mean[j] * mean[j], 1e-10);
        }
    }
}

TEST(Matrix, RejectsEmptyShapes) {
    EXPECT_THROW(MatrixD(0, 3), ShapeMismatch);
    EXPECT_THROW(MatrixD(2, 0), ShapeMismatch);
    EXPECT_THROW(VectorD(0), ShapeMismatch);
    EXPECT_THROW((MatrixD{{1, 2}, {3}}), ShapeMismatch);
}

TEST(Broadcast, AgreesWithPerRowLoops) {
    std::mt19937_64 rng(15);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t B = dim(rng);
        const std::size_t d = dim(rng);
        const MatrixD x = random_matrix(B, d, rng);
        const VectorD v = random_vector(d, rng);
        const VectorD w = random_vector(d, rng, 2.0, 0.1);
        const MatrixD scaled = mul_cols(v, x);
        const MatrixD shifted = add_rows(v, x);
        const MatrixD divided = div_cols(x, w);
        const MatrixD centred = sub_rows(x, v);
        const MatrixD aff = affine(v, x, w);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                EXPECT_EQ(scaled(i, j), v[j] * x(i, j));
                EXPECT_EQ(shifted(i, j), v[j] + x(i, j));
                EXPECT_EQ(divided(i, j), x(i, j) / w[j]);
                EXPECT_EQ(centred(i, j), x(i, j) - v[j]);
                EXPECT_EQ(aff(i, j), v[j] * x(i, j) + w[j]);
            }
        }
    }
}

TEST(Elementwise, AgreesWithLoops) {
    std::mt19937_64 rng(16);
    const MatrixD a = random_matrix(4, 5, rng);
    const MatrixD b = random_matrix(4, 5, rng);
    const MatrixD s = add(a, b);
    const MatrixD dd = sub(a, b);
    const MatrixD h = hadamard(a, b);
    const MatrixD c = scale(a, 2.5);
    MatrixD ax = a;
    axpy(ax, -0.5, b);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            EXPECT_EQ(s(i, j), a(i, j) + b(i, j));
            EXPECT_EQ(dd(i, j), a(i, j) - b(i, j));
            EXPECT_EQ(h(i, j), a(i, j) * b(i, j));
            EXPECT_EQ(c(i, j), a(i, j) * 2.5);
            EXPECT_EQ(ax(i, j), a(i, j) + -0.5 * b(i, j));
        }
    }
    EXPECT_THROW(add(a, MatrixD(5, 4)), ShapeMismatch);
}

TEST(Products, AgreeWithTripleLoop) {
    std::mt19937_64 rng(17);
    const MatrixD a = random_matrix(3, 4, rng);
    const MatrixD b = random_matrix(4, 5, rng);
    const MatrixD ab = matmul(a, b);
    const MatrixD atb = matmul_tn(transpose(a), b);
    const MatrixD abt = matmul_nt(a, transpose(b));
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
            EXPECT_NEAR(ab(i, j), acc, 1e-12);
            EXPECT_NEAR(atb(i, j), acc, 1e-12);
            EXPECT_NEAR(abt(i, j), acc, 1e-12);
        }
    }
    EXPECT_THROW(matmul(a, a), ShapeMismatch);
}

TEST(Norms, AgreeWithLoops) {
    std::mt19937_64 rng(18);
    const MatrixD a = random_matrix(3, 4, rng);
    double fro = 0;
    for (double v : a.values()) fro += v * v;
    EXPECT_NEAR(frobenius_norm(a), std::sqrt(fro), 1e-12);
    const VectorD cn = col_norms(a);
    for (std::size_t j = 0; j < 4; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < 3; ++i) acc += a(i, j) * a(i, j);
        EXPECT_NEAR(cn[j], std::sqrt(acc), 1e-12);
    }
    double r0 = 0;
    for (std::size_t j = 0; j < 4; ++j) r0 += a(0, j) * a(0, j);
    EXPECT_NEAR(row_norm(a, 0), std::sqrt(r0), 1e-12);
}

TEST(Precision, SinglePrecisionInstantiates) {
    const Matrix<float> x{{1.f}, {3.f}};
    EXPECT_EQ(col_mean(x)[0], 2.f);
    EXPECT_STREQ(precision_name<float>(), "f32");
    EXPECT_STREQ(precision_name<double>(), "f64");
}
