#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "crlab/numerics.hpp"
#include "oracles.hpp"

using namespace crlab;

TEST(Softmax, UniformForEqualLogits) {
    const auto p = softmax(Vector{0, 0, 0});
    for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogTwoExample) {
    const auto p = softmax(Vector{std::log(2.0), 0, 0});
    EXPECT_NEAR(p[0], 0.5, 1e-15);
    EXPECT_NEAR(p[1], 0.25, 1e-15);
    EXPECT_NEAR(p[2], 0.25, 1e-15);
}

TEST(Softmax, MatchesNaiveExponentiation) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Vector x(6);
        std::vector<long double> xl(6);
        for (std::size_t i = 0; i < 6; ++i) xl[i] = x[i] = rng.normal(0, 3);
        const auto p = softmax(x);
        const auto ref = oracle::softmax(xl);
        for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(p[i], double(ref[i]), 1e-12);
    }
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        Vector x(5);
        for (auto& v : x) v = rng.uniform(-500, 500);
        const double c = rng.uniform(-100, 100);
        Vector y = x;
        for (auto& v : y) v += c;
        const auto p = softmax(x), q = softmax(y);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        for (std::size_t i = 0; i < x.size(); ++i) {
            EXPECT_NEAR(p[i], q[i], 1e-12);
            EXPECT_GE(p[i], 0.0);
            EXPECT_LE(p[i], 1.0);
        }
    }
}

TEST(Softmax, EmptyInputThrows) {
    EXPECT_THROW(softmax(Vector{}), DimensionError);
}

TEST(L2Normalize, ThreeFourFive) {
    const auto v = l2_normalize(Vector{3, 4});
    EXPECT_NEAR(v[0], 0.6, 1e-15);
    EXPECT_NEAR(v[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorFixedAndIdempotent) {
    const Vector e{0, 1, 0};
    EXPECT_EQ(l2_normalize(e), e);
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Vector x(8);
        for (auto& v : x) v = rng.normal();
        const auto once = l2_normalize(x);
        const auto twice = l2_normalize(once);
        EXPECT_NEAR(norm2(std::span<const double>(once)), 1.0, 1e-12);
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-12);
    }
}

TEST(L2Normalize, DegenerateNormThrows) {
    EXPECT_THROW(l2_normalize(Vector{0, 0}), DegenerateInputError);
    EXPECT_THROW(l2_normalize(Vector{1e-13, 0}), DegenerateInputError);
}

TEST(Matmul, MatchesNaiveProduct) {
    Rng rng(14);
    Matrix a(7, 5), b(5, 3);
    for (auto& v : a.flat()) v = rng.normal();
    for (auto& v : b.flat()) v = rng.normal();
    const auto c = matmul(a, b);
    const auto ref = oracle::matmul(a, b);
    EXPECT_LT(max_abs_diff(c.flat(), ref.flat()), 1e-13);
    EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b).flat(), ref.flat()), 1e-13);
    EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)).flat(), ref.flat()), 1e-13);
    EXPECT_THROW(matmul(b, b), DimensionError);
}

TEST(Argmax, LowestIndexOnTies) {
    EXPECT_EQ(argmax(std::span<const double>(Vector{1, 3, 3, 2})), 1u);
}

TEST(FiniteDiff, SquaredNorm) {
    const Matrix x{{1.0, 2.0}};
    const auto g = finite_diff_grad<double>(
        [](const Matrix& m) { return m(0, 0) * m(0, 0) + m(0, 1) * m(0, 1); }, x, 1e-5);
    EXPECT_NEAR(g(0, 0), 2.0, 1e-8);
    EXPECT_NEAR(g(0, 1), 4.0, 1e-8);
}

TEST(FiniteDiff, ConstantGivesZero) {
    const Matrix x(2, 3, 1.5);
    const auto g = finite_diff_grad<double>([](const Matrix&) { return 7.0; }, x);
    for (double v : g.flat()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, QuadraticForm) {
    Rng rng(15);
    const std::size_t n = 6;
    Matrix a(n, n);
    for (auto& v : a.flat()) v = rng.normal();
    Matrix x(1, n);
    for (auto& v : x.flat()) v = rng.normal();
    const auto g = finite_diff_grad<double>(
        [&](const Matrix& m) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) s += m(0, i) * a(i, j) * m(0, j);
            return s;
        },
        x);
    Matrix expect(1, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) expect(0, i) += (a(i, j) + a(j, i)) * x(0, j);
    EXPECT_LT(max_relative_error(expect, g), 1e-6);
}

TEST(FiniteDiff, ExtrapolatedIsTighterThanPlainCentral) {
    const Matrix x{{0.7}};
    auto f = [](const Matrix& m) { return std::exp(3 * m(0, 0)); };
    const double exact = 3 * std::exp(2.1);
    const double plain = finite_diff_grad<double>(f, x, 1e-3)(0, 0);
    const double rich = finite_diff_grad<double>(f, x, 1e-3, FdOrder::extrapolated)(0, 0);
    EXPECT_LT(std::abs(rich - exact), std::abs(plain - exact));
    EXPECT_NEAR(rich, exact, 1e-9 * exact);
}

TEST(FiniteDiff, NonFiniteAndBadStep) {
    const Matrix x{{1.0}};
    EXPECT_THROW(finite_diff_grad<double>([](const Matrix&) { return std::nan(""); }, x), PropagationError);
    EXPECT_THROW(finite_diff_grad<double>([](const Matrix&) { return 0.0; }, x, 0.0), ConfigError);
}

TEST(Rng, SameSeedSameSequence) {
    Rng a(99), b(99);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.position(), 100u);
    std::vector<int> u(20), w(20);
    std::iota(u.begin(), u.end(), 0);
    std::iota(w.begin(), w.end(), 0);
    a.shuffle(u.begin(), u.end());
    b.shuffle(w.begin(), w.end());
    EXPECT_EQ(u, w);
}

TEST(Rng, ForkIsIndependentOfParentPosition) {
    Rng a(5);
    const double first = a.fork(1).uniform();
    a.uniform();
    EXPECT_EQ(a.fork(1).uniform(), first);
    EXPECT_NE(a.fork(2).uniform(), first);
}

TEST(MatrixType, ShapeChecks) {
    EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
    Matrix a(2, 2), b(2, 3);
    EXPECT_THROW(a += b, DimensionError);
}
