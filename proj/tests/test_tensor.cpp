#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "lora/tensor.hpp"
#include "test_support.hpp"

namespace lora {
namespace {

using testing::naive_matmul;
using testing::random_matrix;
using testing::relative_frobenius_error;
using testing::scalar_inner;

MatrixD mat(std::initializer_list<std::initializer_list<double>> rows) {
    MatrixD m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : rows) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    EXPECT_EQ(matmul(mat({{1, 0}, {0, 1}}), mat({{5, 6}, {7, 8}})), mat({{5, 6}, {7, 8}}));
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
    EXPECT_EQ(matmul(mat({{1, 2}}), mat({{3}, {4}})), mat({{11}}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(7);
    const MatrixD a = random_matrix(4, 768, rng);
    const MatrixD b = random_matrix(768, 4, rng);
    EXPECT_LT(relative_frobenius_error(matmul(a, b), naive_matmul(a, b)), 1e-6);
}

TEST(Matmul, FloatOperandsAreWidened) {
    std::mt19937_64 rng(8);
    const MatrixD a = random_matrix(3, 5, rng);
    const MatrixD b = random_matrix(5, 2, rng);
    const MatrixF af = a.cast<float>();
    EXPECT_LT(relative_frobenius_error(matmul(af, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, InnerDimensionMismatchIsShapeError) {
    EXPECT_THROW(matmul(MatrixD::Zero(2, 3), MatrixD::Zero(2, 3)), ShapeError);
}

TEST(Transpose, SwapsIndices) {
    EXPECT_EQ(transpose(mat({{1, 2}, {3, 4}})), mat({{1, 3}, {2, 4}}));
}

TEST(Transpose, IsAnInvolution) {
    std::mt19937_64 rng(9);
    const MatrixD m = random_matrix(7, 3, rng);
    EXPECT_EQ(transpose(transpose(m)), m);
}

TEST(Transpose, OutByInBecomesInByOut) {
    const MatrixD m = MatrixD::Zero(2304, 768);
    const MatrixD t = transpose(m);
    EXPECT_EQ(t.rows(), 768);
    EXPECT_EQ(t.cols(), 2304);
}

TEST(FrobeniusInner, SelfInnerIsSquaredNorm) {
    std::mt19937_64 rng(10);
    const MatrixD m = random_matrix(6, 9, rng);
    const double n = frobenius_norm(m);
    EXPECT_NEAR(frobenius_inner(m, m), n * n, 1e-6 * n * n);
}

TEST(FrobeniusInner, OrthogonalPermutationsGiveZero) {
    EXPECT_EQ(frobenius_inner(mat({{1, 0}, {0, 1}}), mat({{0, 1}, {1, 0}})), 0.0);
}

TEST(FrobeniusInner, MatchesScalarLoop) {
    std::mt19937_64 rng(11);
    const MatrixD a = random_matrix(4, 4, rng);
    const MatrixD b = random_matrix(4, 4, rng);
    EXPECT_NEAR(frobenius_inner(a, b), scalar_inner(a, b), 1e-9);
}

TEST(FrobeniusInner, ShapeMismatchIsShapeError) {
    EXPECT_THROW(frobenius_inner(MatrixD::Zero(2, 3), MatrixD::Zero(3, 2)), ShapeError);
}

TEST(FrobeniusNorm, ZeroMatrix) { EXPECT_EQ(frobenius_norm(MatrixD::Zero(3, 3)), 0.0); }

TEST(FrobeniusNorm, PythagoreanRow) { EXPECT_EQ(frobenius_norm(mat({{3, 4}})), 5.0); }

TEST(FrobeniusNorm, ConsistentWithInner) {
    std::mt19937_64 rng(12);
    const MatrixD m = random_matrix(5, 5, rng);
    const double n = frobenius_norm(m);
    EXPECT_NEAR(n * n, frobenius_inner(m, m), 1e-6 * n * n);
}

TEST(AddScaled, NegativeSelfIsZero) {
    std::mt19937_64 rng(13);
    const MatrixD m = random_matrix(4, 6, rng);
    EXPECT_EQ(add_scaled(m, m, -1.0), MatrixD::Zero(4, 6));
}

TEST(AddScaled, AddingZeroIsIdentity) {
    std::mt19937_64 rng(14);
    const MatrixD m = random_matrix(4, 6, rng);
    EXPECT_EQ(add_scaled(m, MatrixD::Zero(4, 6), 1.0), m);
}

TEST(AddScaled, MatchesEntrywiseOracle) {
    std::mt19937_64 rng(15);
    const MatrixD a = random_matrix(3, 4, rng);
    const MatrixD b = random_matrix(3, 4, rng);
    const MatrixD out = add_scaled(a, b, 0.5);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.cols(); ++j) EXPECT_EQ(out(i, j), a(i, j) + 0.5 * b(i, j));
    }
}

TEST(AddScaled, ShapeMismatchIsShapeError) {
    EXPECT_THROW(add_scaled(MatrixD::Zero(2, 2), MatrixD::Zero(2, 3), 1.0), ShapeError);
}

TEST(NumericalRank, OuterProductIsRankOne) {
    std::mt19937_64 rng(16);
    const MatrixD u = random_matrix(9, 1, rng);
    const MatrixD v = random_matrix(1, 5, rng);
    EXPECT_EQ(numerical_rank(matmul(u, v)), 1);
}

TEST(NumericalRank, Identity) { EXPECT_EQ(numerical_rank(MatrixD::Identity(4, 4)), 4); }

TEST(NumericalRank, ZeroMatrixHasRankZero) { EXPECT_EQ(numerical_rank(MatrixD::Zero(5, 3)), 0); }

TEST(NumericalRank, LowRankProductOfAttentionShape) {
    std::mt19937_64 rng(17);
    const MatrixD b = random_matrix(2304, 4, rng, 0.02);
    const MatrixD a = random_matrix(4, 768, rng, 0.02);
    EXPECT_EQ(numerical_rank(transpose(matmul(b, a)), 1e-6), 4);
}

TEST(NumericalRank, WideAndTallAgree) {
    std::mt19937_64 rng(18);
    const MatrixD m = matmul(random_matrix(40, 3, rng), random_matrix(3, 12, rng));
    EXPECT_EQ(numerical_rank(m), 3);
    EXPECT_EQ(numerical_rank(transpose(m)), 3);
}

TEST(NumericalRank, FloatOverload) { EXPECT_EQ(numerical_rank(MatrixF::Identity(3, 3)), 3); }

TEST(NumericalRank, ToleranceOutsideUnitIntervalRejected) {
    EXPECT_THROW(numerical_rank(MatrixD::Identity(2, 2), 0.0), ValidationError);
    EXPECT_THROW(numerical_rank(MatrixD::Identity(2, 2), 1.0), ValidationError);
}

TEST(NumericalRank, NonFiniteInputIsNumericError) {
    MatrixD m = MatrixD::Identity(3, 3);
    m(1, 2) = std::nan("");
    EXPECT_THROW(numerical_rank(m), NumericError);
}

TEST(SingularValues, DiagonalMatrix) {
    const MatrixD m = mat({{3, 0, 0}, {0, -5, 0}});
    const Eigen::VectorXd s = singular_values(m);
    ASSERT_EQ(s.size(), 2);
    EXPECT_NEAR(s(0), 5.0, 1e-12);
    EXPECT_NEAR(s(1), 3.0, 1e-12);
}

TEST(SingularValues, TallReductionPreservesSpectrum) {
    std::mt19937_64 rng(19);
    const MatrixD m = random_matrix(200, 6, rng);
    const Eigen::VectorXd reduced = singular_values(m);
    const Eigen::VectorXd direct = Eigen::JacobiSVD<Eigen::MatrixXd>(Eigen::MatrixXd(m)).singularValues();
    ASSERT_EQ(reduced.size(), direct.size());
    for (Eigen::Index i = 0; i < direct.size(); ++i) EXPECT_NEAR(reduced(i), direct(i), 1e-10 * direct(0));
}

TEST(IsFinite, DetectsNanAndInfinityInPlainAndBlockExpressions) {
    MatrixD m = MatrixD::Ones(3, 4);
    EXPECT_TRUE(is_finite(m));
    m(2, 3) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(is_finite(m));
    EXPECT_TRUE(is_finite(m.topRows(2)));
    EXPECT_FALSE(is_finite(m.col(3)));
    MatrixF f = MatrixF::Zero(2, 2);
    f(0, 1) = -std::numeric_limits<float>::infinity();
    EXPECT_FALSE(is_finite(f));
}

TEST(SingularValues, EmptyMatrixRejected) { EXPECT_THROW(singular_values(MatrixD(0, 3)), ValidationError); }

}  // namespace
}  // namespace lora
