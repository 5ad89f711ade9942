#pragma once

// Dense real matrix algebra shared by every other module.
//
// Matrices are row-major Eigen types templated on the scalar. File payloads
// arrive as float; all reductions (products, inner products, norms) are
// accumulated in double and returned as double.

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>

#include <Eigen/Dense>

#include "lora/errors.hpp"

namespace lora {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;
using RowVectorD = RowVector<double>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
    return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")";
}

template <typename Derived>
std::string shape_of(const Eigen::DenseBase<Derived>& m) {
    return shape_string(m.rows(), m.cols());
}

namespace detail {

template <typename DA, typename DB>
void require_same_shape(const Eigen::DenseBase<DA>& a, const Eigen::DenseBase<DB>& b,
                        const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " +
                         shape_of(b));
    }
}

}  // namespace detail

/// Matrix product accumulated in double. Eigen's GEMM uses a size-dependent but
/// value-independent blocking, so results are reproducible run to run.
template <typename DA, typename DB>
MatrixD matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_of(a) + " x " +
                         shape_of(b));
    }
    MatrixD out = a.template cast<double>() * b.template cast<double>();
    return out;
}

template <typename Derived>
Matrix<typename Derived::Scalar> transpose(const Eigen::MatrixBase<Derived>& m) {
    return m.transpose();
}

/// Sum of entrywise products. Both operands share a shape, so any consistent
/// flattening order yields the same value; Eigen reduces in storage order.
template <typename DA, typename DB>
double frobenius_inner(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
    detail::require_same_shape(a, b, "frobenius_inner");
    return a.template cast<double>().cwiseProduct(b.template cast<double>()).sum();
}

template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& m) {
    return std::sqrt(m.template cast<double>().squaredNorm());
}

/// a + c * b, entrywise.
template <typename DA, typename DB>
MatrixD add_scaled(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, double c) {
    detail::require_same_shape(a, b, "add_scaled");
    MatrixD out = a.template cast<double>() + c * b.template cast<double>();
    return out;
}

/// Eigen's allFinite() is several times slower on row-major storage than a
/// linear scan, so plain (directly addressable) matrices take the scan.
template <typename Derived>
bool is_finite(const Eigen::MatrixBase<Derived>& m) {
    if constexpr (std::is_base_of_v<Eigen::PlainObjectBase<Derived>, Derived>) {
        return std::all_of(m.derived().data(), m.derived().data() + m.size(),
                           [](auto x) { return std::isfinite(x); });
    } else {
        return m.allFinite();
    }
}

inline constexpr double kDefaultRankTolerance = 1e-6;

/// Singular values in descending order. Throws NumericError if the SVD fails.
Eigen::VectorXd singular_values(const MatrixD& m);

/// Number of singular values strictly above rel_tol * sigma_max; 0 for the zero
/// matrix. rel_tol must lie in (0, 1).
int numerical_rank(const MatrixD& m, double rel_tol = kDefaultRankTolerance);

template <typename Derived>
    requires(!std::is_same_v<Derived, MatrixD>)
int numerical_rank(const Eigen::MatrixBase<Derived>& m, double rel_tol = kDefaultRankTolerance) {
    return numerical_rank(MatrixD(m.template cast<double>()), rel_tol);
}

}  // namespace lora
