#include "lora/tensor.hpp"

namespace lora {

namespace {

// Singular values are invariant under orthogonal factors, so a tall matrix is
// first reduced to its square R factor; that is much cheaper than bidiagonalizing
// the full operand.
MatrixD reduce_to_square(const MatrixD& tall) {
    if (tall.rows() <= tall.cols()) return tall;
    Eigen::HouseholderQR<MatrixD> qr(tall);
    return qr.matrixQR().topRows(tall.cols()).triangularView<Eigen::Upper>();
}

}  // namespace

Eigen::VectorXd singular_values(const MatrixD& m) {
    if (m.size() == 0) throw ValidationError("singular_values: empty matrix");
    if (!is_finite(m)) throw NumericError("singular_values: non-finite entries");

    const MatrixD reduced = m.rows() >= m.cols() ? reduce_to_square(m)
                                                 : reduce_to_square(MatrixD(m.transpose()));
    Eigen::BDCSVD<MatrixD> svd(reduced);
    if (svd.info() != Eigen::Success || !svd.singularValues().allFinite()) {
        throw NumericError("singular_values: SVD did not converge for matrix " + shape_of(m));
    }
    return svd.singularValues();
}

int numerical_rank(const MatrixD& m, double rel_tol) {
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
        throw ValidationError("numerical_rank: rel_tol must lie in (0, 1), got " +
                              std::to_string(rel_tol));
    }
    const Eigen::VectorXd sv = singular_values(m);
    const double sigma_max = sv.size() > 0 ? sv(0) : 0.0;
    if (sigma_max == 0.0) return 0;
    const double cutoff = rel_tol * sigma_max;
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > cutoff) ++rank;
    }
    return rank;
}

}  // namespace lora
