#pragma once

#include "ncasm/types.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace ncasm {

/// Tolerances shared by all PSD / symmetry checks.
inline constexpr double kSymmetryTol = 1e-10;
inline constexpr double kEigenFloor = -1e-10;

template <typename Derived>
auto symmetrize(const Eigen::MatrixBase<Derived>& m) {
    return (0.5 * (m + m.transpose())).eval();
}

template <typename Scalar>
bool is_symmetric(const Matrix<Scalar>& m, Scalar tol = Scalar(kSymmetryTol)) {
    if (m.rows() != m.cols()) return false;
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

template <typename Scalar>
Scalar min_symmetric_eigenvalue(const Matrix<Scalar>& m) {
    if (m.size() == 0) return Scalar(0);
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(symmetrize(m), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

/// PSD test on the symmetric part, eigenvalue floor at -1e-10.
template <typename Scalar>
bool is_psd(const Matrix<Scalar>& m) {
    if (m.rows() != m.cols()) return false;
    if (!m.allFinite()) return false;
    return min_symmetric_eigenvalue(m) >= Scalar(kEigenFloor);
}

template <typename Scalar>
bool is_pd(const Matrix<Scalar>& m) {
    if (m.rows() != m.cols() || !m.allFinite()) return false;
    Eigen::LLT<Matrix<Scalar>> llt(symmetrize(m));
    return llt.info() == Eigen::Success && min_symmetric_eigenvalue(m) > Scalar(0);
}

/// Returns L with L Lᵀ = m. Falls back to an eigendecomposition with negative
/// eigenvalues clamped at zero when m is PSD but singular. Throws when m has an
/// eigenvalue below the PSD floor.
template <typename Scalar>
Matrix<Scalar> covariance_factor(const Matrix<Scalar>& m, const std::string& what) {
    const Matrix<Scalar> sym = symmetrize(m);
    Eigen::LLT<Matrix<Scalar>> llt(sym);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(sym);
    if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() < Scalar(kEigenFloor)) {
        throw NumericalError("covariance factorization failed for " + what + " (not PSD)");
    }
    const Vector<Scalar> root = es.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal();
}

/// Symmetric matrix with eigenvalues floored at `floor`.
template <typename Scalar>
Matrix<Scalar> floor_eigenvalues(const Matrix<Scalar>& m, Scalar floor) {
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(symmetrize(m));
    const Vector<Scalar> ev = es.eigenvalues().cwiseMax(floor);
    return symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

/// log N(r; 0, cov). Singular covariances are floored at 1e-12 relative to
/// their largest eigenvalue so that degenerate (noise-free) models still give
/// a finite value.
template <typename Scalar>
Scalar gaussian_log_density(const Vector<Scalar>& r, const Matrix<Scalar>& cov) {
    const Index n = r.size();
    const Scalar log2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
    Eigen::LLT<Matrix<Scalar>> llt(cov);
    if (llt.info() == Eigen::Success) {
        const Matrix<Scalar>& L = llt.matrixLLT();
        const Scalar logdet = Scalar(2) * L.diagonal().array().log().sum();
        if (std::isfinite(logdet)) {
            const Vector<Scalar> z = llt.matrixL().solve(r);
            return Scalar(-0.5) * (z.squaredNorm() + logdet + Scalar(n) * log2pi);
        }
    }
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(symmetrize(cov));
    const Scalar top = std::max(Scalar(1), es.eigenvalues().cwiseAbs().maxCoeff());
    const Vector<Scalar> ev = es.eigenvalues().cwiseMax(Scalar(1e-12) * top);
    const Vector<Scalar> z = es.eigenvectors().transpose() * r;
    const Scalar quad = (z.array().square() / ev.array()).sum();
    return Scalar(-0.5) * (quad + ev.array().log().sum() + Scalar(n) * log2pi);
}

/// Inverse of a covariance with the same flooring rule as gaussian_log_density.
template <typename Scalar>
Matrix<Scalar> regularized_inverse(const Matrix<Scalar>& cov) {
    Eigen::LLT<Matrix<Scalar>> llt(cov);
    if (llt.info() == Eigen::Success) {
        return llt.solve(Matrix<Scalar>::Identity(cov.rows(), cov.cols()));
    }
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(symmetrize(cov));
    const Scalar top = std::max(Scalar(1), es.eigenvalues().cwiseAbs().maxCoeff());
    const Vector<Scalar> ev = es.eigenvalues().cwiseMax(Scalar(1e-12) * top);
    return es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// Spectral radius of a square matrix.
template <typename Scalar>
Scalar spectral_radius(const Matrix<Scalar>& a) {
    if (a.size() == 0) return Scalar(0);
    Eigen::EigenSolver<Matrix<Scalar>> es(a, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Matrix infinity norm (max absolute row sum).
template <typename Derived>
auto inf_norm(const Eigen::MatrixBase<Derived>& m) {
    return m.cwiseAbs().rowwise().sum().maxCoeff();
}

}  // namespace ncasm
