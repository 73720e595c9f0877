#pragma once

/// @file mstep.hpp
/// Closed-form parameter updates: mixing probabilities by weight counting,
/// mode matrices by switching least squares on the state estimates, noise
/// covariances as weight-normalized residual averages. Together they maximize
/// complete_data_loglik() over theta for fixed states and weights.

#include "ncasm/estep.hpp"
#include "ncasm/linalg.hpp"
#include "ncasm/model.hpp"

#include <fmt/format.h>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace ncasm {

/// Weighted normal-equation sums: gram = Σ w·u uᵀ, cross = Σ w·z uᵀ.
template <typename Scalar>
struct RegressionAccumulator {
    Matrix<Scalar> gram;
    Matrix<Scalar> cross;
    Index count = 0;    ///< samples with positive weight
    Scalar mass = 0;    ///< total weight

    RegressionAccumulator() = default;
    RegressionAccumulator(Index regressor_dim, Index response_dim)
        : gram(Matrix<Scalar>::Zero(regressor_dim, regressor_dim)),
          cross(Matrix<Scalar>::Zero(response_dim, regressor_dim)) {}

    template <typename U, typename Z>
    void add(const Eigen::MatrixBase<U>& u, const Eigen::MatrixBase<Z>& z, Scalar w) {
        if (w <= Scalar(0)) return;
        gram.noalias() += w * u * u.transpose();
        cross.noalias() += w * z * u.transpose();
        ++count;
        mass += w;
    }

    /// Same, with the regressor known only up to a zero-mean error of
    /// covariance `P`: E[u uᵀ] = u uᵀ + P.
    template <typename U, typename Z>
    void add(const Eigen::MatrixBase<U>& u, const Eigen::MatrixBase<Z>& z, Scalar w, const Matrix<Scalar>& P) {
        if (w <= Scalar(0)) return;
        gram.noalias() += w * (u * u.transpose() + P);
        cross.noalias() += w * z * u.transpose();
        ++count;
        mass += w;
    }

    void merge(const RegressionAccumulator& other) {
        gram += other.gram;
        cross += other.cross;
        count += other.count;
        mass += other.mass;
    }

    /// Minimizer of Σ w‖z - B u‖², i.e. B = cross · gram⁻¹, via a column-pivoted
    /// QR of the (possibly ridge-floored) Gram matrix. `what` names the block
    /// in error messages.
    Matrix<Scalar> solve(const std::string& what) const {
        if (!gram.allFinite() || !cross.allFinite()) {
            throw NumericalError(fmt::format("{}: non-finite regression statistics", what));
        }
        const Index n = gram.rows();
        Matrix<Scalar> G = symmetrize(gram);
        Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(G, Eigen::EigenvaluesOnly);
        const Scalar lmax = es.eigenvalues().maxCoeff();
        const Scalar lmin = es.eigenvalues().minCoeff();
        if (!(lmax > Scalar(0))) {
            throw NumericalError(fmt::format("{}: rank-deficient regression (no excitation); more data needed", what));
        }
        if (lmin <= Scalar(0) || lmax / lmin > Scalar(1e12)) {
            G += Scalar(1e-8) * (G.trace() / Scalar(n)) * Matrix<Scalar>::Identity(n, n);
        }
        Eigen::ColPivHouseholderQR<Matrix<Scalar>> qr(G);
        if (qr.rank() < n) {
            throw NumericalError(fmt::format("{}: rank-deficient regression after ridge floor; more data needed", what));
        }
        return qr.solve(cross.transpose()).transpose();
    }
};

/// π_j = Σ_t w_tj / Σ_t Σ_j w_tj for each chain.
template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> update_pi(const ModeWeights<Scalar>& weights) {
    const Vector<Scalar> sc = weights.w_c.colwise().sum().transpose();
    const Vector<Scalar> sa = weights.w_a.colwise().sum().transpose();
    return {sc / sc.sum(), sa / sa.sum()};
}

/// Per-time posterior covariances of the state estimates. Null means the
/// estimates are treated as exact.
template <typename Scalar>
using Covariances = std::vector<Matrix<Scalar>>;

/// Accumulator for A_c(j): regress x̂_c(t) on x̂_c(t-1), t = 2..T.
template <typename Scalar>
RegressionAccumulator<Scalar> causal_transition_stats(int j, const Matrix<Scalar>& xc, const Matrix<Scalar>& w_c,
                                                      const Covariances<Scalar>* P = nullptr) {
    RegressionAccumulator<Scalar> acc(xc.cols(), xc.cols());
    for (Index t = 1; t < xc.rows(); ++t) {
        if (P) acc.add(xc.row(t - 1).transpose(), xc.row(t).transpose(), w_c(t, j), (*P)[static_cast<std::size_t>(t - 1)]);
        else acc.add(xc.row(t - 1).transpose(), xc.row(t).transpose(), w_c(t, j));
    }
    return acc;
}

/// Accumulator for A_a(l): regress x̂_a(t) on x̂_a(t+1), t = 1..T-1.
template <typename Scalar>
RegressionAccumulator<Scalar> anticausal_transition_stats(int l, const Matrix<Scalar>& xa, const Matrix<Scalar>& w_a,
                                                          const Covariances<Scalar>* P = nullptr) {
    RegressionAccumulator<Scalar> acc(xa.cols(), xa.cols());
    for (Index t = 0; t + 1 < xa.rows(); ++t) {
        if (P) acc.add(xa.row(t + 1).transpose(), xa.row(t).transpose(), w_a(t, l), (*P)[static_cast<std::size_t>(t + 1)]);
        else acc.add(xa.row(t + 1).transpose(), xa.row(t).transpose(), w_a(t, l));
    }
    return acc;
}

/// Switching least-squares estimate of A_c(j). A mode with no weight keeps
/// `previous`.
template <typename Scalar>
Matrix<Scalar> update_A_causal(int j, const Matrix<Scalar>& xc, const Matrix<Scalar>& w_c,
                               const Matrix<Scalar>& previous, const Covariances<Scalar>* P = nullptr) {
    const auto acc = causal_transition_stats(j, xc, w_c, P);
    if (acc.count == 0) return previous;
    return acc.solve(fmt::format("A_c({})", j + 1));
}

template <typename Scalar>
Matrix<Scalar> update_A_anticausal(int l, const Matrix<Scalar>& xa, const Matrix<Scalar>& w_a,
                                   const Matrix<Scalar>& previous, const Covariances<Scalar>* P = nullptr) {
    const auto acc = anticausal_transition_stats(l, xa, w_a, P);
    if (acc.count == 0) return previous;
    return acc.solve(fmt::format("A_a({})", l + 1));
}

/// All output matrices from one joint least-squares problem. The regressor of
/// time t under the pair (j, l) holds x̂_c(t) in block j and x̂_a(t) in block
/// m_c + l, zeros elsewhere; pairs are weighted by w_c(t,j)·w_a(t,l). Blocks
/// of modes without weight keep their `previous` value.
template <typename Scalar>
std::pair<std::vector<Matrix<Scalar>>, std::vector<Matrix<Scalar>>> update_C_joint(
    const Matrix<Scalar>& xc, const Matrix<Scalar>& xa, const Matrix<Scalar>& y, const ModeWeights<Scalar>& w,
    const std::vector<Matrix<Scalar>>& previous_c, const std::vector<Matrix<Scalar>>& previous_a,
    const Covariances<Scalar>* P_c = nullptr, const Covariances<Scalar>* P_a = nullptr) {
    const Index nc = xc.cols(), na = xa.cols(), ny = y.cols();
    const int mc = static_cast<int>(w.w_c.cols());
    const int ma = static_cast<int>(w.w_a.cols());
    const Index D = mc * nc + ma * na;
    Matrix<Scalar> gram = Matrix<Scalar>::Zero(D, D);
    Matrix<Scalar> cross = Matrix<Scalar>::Zero(ny, D);
    Vector<Scalar> mass = Vector<Scalar>::Zero(mc + ma);
    for (Index t = 0; t < y.rows(); ++t) {
        const auto u_c = xc.row(t).transpose();
        const auto u_a = xa.row(t).transpose();
        const auto z = y.row(t).transpose();
        for (int j = 0; j < mc; ++j) {
            for (int l = 0; l < ma; ++l) {
                const Scalar wjl = w.w_c(t, j) * w.w_a(t, l);
                if (wjl <= Scalar(0)) continue;
                const Index bc = j * nc, ba = mc * nc + l * na;
                gram.block(bc, bc, nc, nc).noalias() += wjl * u_c * u_c.transpose();
                gram.block(ba, ba, na, na).noalias() += wjl * u_a * u_a.transpose();
                if (P_c) gram.block(bc, bc, nc, nc) += wjl * (*P_c)[static_cast<std::size_t>(t)];
                if (P_a) gram.block(ba, ba, na, na) += wjl * (*P_a)[static_cast<std::size_t>(t)];
                gram.block(bc, ba, nc, na).noalias() += wjl * u_c * u_a.transpose();
                gram.block(ba, bc, na, nc).noalias() += wjl * u_a * u_c.transpose();
                cross.block(0, bc, ny, nc).noalias() += wjl * z * u_c.transpose();
                cross.block(0, ba, ny, na).noalias() += wjl * z * u_a.transpose();
                mass(j) += wjl;
                mass(mc + l) += wjl;
            }
        }
    }
    // Restrict to blocks that received data.
    std::vector<Index> cols;
    std::vector<std::pair<Index, Index>> block_of;  // (start, size) per mode, -1 when inactive
    for (int k = 0; k < mc + ma; ++k) {
        const Index start = k < mc ? k * nc : mc * nc + (k - mc) * na;
        const Index size = k < mc ? nc : na;
        if (mass(k) > Scalar(0)) {
            block_of.emplace_back(static_cast<Index>(cols.size()), size);
            for (Index i = 0; i < size; ++i) cols.push_back(start + i);
        } else {
            block_of.emplace_back(-1, size);
        }
    }
    const Index Dr = static_cast<Index>(cols.size());
    RegressionAccumulator<Scalar> acc(Dr, ny);
    for (Index a = 0; a < Dr; ++a) {
        for (Index b = 0; b < Dr; ++b) acc.gram(a, b) = gram(cols[a], cols[b]);
        acc.cross.col(a) = cross.col(cols[a]);
    }
    acc.count = 1;
    const Matrix<Scalar> B = acc.solve("output matrices C_c, C_a");
    std::pair<std::vector<Matrix<Scalar>>, std::vector<Matrix<Scalar>>> out{previous_c, previous_a};
    for (int k = 0; k < mc + ma; ++k) {
        const auto [start, size] = block_of[static_cast<std::size_t>(k)];
        if (start < 0) continue;
        if (k < mc) {
            out.first[static_cast<std::size_t>(k)] = B.block(0, start, ny, size);
        } else {
            out.second[static_cast<std::size_t>(k - mc)] = B.block(0, start, ny, size);
        }
    }
    return out;
}

template <typename Scalar>
struct CovarianceUpdate {
    std::vector<Matrix<Scalar>> Sigma_c;
    std::vector<Matrix<Scalar>> Sigma_a;
    Matrix<Scalar> Sigma_m;
    std::vector<std::string> warnings;
};

/// Residual outer products averaged over the weight mass of each mode
/// (x_c(0) = 0 and x_a(T+1) = 0 enter as boundary regressors). Modes without
/// weight keep their previous covariance. Σ_m averages over all (t, j, l) pair
/// weights, which is T for one-hot weights.
template <typename Scalar>
CovarianceUpdate<Scalar> update_covariances(const Matrix<Scalar>& xc, const Matrix<Scalar>& xa,
                                            const Matrix<Scalar>& y, const ModeWeights<Scalar>& w,
                                            const ThetaBundle<Scalar>& updated,
                                            const Covariances<Scalar>* P_c = nullptr,
                                            const Covariances<Scalar>* P_a = nullptr) {
    const Dims& d = updated.dims;
    const Index T = y.rows();
    CovarianceUpdate<Scalar> out;
    for (int j = 0; j < d.m_c; ++j) {
        const auto& A = updated.causal[j].A_c;
        Matrix<Scalar> acc = Matrix<Scalar>::Zero(d.n_xc, d.n_xc);
        Scalar mass = 0;
        for (Index t = 0; t < T; ++t) {
            const Scalar wt = w.w_c(t, j);
            if (wt <= Scalar(0)) continue;
            Vector<Scalar> r = xc.row(t).transpose();
            if (t > 0) r.noalias() -= A * xc.row(t - 1).transpose();
            acc.noalias() += wt * r * r.transpose();
            if (P_c) {
                acc += wt * (*P_c)[static_cast<std::size_t>(t)];
                if (t > 0) acc.noalias() += wt * A * (*P_c)[static_cast<std::size_t>(t - 1)] * A.transpose();
            }
            mass += wt;
        }
        if (mass > Scalar(0)) {
            out.Sigma_c.push_back(symmetrize(acc / mass));
        } else {
            out.Sigma_c.push_back(updated.causal[j].Sigma_c);
            out.warnings.push_back(fmt::format("Sigma_c({}) kept: mode received no weight", j + 1));
        }
    }
    for (int l = 0; l < d.m_a; ++l) {
        const auto& A = updated.anticausal[l].A_a;
        Matrix<Scalar> acc = Matrix<Scalar>::Zero(d.n_xa, d.n_xa);
        Scalar mass = 0;
        for (Index t = 0; t < T; ++t) {
            const Scalar wt = w.w_a(t, l);
            if (wt <= Scalar(0)) continue;
            Vector<Scalar> r = xa.row(t).transpose();
            if (t + 1 < T) r.noalias() -= A * xa.row(t + 1).transpose();
            acc.noalias() += wt * r * r.transpose();
            if (P_a) {
                acc += wt * (*P_a)[static_cast<std::size_t>(t)];
                if (t + 1 < T) acc.noalias() += wt * A * (*P_a)[static_cast<std::size_t>(t + 1)] * A.transpose();
            }
            mass += wt;
        }
        if (mass > Scalar(0)) {
            out.Sigma_a.push_back(symmetrize(acc / mass));
        } else {
            out.Sigma_a.push_back(updated.anticausal[l].Sigma_a);
            out.warnings.push_back(fmt::format("Sigma_a({}) kept: mode received no weight", l + 1));
        }
    }
    Matrix<Scalar> acc = Matrix<Scalar>::Zero(d.n_y, d.n_y);
    Scalar mass = 0;
    for (Index t = 0; t < T; ++t) {
        for (int j = 0; j < d.m_c; ++j) {
            for (int l = 0; l < d.m_a; ++l) {
                const Scalar wjl = w.w_c(t, j) * w.w_a(t, l);
                if (wjl <= Scalar(0)) continue;
                const Vector<Scalar> r = y.row(t).transpose() - updated.causal[j].C_c * xc.row(t).transpose() -
                                         updated.anticausal[l].C_a * xa.row(t).transpose();
                acc.noalias() += wjl * r * r.transpose();
                if (P_c) {
                    const auto& Cc = updated.causal[j].C_c;
                    acc.noalias() += wjl * Cc * (*P_c)[static_cast<std::size_t>(t)] * Cc.transpose();
                }
                if (P_a) {
                    const auto& Ca = updated.anticausal[l].C_a;
                    acc.noalias() += wjl * Ca * (*P_a)[static_cast<std::size_t>(t)] * Ca.transpose();
                }
                mass += wjl;
            }
        }
    }
    out.Sigma_m = symmetrize(acc / mass);
    return out;
}

/// Lower bound kept on the eigenvalues of Σ_m so the filter stays well posed:
/// 1e-10 times the mean output energy per channel (at least 1e-10).
template <typename Scalar>
Scalar measurement_noise_floor(const Matrix<Scalar>& y) {
    const Scalar energy = y.squaredNorm() / Scalar(std::max<Index>(1, y.size()));
    return Scalar(1e-10) * std::max(Scalar(1), energy);
}

template <typename Scalar>
struct MstepResult {
    ThetaBundle<Scalar> theta;
    std::vector<std::string> warnings;
};

/// Full M-step from one E-step result. With posterior covariances the
/// updates maximize the expected form of complete_data_loglik() (each state
/// treated as N(x̂(t), P(t)), independently over time); without them, the
/// plug-in form.
template <typename Scalar>
MstepResult<Scalar> run_mstep(const ThetaBundle<Scalar>& previous, const Matrix<Scalar>& y,
                              const Matrix<Scalar>& xc, const Matrix<Scalar>& xa, const ModeWeights<Scalar>& w,
                              const Covariances<Scalar>* P_c = nullptr, const Covariances<Scalar>* P_a = nullptr) {
    const Dims& d = previous.dims;
    MstepResult<Scalar> out{previous, {}};
    ThetaBundle<Scalar>& th = out.theta;
    std::tie(th.pi_c, th.pi_a) = update_pi(w);
    for (int j = 0; j < d.m_c; ++j) {
        th.causal[j].A_c = update_A_causal(j, xc, w.w_c, previous.causal[j].A_c, P_c);
        if (w.w_c.col(j).sum() <= Scalar(0)) out.warnings.push_back(fmt::format("A_c({}) kept: mode received no weight", j + 1));
    }
    for (int l = 0; l < d.m_a; ++l) {
        th.anticausal[l].A_a = update_A_anticausal(l, xa, w.w_a, previous.anticausal[l].A_a, P_a);
        if (w.w_a.col(l).sum() <= Scalar(0)) out.warnings.push_back(fmt::format("A_a({}) kept: mode received no weight", l + 1));
    }
    std::vector<Matrix<Scalar>> prev_c, prev_a;
    for (const auto& p : previous.causal) prev_c.push_back(p.C_c);
    for (const auto& p : previous.anticausal) prev_a.push_back(p.C_a);
    auto [Cc, Ca] = update_C_joint(xc, xa, y, w, prev_c, prev_a, P_c, P_a);
    for (int j = 0; j < d.m_c; ++j) th.causal[j].C_c = std::move(Cc[j]);
    for (int l = 0; l < d.m_a; ++l) th.anticausal[l].C_a = std::move(Ca[l]);
    auto cov = update_covariances(xc, xa, y, w, th, P_c, P_a);
    for (int j = 0; j < d.m_c; ++j) th.causal[j].Sigma_c = std::move(cov.Sigma_c[j]);
    for (int l = 0; l < d.m_a; ++l) th.anticausal[l].Sigma_a = std::move(cov.Sigma_a[l]);
    const Scalar floor = measurement_noise_floor(y);
    th.Sigma_m = min_symmetric_eigenvalue(cov.Sigma_m) < floor ? floor_eigenvalues(cov.Sigma_m, floor) : cov.Sigma_m;
    out.warnings.insert(out.warnings.end(), cov.warnings.begin(), cov.warnings.end());
    return out;
}

}  // namespace ncasm
