#pragma once

// Random generators and independent oracles shared by the test binaries.

#include "ncasm/estep.hpp"
#include "ncasm/model.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace ncasm::test {

using M = Matrix<double>;
using V = Vector<double>;

inline constexpr int kCases = 1000;

struct Gen {
    std::mt19937_64 eng;
    explicit Gen(std::uint64_t seed) : eng(seed) {}

    double uniform(double lo = 0, double hi = 1) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng); }
    double normal() { return std::normal_distribution<double>()(eng); }

    M matrix(Index r, Index c, double scale = 1) {
        M m(r, c);
        for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < c; ++j) m(i, j) = scale * normal();
        return m;
    }
    V vector(Index n, double scale = 1) { return matrix(n, 1, scale); }

    /// Random symmetric PSD matrix of the given rank (full rank by default).
    M psd(Index n, Index rank = -1) {
        const M g = matrix(n, rank < 0 ? n : rank);
        return symmetrize(M(g * g.transpose()));
    }
    M pd(Index n, double floor = 0.1) { return psd(n) + floor * M::Identity(n, n); }

    M stable(Index n, double rho) {
        M a = matrix(n, n);
        const double r = spectral_radius(a);
        return r > 0 ? M(a * (rho / r)) : a;
    }

    V probabilities(Index m) {
        V p(m);
        for (Index i = 0; i < m; ++i) p(i) = 0.2 + uniform();
        return p / p.sum();
    }

    ModeSequence labels(Index T, int m) {
        ModeSequence s;
        s.labels.resize(static_cast<std::size_t>(T));
        for (auto& l : s.labels) l = integer(0, m - 1);
        return s;
    }

    Dims dims(int max_n = 3, int max_y = 3, int max_m = 3) {
        return {integer(1, max_n), integer(1, max_n), integer(1, max_y), integer(1, max_m), integer(1, max_m)};
    }

    Theta theta(const Dims& d, double rho = 0.8) {
        Theta th;
        th.dims = d;
        for (int j = 0; j < d.m_c; ++j)
            th.causal.push_back({stable(d.n_xc, uniform(0.1, rho)), matrix(d.n_y, d.n_xc), pd(d.n_xc)});
        for (int l = 0; l < d.m_a; ++l)
            th.anticausal.push_back({stable(d.n_xa, uniform(0.1, rho)), matrix(d.n_y, d.n_xa), pd(d.n_xa)});
        th.pi_c = probabilities(d.m_c);
        th.pi_a = probabilities(d.m_a);
        th.Sigma_m = pd(d.n_y);
        return th;
    }
};

/// Plain Kalman filter with explicit inverse and Joseph-form covariance update.
struct TextbookKf {
    std::vector<V> x_prior, x_post;
    std::vector<M> P_prior, P_post, K;
};

inline TextbookKf textbook_kf(const M& A, const M& C, const M& Q, const M& R, const M& y, const V& x0, const M& P0) {
    TextbookKf out;
    V x = x0;
    M P = P0;
    const Index n = A.rows();
    for (Index t = 0; t < y.rows(); ++t) {
        const V xp = A * x;
        const M Pp = A * P * A.transpose() + Q;
        const M S = C * Pp * C.transpose() + R;
        const M K = Pp * C.transpose() * S.inverse();
        const M IKC = M::Identity(n, n) - K * C;
        x = xp + K * (y.row(t).transpose() - C * xp);
        P = IKC * Pp * IKC.transpose() + K * R * K.transpose();
        out.x_prior.push_back(xp);
        out.P_prior.push_back(Pp);
        out.x_post.push_back(x);
        out.P_post.push_back(P);
        out.K.push_back(K);
    }
    return out;
}

/// Gauss-Hermite nodes and weights for ∫ exp(-x²) f(x) dx (Golub-Welsch).
inline std::pair<V, V> gauss_hermite(int n) {
    M J = M::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<M> es(J);
    V w(n);
    for (int i = 0; i < n; ++i) w(i) = std::sqrt(std::numbers::pi) * es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
    return {es.eigenvalues(), w};
}

inline double log_normal_scalar(double r, double var) {
    return -0.5 * (std::log(2 * std::numbers::pi * var) + r * r / var);
}

inline M scalar(double v) { return M::Constant(1, 1, v); }

inline Theta single_mode_theta(const M& Ac, const M& Cc, const M& Sc, const M& Aa, const M& Ca, const M& Sa,
                               const M& Sm) {
    Theta th;
    th.dims = {static_cast<int>(Ac.rows()), static_cast<int>(Aa.rows()), static_cast<int>(Sm.rows()), 1, 1};
    th.causal = {{Ac, Cc, Sc}};
    th.anticausal = {{Aa, Ca, Sa}};
    th.pi_c = V::Ones(1);
    th.pi_a = V::Ones(1);
    th.Sigma_m = Sm;
    return th;
}

}  // namespace ncasm::test
