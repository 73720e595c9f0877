#pragma once

#include "ncasm/model.hpp"
#include "ncasm/rng.hpp"

#include <fmt/format.h>

#include <utility>

namespace ncasm {

/// Boundary values play the roles of x_c(0) and x_a(T+1); empty vectors mean
/// zero.
template <typename Scalar>
struct SimConfig {
    Index T = 0;
    std::uint64_t seed = 0;
    Vector<Scalar> x_c_init;
    Vector<Scalar> x_a_terminal;
};

/// Draws s_c then s_a, each i.i.d. categorical.
template <typename Scalar>
std::pair<ModeSequence, ModeSequence> draw_mode_sequences(const ThetaBundle<Scalar>& theta, Index T, Rng& rng) {
    std::vector<double> pc(static_cast<std::size_t>(theta.pi_c.size()));
    std::vector<double> pa(static_cast<std::size_t>(theta.pi_a.size()));
    for (Index i = 0; i < theta.pi_c.size(); ++i) pc[static_cast<std::size_t>(i)] = static_cast<double>(theta.pi_c(i));
    for (Index i = 0; i < theta.pi_a.size(); ++i) pa[static_cast<std::size_t>(i)] = static_cast<double>(theta.pi_a(i));
    ModeSequence sc, sa;
    sc.labels.resize(static_cast<std::size_t>(T));
    sa.labels.resize(static_cast<std::size_t>(T));
    for (auto& l : sc.labels) l = rng.categorical(pc);
    for (auto& l : sa.labels) l = rng.categorical(pa);
    return {std::move(sc), std::move(sa)};
}

namespace detail {

template <typename Scalar>
Vector<Scalar> standard_normal(Rng& rng, Index n) {
    Vector<Scalar> z(n);
    for (Index i = 0; i < n; ++i) z(i) = static_cast<Scalar>(rng.normal());
    return z;
}

}  // namespace detail

/// Forward recursion for the causal chain, backward recursion for the
/// anti-causal chain, then the output equation. Independent RNG streams feed
/// the mode draws and each noise sequence. Throws NumericalError when the
/// trajectory leaves the range of finite doubles.
template <typename Scalar>
Trajectory<Scalar> simulate(const ThetaBundle<Scalar>& theta, const SimConfig<Scalar>& cfg) {
    validate_theta(theta, MeasurementNoise::PositiveSemidefinite);
    if (cfg.T < 2) throw std::invalid_argument("T >= 2 required");
    const Dims& d = theta.dims;
    const Index T = cfg.T;

    std::vector<Matrix<Scalar>> Lc, La;
    for (int j = 0; j < d.m_c; ++j)
        Lc.push_back(covariance_factor(theta.causal[j].Sigma_c, fmt::format("Sigma_c({})", j + 1)));
    for (int l = 0; l < d.m_a; ++l)
        La.push_back(covariance_factor(theta.anticausal[l].Sigma_a, fmt::format("Sigma_a({})", l + 1)));
    const Matrix<Scalar> Lm = covariance_factor(theta.Sigma_m, "Sigma_m");

    Rng mode_rng(derive_seed(cfg.seed, 1));
    Rng vc_rng(derive_seed(cfg.seed, 2));
    Rng va_rng(derive_seed(cfg.seed, 3));
    Rng vm_rng(derive_seed(cfg.seed, 4));
    auto [sc, sa] = draw_mode_sequences(theta, T, mode_rng);

    Trajectory<Scalar> out;
    out.x_c = Matrix<Scalar>(T, d.n_xc);
    out.x_a = Matrix<Scalar>(T, d.n_xa);
    out.y = Matrix<Scalar>(T, d.n_y);

    Vector<Scalar> x = cfg.x_c_init.size() ? cfg.x_c_init : Vector<Scalar>::Zero(d.n_xc);
    if (x.size() != d.n_xc) throw std::invalid_argument("x_c_init has wrong dimension");
    for (Index t = 0; t < T; ++t) {
        const auto j = static_cast<std::size_t>(sc[t]);
        x = theta.causal[j].A_c * x + Lc[j] * detail::standard_normal<Scalar>(vc_rng, d.n_xc);
        if (!x.allFinite()) throw NumericalError(fmt::format("causal chain diverged at t={}", t + 1));
        out.x_c->row(t) = x.transpose();
    }
    x = cfg.x_a_terminal.size() ? cfg.x_a_terminal : Vector<Scalar>::Zero(d.n_xa);
    if (x.size() != d.n_xa) throw std::invalid_argument("x_a_terminal has wrong dimension");
    // Noise for the anti-causal chain is drawn in time order, then applied backward.
    Matrix<Scalar> va(T, d.n_xa);
    for (Index t = 0; t < T; ++t) va.row(t) = detail::standard_normal<Scalar>(va_rng, d.n_xa).transpose();
    for (Index t = T - 1; t >= 0; --t) {
        const auto l = static_cast<std::size_t>(sa[t]);
        x = theta.anticausal[l].A_a * x + La[l] * va.row(t).transpose();
        if (!x.allFinite()) throw NumericalError(fmt::format("anti-causal chain diverged at t={}", t + 1));
        out.x_a->row(t) = x.transpose();
    }
    for (Index t = 0; t < T; ++t) {
        const auto j = static_cast<std::size_t>(sc[t]);
        const auto l = static_cast<std::size_t>(sa[t]);
        out.y.row(t) = (theta.causal[j].C_c * out.x_c->row(t).transpose() +
                        theta.anticausal[l].C_a * out.x_a->row(t).transpose() +
                        Lm * detail::standard_normal<Scalar>(vm_rng, d.n_y))
                           .transpose();
    }
    if (!out.y.allFinite()) throw NumericalError("output sequence is not finite");
    out.s_c = std::move(sc);
    out.s_a = std::move(sa);
    return out;
}

}  // namespace ncasm
