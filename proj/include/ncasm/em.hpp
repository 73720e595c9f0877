#pragma once

/// @file em.hpp
/// Outer identification loop: initialization, E/M alternation with an ascent
/// check on the surrogate objective, stopping rules, and label alignment
/// against ground truth.

#include "ncasm/estep.hpp"
#include "ncasm/linalg.hpp"
#include "ncasm/model.hpp"
#include "ncasm/mstep.hpp"
#include "ncasm/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ncasm {

enum class InitStrategy { Random, Perturb, Segments };
enum class Monotonicity { Assert, Permissive };
enum class StopReason { TolQ, TolTheta, MaxIters, MonotonicityViolation };

inline std::string_view to_string(StopReason r) {
    switch (r) {
        case StopReason::TolQ: return "tol_Q";
        case StopReason::TolTheta: return "tol_theta";
        case StopReason::MaxIters: return "max_iters";
        case StopReason::MonotonicityViolation: return "monotonicity_violation";
    }
    return "unknown";
}

inline std::string_view to_string(InitStrategy s) {
    switch (s) {
        case InitStrategy::Random: return "random";
        case InitStrategy::Perturb: return "perturb";
        case InitStrategy::Segments: return "segments";
    }
    return "unknown";
}

inline constexpr double kAscentSlack = 1e-8;

template <typename Scalar>
struct EmConfig {
    int max_iters = 100;
    double tol_Q = 1e-6;
    double tol_theta = 1e-5;
    int sweeps = 2;
    InitStrategy init = InitStrategy::Random;
    /// Reference bundle and relative size for InitStrategy::Perturb.
    std::optional<ThetaBundle<Scalar>> perturb_reference;
    double perturb_rho = 0.0;
    std::uint64_t seed = 0;
    bool soft_weights = false;
    bool joint_mode_search = false;
    Monotonicity monotonicity = Monotonicity::Assert;
    /// Labels stop being re-estimated once fewer than this fraction changes
    /// between consecutive iterations. Zero disables freezing.
    double freeze_fraction = 1e-3;
    double diffuse_prior_scale = 10.0;
    /// M step and surrogate use the posterior covariances of the state
    /// estimates (expected sufficient statistics). Off: plug-in estimates.
    bool posterior_covariances = true;

    std::vector<std::string> violations() const {
        std::vector<std::string> v;
        if (max_iters < 1) v.emplace_back("max_iters must be >= 1");
        if (!(tol_Q > 0)) v.emplace_back("tol_Q must be > 0");
        if (!(tol_theta > 0)) v.emplace_back("tol_theta must be > 0");
        if (sweeps < 1) v.emplace_back("sweeps must be >= 1");
        if (init == InitStrategy::Perturb && !perturb_reference) v.emplace_back("perturb init needs a reference theta");
        if (perturb_rho < 0) v.emplace_back("perturb rho must be >= 0");
        return v;
    }

    EstepConfig estep() const { return {sweeps, soft_weights, joint_mode_search, diffuse_prior_scale}; }
};

/// One E step followed by one M step.
template <typename Scalar>
struct IterationRecord {
    int k = 0;                 ///< 1-based iteration index
    Scalar q_estep = 0;        ///< Q at (theta^k, E-step estimates k)
    Scalar q_mstep = 0;        ///< Q at (theta^{k+1}, E-step estimates k)
    Scalar max_delta = 0;      ///< max entry-wise change theta^k -> theta^{k+1}
    double label_change = 1;   ///< fraction of labels that changed since the previous E step
    bool frozen = false;       ///< labels were held fixed in this E step
    std::optional<double> match_c, match_a;  ///< aligned, when truth is supplied
    ThetaBundle<Scalar> theta;               ///< theta^{k+1}
    std::vector<std::string> warnings;
};

template <typename Scalar>
struct EmReport {
    ThetaBundle<Scalar> initial_theta;
    std::vector<IterationRecord<Scalar>> iterates;
    ThetaBundle<Scalar> final_theta;
    FilterState<Scalar> final_states;
    ModeSequence final_s_c, final_s_a;
    Scalar final_q = 0;
    bool converged = false;
    StopReason stop_reason = StopReason::MaxIters;
    std::string message;
};

/// Error raised inside fit(); carries the iteration index and everything
/// recorded up to the failure.
template <typename Scalar>
class EmError : public NumericalError {
public:
    EmError(int iteration, const std::string& what, EmReport<Scalar> partial)
        : NumericalError(fmt::format("iteration {}: {}", iteration, what)),
          iteration_(iteration),
          partial_(std::move(partial)) {}

    int iteration() const noexcept { return iteration_; }
    const EmReport<Scalar>& partial() const noexcept { return partial_; }

private:
    int iteration_;
    EmReport<Scalar> partial_;
};

// ---------------------------------------------------------------------------
// Alignment

struct ChainAlignment {
    std::vector<int> perm;  ///< estimated label k -> truth label perm[k]
    Index matches = 0;
};

/// Label permutation maximizing the number of agreements with `truth`.
inline ChainAlignment align_chain(const ModeSequence& estimated, const ModeSequence& truth, int m) {
    if (m > 5) throw std::invalid_argument("exhaustive alignment is limited to m <= 5; use an assignment-based matching");
    if (estimated.size() != truth.size()) throw std::invalid_argument("sequence length mismatch");
    std::vector<Index> confusion(static_cast<std::size_t>(m * m), 0);
    for (Index t = 0; t < truth.size(); ++t) ++confusion[static_cast<std::size_t>(estimated[t] * m + truth[t])];
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    ChainAlignment best{perm, -1};
    do {
        Index hits = 0;
        for (int k = 0; k < m; ++k) hits += confusion[static_cast<std::size_t>(k * m + perm[static_cast<std::size_t>(k)])];
        if (hits > best.matches) best = {perm, hits};
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

template <typename Scalar>
struct Alignment {
    std::vector<int> perm_c, perm_a;
    ModeSequence s_c, s_a;
    ThetaBundle<Scalar> theta;
};

/// Relabels the estimated sequences and per-mode parameters to agree best with
/// the true sequences.
template <typename Scalar>
Alignment<Scalar> align_modes(const ModeSequence& s_c_hat, const ModeSequence& s_a_hat,
                              const ThetaBundle<Scalar>& theta_hat, const ModeSequence& s_c,
                              const ModeSequence& s_a) {
    const auto ac = align_chain(s_c_hat, s_c, theta_hat.dims.m_c);
    const auto aa = align_chain(s_a_hat, s_a, theta_hat.dims.m_a);
    return {ac.perm, aa.perm, permute_labels(s_c_hat, ac.perm), permute_labels(s_a_hat, aa.perm),
            permute_modes(theta_hat, ac.perm, aa.perm)};
}

/// Change of state coordinates x -> M⁻¹x for both chains, with M chosen by
/// least squares so that the stacked output matrices [C(1); ...; C(m)] of
/// `theta_hat` map onto those of `reference`. The output distribution is
/// unchanged, so this removes the part of a parameter error the data cannot
/// see. Modes must already be aligned. Returns `theta_hat` unchanged for a
/// chain whose stacked output matrix is rank deficient.
template <typename Scalar>
ThetaBundle<Scalar> align_coordinates(const ThetaBundle<Scalar>& theta_hat, const ThetaBundle<Scalar>& reference) {
    if (theta_hat.dims != reference.dims) throw std::invalid_argument("align_coordinates: dimension mismatch");
    ThetaBundle<Scalar> out = theta_hat;
    auto transform = [](auto& modes, const auto& ref, auto C, auto A, auto Sig) {
        const Index n = (modes.front().*A).rows();
        const Index rows = static_cast<Index>(modes.size()) * (modes.front().*C).rows();
        Matrix<Scalar> hat(rows, n), tru(rows, n);
        Index r = 0;
        for (std::size_t k = 0; k < modes.size(); ++k) {
            const Index ny = (modes[k].*C).rows();
            hat.middleRows(r, ny) = modes[k].*C;
            tru.middleRows(r, ny) = ref[k].*C;
            r += ny;
        }
        Eigen::ColPivHouseholderQR<Matrix<Scalar>> qr(hat);
        if (qr.rank() < n) return;
        const Matrix<Scalar> M = qr.solve(tru);
        Eigen::FullPivLU<Matrix<Scalar>> lu(M);
        if (!lu.isInvertible()) return;
        const Matrix<Scalar> Mi = lu.inverse();
        for (auto& p : modes) {
            p.*A = Mi * (p.*A) * M;
            p.*C = (p.*C) * M;
            p.*Sig = symmetrize(Matrix<Scalar>(Mi * (p.*Sig) * Mi.transpose()));
        }
    };
    using CP = CausalModeParams<Scalar>;
    using AP = AntiCausalModeParams<Scalar>;
    transform(out.causal, reference.causal, &CP::C_c, &CP::A_c, &CP::Sigma_c);
    transform(out.anticausal, reference.anticausal, &AP::C_a, &AP::A_a, &AP::Sigma_a);
    return out;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

template <typename Scalar>
Matrix<Scalar> gaussian_matrix(Rng& rng, Index r, Index c) {
    Matrix<Scalar> m(r, c);
    for (Index j = 0; j < c; ++j)
        for (Index i = 0; i < r; ++i) m(i, j) = static_cast<Scalar>(rng.normal());
    return m;
}

template <typename Scalar>
Matrix<Scalar> random_stable(Rng& rng, Index n, Scalar rho) {
    Matrix<Scalar> a = gaussian_matrix<Scalar>(rng, n, n);
    const Scalar r = spectral_radius(a);
    if (!(r > Scalar(0))) return rho * Matrix<Scalar>::Identity(n, n);
    return a * (rho / r);
}

template <typename Scalar>
Matrix<Scalar> unit_rows(Rng& rng, Index r, Index c) {
    Matrix<Scalar> m = gaussian_matrix<Scalar>(rng, r, c);
    for (Index i = 0; i < r; ++i) {
        const Scalar n = m.row(i).norm();
        if (n > Scalar(0)) m.row(i) /= n;
        else m(i, 0) = Scalar(1);
    }
    return m;
}

template <typename Scalar>
Matrix<Scalar> perturbed(Rng& rng, const Matrix<Scalar>& m, Scalar rho) {
    if (rho == Scalar(0) || m.size() == 0) return m;
    const Scalar rms = std::sqrt(m.squaredNorm() / Scalar(m.size()));
    return m + rho * (rms > Scalar(0) ? rms : Scalar(1)) * gaussian_matrix<Scalar>(rng, m.rows(), m.cols());
}

template <typename Scalar>
Matrix<Scalar> perturbed_covariance(Rng& rng, const Matrix<Scalar>& m, Scalar rho) {
    if (rho == Scalar(0) || m.size() == 0) return m;
    const Matrix<Scalar> p = symmetrize(perturbed(rng, m, rho));
    const Scalar scale = std::max(Scalar(1e-6), m.diagonal().cwiseAbs().maxCoeff() * Scalar(1e-3));
    return floor_eigenvalues(p, scale);
}

template <typename Scalar>
Vector<Scalar> perturbed_probabilities(Rng& rng, const Vector<Scalar>& p, Scalar rho) {
    if (rho == Scalar(0)) return p;
    Vector<Scalar> q = p;
    for (Index i = 0; i < q.size(); ++i) q(i) = std::max(p(i), Scalar(1e-3)) * std::exp(rho * Scalar(rng.normal()));
    return q / q.sum();
}

template <typename Scalar>
Scalar ar1_coefficient(const Matrix<Scalar>& y, Index begin, Index end) {
    Scalar num = 0, den = 0;
    for (Index t = begin + 1; t < end; ++t) {
        num += y.row(t).dot(y.row(t - 1));
        den += y.row(t - 1).squaredNorm();
    }
    const Scalar a = den > Scalar(0) ? num / den : Scalar(0);
    return std::clamp(a, Scalar(-0.95), Scalar(0.95));
}

}  // namespace detail

/// Starting parameters. Random: A with spectral radius 0.5, C with unit-norm
/// rows, unit covariances, uniform π. Perturb: reference plus ρ·rms·N(0,1) per
/// entry. Segments: y is cut into m contiguous blocks; block k seeds
/// A(k) = a_k·I with a_k its lag-one autoregression coefficient.
template <typename Scalar>
ThetaBundle<Scalar> initialize(const Trajectory<Scalar>& traj, const Dims& dims, const EmConfig<Scalar>& cfg) {
    Rng rng(derive_seed(cfg.seed, 11));
    ThetaBundle<Scalar> th;
    th.dims = dims;
    const Index nc = dims.n_xc, na = dims.n_xa, ny = dims.n_y;
    if (cfg.init == InitStrategy::Perturb) {
        if (!cfg.perturb_reference) throw std::invalid_argument("perturb init needs a reference theta");
        const auto& ref = *cfg.perturb_reference;
        if (!(ref.dims == dims)) throw std::invalid_argument("perturb reference does not match dims");
        const Scalar rho = static_cast<Scalar>(cfg.perturb_rho);
        th = ref;
        for (auto& p : th.causal) {
            p.A_c = detail::perturbed(rng, p.A_c, rho);
            p.C_c = detail::perturbed(rng, p.C_c, rho);
            p.Sigma_c = detail::perturbed_covariance(rng, p.Sigma_c, rho);
        }
        for (auto& p : th.anticausal) {
            p.A_a = detail::perturbed(rng, p.A_a, rho);
            p.C_a = detail::perturbed(rng, p.C_a, rho);
            p.Sigma_a = detail::perturbed_covariance(rng, p.Sigma_a, rho);
        }
        th.pi_c = detail::perturbed_probabilities(rng, th.pi_c, rho);
        th.pi_a = detail::perturbed_probabilities(rng, th.pi_a, rho);
        th.Sigma_m = detail::perturbed_covariance(rng, th.Sigma_m, rho);
        return th;
    }
    const Matrix<Scalar> Ic = Matrix<Scalar>::Identity(nc, nc);
    const Matrix<Scalar> Ia = Matrix<Scalar>::Identity(na, na);
    th.pi_c = Vector<Scalar>::Constant(dims.m_c, Scalar(1) / Scalar(dims.m_c));
    th.pi_a = Vector<Scalar>::Constant(dims.m_a, Scalar(1) / Scalar(dims.m_a));
    th.Sigma_m = Matrix<Scalar>::Identity(ny, ny);
    if (cfg.init == InitStrategy::Random) {
        for (int j = 0; j < dims.m_c; ++j)
            th.causal.push_back({detail::random_stable<Scalar>(rng, nc, Scalar(0.5)), detail::unit_rows<Scalar>(rng, ny, nc), Ic});
        for (int l = 0; l < dims.m_a; ++l)
            th.anticausal.push_back({detail::random_stable<Scalar>(rng, na, Scalar(0.5)), detail::unit_rows<Scalar>(rng, ny, na), Ia});
        return th;
    }
    const Index T = traj.T();
    for (int j = 0; j < dims.m_c; ++j) {
        const Scalar a = detail::ar1_coefficient(traj.y, T * j / dims.m_c, T * (j + 1) / dims.m_c);
        th.causal.push_back({a * Ic, detail::unit_rows<Scalar>(rng, ny, nc), Ic});
    }
    for (int l = 0; l < dims.m_a; ++l) {
        const Scalar a = detail::ar1_coefficient(traj.y, T * l / dims.m_a, T * (l + 1) / dims.m_a);
        th.anticausal.push_back({a * Ia, detail::unit_rows<Scalar>(rng, ny, na), Ia});
    }
    return th;
}

// ---------------------------------------------------------------------------
// Fit

namespace detail {

inline double label_change_fraction(const ModeSequence& a0, const ModeSequence& a1, const ModeSequence& b0,
                                    const ModeSequence& b1) {
    if (a0.size() == 0) return 1.0;
    Index changed = 0;
    for (Index t = 0; t < a1.size(); ++t) changed += (a0[t] != a1[t]) + (b0[t] != b1[t]);
    return static_cast<double>(changed) / static_cast<double>(2 * a1.size());
}

}  // namespace detail

/// Identifies theta from `traj.y`. Ground-truth modes in `traj`, when present,
/// are used only to record per-iteration match rates.
template <typename Scalar>
EmReport<Scalar> fit(const Trajectory<Scalar>& traj, const Dims& dims, const EmConfig<Scalar>& cfg) {
    if (auto v = cfg.violations(); !v.empty()) throw ValidationError(std::move(v));
    if (auto v = trajectory_violations(traj, &dims); !v.empty()) throw ValidationError(std::move(v));
    const Index T = traj.T();
    if (T < 10 * std::max(dims.n_xc, dims.n_xa)) {
        throw std::invalid_argument(fmt::format("T >= {} required for these state dimensions", 10 * std::max(dims.n_xc, dims.n_xa)));
    }
    const Matrix<Scalar>& y = traj.y;
    const EstepConfig ecfg = cfg.estep();

    EmReport<Scalar> rep;
    rep.initial_theta = initialize(traj, dims, cfg);
    validate_theta(rep.initial_theta);
    ThetaBundle<Scalar> theta = rep.initial_theta;
    EstepMemory<Scalar> memory;
    ModeSequence prev_c, prev_a;
    std::optional<std::pair<ModeSequence, ModeSequence>> frozen;

    int k = 0;
    try {
        for (k = 1; k <= cfg.max_iters; ++k) {
            IterationRecord<Scalar> rec;
            rec.k = k;
            rec.frozen = frozen.has_value();
            EstepResult<Scalar> e = run_estep(theta, y, memory, ecfg, frozen ? &*frozen : nullptr);
            rec.label_change = detail::label_change_fraction(prev_c, e.s_c, prev_a, e.s_a);
            if (!frozen && cfg.freeze_fraction > 0 && k > 1 && rec.label_change < cfg.freeze_fraction) {
                frozen.emplace(e.s_c, e.s_a);
            }
            if (traj.has_modes()) {
                rec.match_c = static_cast<double>(align_chain(e.s_c, *traj.s_c, dims.m_c).matches) / static_cast<double>(T);
                rec.match_a = static_cast<double>(align_chain(e.s_a, *traj.s_a, dims.m_a).matches) / static_cast<double>(T);
            }
            const Covariances<Scalar>* Pc = cfg.posterior_covariances ? &e.states.P_c_post : nullptr;
            const Covariances<Scalar>* Pa = cfg.posterior_covariances ? &e.states.P_a_post : nullptr;
            rec.q_estep = complete_data_loglik(theta, y, e.states.xhat_c_post, e.states.xhat_a_post, e.weights, Pc, Pa);
            MstepResult<Scalar> m = run_mstep(theta, y, e.states.xhat_c_post, e.states.xhat_a_post, e.weights, Pc, Pa);
            rec.q_mstep = complete_data_loglik(m.theta, y, e.states.xhat_c_post, e.states.xhat_a_post, e.weights, Pc, Pa);
            rec.max_delta = max_parameter_change(theta, m.theta);
            rec.warnings = std::move(m.warnings);
            rec.theta = m.theta;
            if (auto v = theta_violations(m.theta, MeasurementNoise::PositiveDefinite); !v.empty()) {
                throw ValidationError(std::move(v));
            }
            const bool ascent_ok = rec.q_mstep >= rec.q_estep - Scalar(kAscentSlack);
            const Scalar prev_q = rep.iterates.empty() ? Scalar(0) : rep.iterates.back().q_mstep;
            const bool has_prev = !rep.iterates.empty();
            rep.iterates.push_back(std::move(rec));
            prev_c = e.s_c;
            prev_a = e.s_a;
            memory = std::move(e.memory);
            if (!ascent_ok) {
                const auto& r = rep.iterates.back();
                rep.message = fmt::format("surrogate decreased in iteration {}: {:.17g} -> {:.17g}", k,
                                          static_cast<double>(r.q_estep), static_cast<double>(r.q_mstep));
                if (cfg.monotonicity == Monotonicity::Assert) {
                    rep.stop_reason = StopReason::MonotonicityViolation;
                    rep.converged = false;
                    theta = m.theta;
                    break;
                }
            }
            theta = std::move(m.theta);
            const auto& r = rep.iterates.back();
            if (r.max_delta < Scalar(cfg.tol_theta)) {
                rep.stop_reason = StopReason::TolTheta;
                rep.converged = true;
                break;
            }
            if (has_prev && std::abs(r.q_mstep - prev_q) < Scalar(cfg.tol_Q) * std::max(Scalar(1), std::abs(prev_q))) {
                rep.stop_reason = StopReason::TolQ;
                rep.converged = true;
                break;
            }
        }
        if (k > cfg.max_iters) {
            k = cfg.max_iters;
            rep.stop_reason = StopReason::MaxIters;
            rep.converged = false;
        }
        rep.final_theta = theta;
        EstepResult<Scalar> e = run_estep(theta, y, memory, ecfg, frozen ? &*frozen : nullptr);
        rep.final_states = std::move(e.states);
        rep.final_s_c = std::move(e.s_c);
        rep.final_s_a = std::move(e.s_a);
        rep.final_q = e.q;
    } catch (const std::exception& ex) {
        rep.final_theta = theta;
        throw EmError<Scalar>(k, ex.what(), std::move(rep));
    }
    return rep;
}

}  // namespace ncasm
