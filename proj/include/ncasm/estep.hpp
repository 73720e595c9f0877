#pragma once

/// @file estep.hpp
/// State and mode inference for the coupled causal / anti-causal chains.
///
/// Both chains share one innovation e = y - C_c x_c⁻ - C_a x_a⁻ and one
/// innovation covariance S = C_c P_c⁻ C_cᵀ + C_a P_a⁻ C_aᵀ + Σ_m. Each chain's
/// gain K = P⁻ Cᵀ S⁻¹ minimizes the trace of its own posterior covariance,
/// treating the other chain's prior error as an extra, independent output
/// disturbance. The causal chain is filtered forward in time, the anti-causal
/// chain backward; a sweep is one pass of each.

#include "ncasm/linalg.hpp"
#include "ncasm/model.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace ncasm {

/// Per-time mode weights, rows summing to one.
template <typename Scalar>
struct ModeWeights {
    Matrix<Scalar> w_c;  ///< T x m_c
    Matrix<Scalar> w_a;  ///< T x m_a
};

template <typename Scalar>
ModeWeights<Scalar> one_hot_weights(const ModeSequence& s_c, int m_c, const ModeSequence& s_a, int m_a) {
    ModeWeights<Scalar> w{Matrix<Scalar>::Zero(s_c.size(), m_c), Matrix<Scalar>::Zero(s_a.size(), m_a)};
    for (Index t = 0; t < s_c.size(); ++t) w.w_c(t, s_c[t]) = Scalar(1);
    for (Index t = 0; t < s_a.size(); ++t) w.w_a(t, s_a[t]) = Scalar(1);
    return w;
}

/// Priors, posteriors and gains of both chains for every time step. Row t of
/// the state matrices is time t+1.
template <typename Scalar>
struct FilterState {
    Matrix<Scalar> xhat_c_prior, xhat_c_post;
    Matrix<Scalar> xhat_a_prior, xhat_a_post;
    std::vector<Matrix<Scalar>> P_c_prior, P_c_post;
    std::vector<Matrix<Scalar>> P_a_prior, P_a_post;
    std::vector<Matrix<Scalar>> K_c, K_a;

    Index T() const noexcept { return xhat_c_post.rows(); }
};

template <typename Scalar>
struct Prediction {
    Vector<Scalar> x;
    Matrix<Scalar> P;
};

/// x⁻ = A_c x̂(t-1), P⁻ = A_c P(t-1) A_cᵀ + Σ_c.
template <typename Scalar>
Prediction<Scalar> predict_causal(const Vector<Scalar>& xhat_prev, const Matrix<Scalar>& P_prev,
                                  const CausalModeParams<Scalar>& mode) {
    return {mode.A_c * xhat_prev, symmetrize(mode.A_c * P_prev * mode.A_c.transpose() + mode.Sigma_c)};
}

/// x⁻ = A_a x̂(t+1), P⁻ = A_a P(t+1) A_aᵀ + Σ_a.
template <typename Scalar>
Prediction<Scalar> predict_anticausal(const Vector<Scalar>& xhat_next, const Matrix<Scalar>& P_next,
                                      const AntiCausalModeParams<Scalar>& mode) {
    return {mode.A_a * xhat_next, symmetrize(mode.A_a * P_next * mode.A_a.transpose() + mode.Sigma_a)};
}

template <typename Scalar>
Matrix<Scalar> innovation_covariance(const Matrix<Scalar>& P_c_prior, const Matrix<Scalar>& P_a_prior,
                                     const Matrix<Scalar>& C_c, const Matrix<Scalar>& C_a,
                                     const Matrix<Scalar>& Sigma_m) {
    return symmetrize(C_c * P_c_prior * C_c.transpose() + C_a * P_a_prior * C_a.transpose() + Sigma_m);
}

template <typename Scalar>
struct Correction {
    Vector<Scalar> x_c, x_a;
    Matrix<Scalar> P_c, P_a;
    Matrix<Scalar> K_c, K_a;
    Vector<Scalar> innovation;
    Matrix<Scalar> S;
};

/// Coupled measurement update of both chains from one output sample.
/// `t` only labels the error message.
template <typename Scalar>
Correction<Scalar> correct(const Vector<Scalar>& xhat_c_prior, const Vector<Scalar>& xhat_a_prior,
                           const Matrix<Scalar>& P_c_prior, const Matrix<Scalar>& P_a_prior,
                           const Vector<Scalar>& y_t, const Matrix<Scalar>& C_c, const Matrix<Scalar>& C_a,
                           const Matrix<Scalar>& Sigma_m, std::optional<Index> t = std::nullopt) {
    Correction<Scalar> out;
    out.S = innovation_covariance(P_c_prior, P_a_prior, C_c, C_a, Sigma_m);
    Eigen::LLT<Matrix<Scalar>> llt(out.S);
    if (llt.info() != Eigen::Success) {
        throw NumericalError(t ? fmt::format("singular innovation covariance at t={}", *t + 1)
                               : std::string("singular innovation covariance"));
    }
    out.innovation = y_t - C_c * xhat_c_prior - C_a * xhat_a_prior;
    // S symmetric: K = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ.
    out.K_c = llt.solve(C_c * P_c_prior).transpose();
    out.K_a = llt.solve(C_a * P_a_prior).transpose();
    out.x_c = xhat_c_prior + out.K_c * out.innovation;
    out.x_a = xhat_a_prior + out.K_a * out.innovation;
    const Index nc = P_c_prior.rows();
    const Index na = P_a_prior.rows();
    out.P_c = symmetrize((Matrix<Scalar>::Identity(nc, nc) - out.K_c * C_c) * P_c_prior);
    out.P_a = symmetrize((Matrix<Scalar>::Identity(na, na) - out.K_a * C_a) * P_a_prior);
    return out;
}

/// Posterior covariance of the causal chain for an arbitrary gain K:
/// (I - K C_c) P_c⁻ (I - K C_c)ᵀ + K C_a P_a⁻ C_aᵀ Kᵀ + K Σ_m Kᵀ.
/// Its trace is minimized by the gain used in correct().
template <typename Scalar>
Matrix<Scalar> causal_covariance_for_gain(const Matrix<Scalar>& K, const Matrix<Scalar>& P_c_prior,
                                          const Matrix<Scalar>& P_a_prior, const Matrix<Scalar>& C_c,
                                          const Matrix<Scalar>& C_a, const Matrix<Scalar>& Sigma_m) {
    const Matrix<Scalar> IKC = Matrix<Scalar>::Identity(P_c_prior.rows(), P_c_prior.rows()) - K * C_c;
    return IKC * P_c_prior * IKC.transpose() + K * C_a * P_a_prior * C_a.transpose() * K.transpose() +
           K * Sigma_m * K.transpose();
}

/// Mirror of causal_covariance_for_gain for the anti-causal chain.
template <typename Scalar>
Matrix<Scalar> anticausal_covariance_for_gain(const Matrix<Scalar>& K, const Matrix<Scalar>& P_c_prior,
                                              const Matrix<Scalar>& P_a_prior, const Matrix<Scalar>& C_c,
                                              const Matrix<Scalar>& C_a, const Matrix<Scalar>& Sigma_m) {
    const Matrix<Scalar> IKC = Matrix<Scalar>::Identity(P_a_prior.rows(), P_a_prior.rows()) - K * C_a;
    return IKC * P_a_prior * IKC.transpose() + K * C_c * P_c_prior * C_c.transpose() * K.transpose() +
           K * Sigma_m * K.transpose();
}

/// log N(y; C_c x_c⁻ + C_a x_a⁻, S) for one candidate pair of priors.
template <typename Scalar>
Scalar predictive_log_density(const Vector<Scalar>& y_t, const Prediction<Scalar>& c, const Prediction<Scalar>& a,
                              const Matrix<Scalar>& C_c, const Matrix<Scalar>& C_a, const Matrix<Scalar>& Sigma_m) {
    const Matrix<Scalar> S = innovation_covariance(c.P, a.P, C_c, C_a, Sigma_m);
    const Vector<Scalar> r = y_t - C_c * c.x - C_a * a.x;
    Eigen::LLT<Matrix<Scalar>> llt(S);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<Scalar>::infinity();
    return gaussian_log_density(r, S);
}

template <typename Scalar>
Scalar log_prob(Scalar p) {
    return p > Scalar(0) ? std::log(p) : -std::numeric_limits<Scalar>::infinity();
}

struct EstepConfig {
    int sweeps = 2;
    bool soft_weights = false;
    bool joint_mode_search = false;
    /// Covariance of the zero-mean prior assumed for the opposite chain before
    /// any backward pass has run.
    double diffuse_prior_scale = 10.0;
};

/// Anti-causal posteriors and labels carried from one backward pass to the
/// next forward pass (and across EM iterations).
template <typename Scalar>
struct EstepMemory {
    Matrix<Scalar> xhat_a_post;
    std::vector<Matrix<Scalar>> P_a_post;
    ModeSequence s_a;

    bool empty() const noexcept { return s_a.size() == 0; }
};

template <typename Scalar>
struct EstepResult {
    FilterState<Scalar> states;
    ModeWeights<Scalar> weights;
    ModeSequence s_c, s_a;
    Scalar q = 0;  ///< surrogate complete-data log-likelihood at the current theta
    EstepMemory<Scalar> memory;
};

namespace detail {

/// Index of the largest score; ties go to the smaller index. Falls back to the
/// largest prior probability when every score is -inf.
template <typename Scalar>
int argmax_score(const std::vector<Scalar>& score, const Vector<Scalar>& pi) {
    int best = -1;
    for (int j = 0; j < static_cast<int>(score.size()); ++j) {
        if (!std::isfinite(score[static_cast<std::size_t>(j)])) continue;
        if (best < 0 || score[static_cast<std::size_t>(j)] > score[static_cast<std::size_t>(best)]) best = j;
    }
    if (best < 0) pi.maxCoeff(&best);
    return best;
}

template <typename Scalar, typename Row>
void softmax_into(const std::vector<Scalar>& score, Row&& row, int fallback) {
    Scalar top = -std::numeric_limits<Scalar>::infinity();
    for (Scalar s : score) top = std::max(top, s);
    row.setZero();
    if (!std::isfinite(top)) {
        row(0, fallback) = Scalar(1);
        return;
    }
    Scalar total = 0;
    for (std::size_t j = 0; j < score.size(); ++j) {
        const Scalar e = std::isfinite(score[j]) ? std::exp(score[j] - top) : Scalar(0);
        row(0, static_cast<Index>(j)) = e;
        total += e;
    }
    row /= total;
}

/// Prior of chain a at time t (0-based) under mode l, built from the previous
/// backward pass' posterior at t+1, or the diffuse prior when there is none.
template <typename Scalar>
Prediction<Scalar> anticausal_prior_from_memory(const ThetaBundle<Scalar>& theta, const EstepMemory<Scalar>& mem,
                                                Index t, int l, Scalar diffuse) {
    const Index n = theta.dims.n_xa;
    if (mem.empty()) return {Vector<Scalar>::Zero(n), diffuse * Matrix<Scalar>::Identity(n, n)};
    const Index T = mem.xhat_a_post.rows();
    if (t + 1 >= T) {
        return predict_anticausal<Scalar>(Vector<Scalar>::Zero(n), Matrix<Scalar>::Zero(n, n),
                                          theta.anticausal[static_cast<std::size_t>(l)]);
    }
    return predict_anticausal<Scalar>(mem.xhat_a_post.row(t + 1).transpose(), mem.P_a_post[static_cast<std::size_t>(t + 1)],
                                      theta.anticausal[static_cast<std::size_t>(l)]);
}

}  // namespace detail

/// Hard mode assignment on a completed filter pass. For every t the candidate
/// priors of each mode are rebuilt from the neighbouring posteriors; the causal
/// label maximizes N(y; ·)·π^c_j with the anti-causal label held, then the
/// anti-causal label is re-chosen with the causal one held, until neither
/// changes. With `joint` the pair is chosen by exhaustive search.
template <typename Scalar>
std::pair<ModeSequence, ModeSequence> classify_modes(const ThetaBundle<Scalar>& theta, const Matrix<Scalar>& y,
                                                     const FilterState<Scalar>& fs, ModeSequence s_c,
                                                     ModeSequence s_a, bool joint = false) {
    const Dims& d = theta.dims;
    const Index T = y.rows();
    const Vector<Scalar> zc = Vector<Scalar>::Zero(d.n_xc);
    const Vector<Scalar> za = Vector<Scalar>::Zero(d.n_xa);
    const Matrix<Scalar> Zc = Matrix<Scalar>::Zero(d.n_xc, d.n_xc);
    const Matrix<Scalar> Za = Matrix<Scalar>::Zero(d.n_xa, d.n_xa);
    for (Index t = 0; t < T; ++t) {
        const Vector<Scalar> yt = y.row(t).transpose();
        std::vector<Prediction<Scalar>> pc, pa;
        for (int j = 0; j < d.m_c; ++j) {
            pc.push_back(t == 0 ? predict_causal(zc, Zc, theta.causal[j])
                                : predict_causal<Scalar>(fs.xhat_c_post.row(t - 1).transpose(), fs.P_c_post[t - 1],
                                                         theta.causal[j]));
        }
        for (int l = 0; l < d.m_a; ++l) {
            pa.push_back(t + 1 == T ? predict_anticausal(za, Za, theta.anticausal[l])
                                    : predict_anticausal<Scalar>(fs.xhat_a_post.row(t + 1).transpose(),
                                                                 fs.P_a_post[t + 1], theta.anticausal[l]));
        }
        auto score = [&](int j, int l) {
            return predictive_log_density(yt, pc[j], pa[l], theta.causal[j].C_c, theta.anticausal[l].C_a,
                                          theta.Sigma_m);
        };
        if (joint) {
            Scalar best = -std::numeric_limits<Scalar>::infinity();
            int bj = -1, bl = -1;
            for (int j = 0; j < d.m_c; ++j)
                for (int l = 0; l < d.m_a; ++l) {
                    const Scalar s = score(j, l) + log_prob(theta.pi_c(j)) + log_prob(theta.pi_a(l));
                    if (std::isfinite(s) && (bj < 0 || s > best)) {
                        best = s;
                        bj = j;
                        bl = l;
                    }
                }
            if (bj < 0) {
                theta.pi_c.maxCoeff(&bj);
                theta.pi_a.maxCoeff(&bl);
            }
            s_c[t] = bj;
            s_a[t] = bl;
            continue;
        }
        // Coordinate ascent on the pair score; strict improvement only, so it terminates.
        for (int round = 0; round < d.m_c * d.m_a + 2; ++round) {
            std::vector<Scalar> sc(static_cast<std::size_t>(d.m_c));
            for (int j = 0; j < d.m_c; ++j) sc[j] = score(j, s_a[t]) + log_prob(theta.pi_c(j));
            int jn = detail::argmax_score(sc, theta.pi_c);
            if (std::isfinite(sc[s_c[t]]) && !(sc[jn] > sc[s_c[t]])) jn = s_c[t];
            std::vector<Scalar> sa(static_cast<std::size_t>(d.m_a));
            for (int l = 0; l < d.m_a; ++l) sa[l] = score(jn, l) + log_prob(theta.pi_a(l));
            int ln = detail::argmax_score(sa, theta.pi_a);
            if (std::isfinite(sa[s_a[t]]) && !(sa[ln] > sa[s_a[t]])) ln = s_a[t];
            const bool stable = jn == s_c[t] && ln == s_a[t];
            s_c[t] = jn;
            s_a[t] = ln;
            if (stable) break;
        }
    }
    return {std::move(s_c), std::move(s_a)};
}

/// Surrogate complete-data log-likelihood with the posterior means plugged in
/// for the states and `weights` for the modes. x_c(0) and x_a(T+1) are zero.
/// With `posterior_covariances` the Gaussian expectation over independent
/// per-time posteriors N(x̂(t), P(t)) is taken instead of the plug-in value.
template <typename Scalar>
Scalar complete_data_loglik(const ThetaBundle<Scalar>& theta, const Matrix<Scalar>& y, const Matrix<Scalar>& xc,
                            const Matrix<Scalar>& xa, const ModeWeights<Scalar>& w,
                            const std::vector<Matrix<Scalar>>* P_c = nullptr,
                            const std::vector<Matrix<Scalar>>* P_a = nullptr) {
    const Dims& d = theta.dims;
    const Index T = y.rows();
    const bool expect = P_c != nullptr && P_a != nullptr;
    std::vector<Matrix<Scalar>> inv_c, inv_a;
    if (expect) {
        for (const auto& p : theta.causal) inv_c.push_back(regularized_inverse(p.Sigma_c));
        for (const auto& p : theta.anticausal) inv_a.push_back(regularized_inverse(p.Sigma_a));
    }
    const Matrix<Scalar> inv_m = expect ? regularized_inverse(theta.Sigma_m) : Matrix<Scalar>();
    Scalar q = 0;
    for (Index t = 0; t < T; ++t) {
        const Vector<Scalar> xc_t = xc.row(t).transpose();
        const Vector<Scalar> xa_t = xa.row(t).transpose();
        const Vector<Scalar> xc_prev = t > 0 ? Vector<Scalar>(xc.row(t - 1).transpose()) : Vector<Scalar>::Zero(d.n_xc);
        const Vector<Scalar> xa_next =
            t + 1 < T ? Vector<Scalar>(xa.row(t + 1).transpose()) : Vector<Scalar>::Zero(d.n_xa);
        for (int j = 0; j < d.m_c; ++j) {
            const Scalar wj = w.w_c(t, j);
            if (wj <= Scalar(0)) continue;
            const auto& p = theta.causal[j];
            Scalar term = gaussian_log_density<Scalar>(xc_t - p.A_c * xc_prev, p.Sigma_c) + log_prob(theta.pi_c(j));
            if (expect) {
                Matrix<Scalar> V = (*P_c)[t];
                if (t > 0) V += p.A_c * (*P_c)[t - 1] * p.A_c.transpose();
                term -= Scalar(0.5) * (inv_c[j] * V).trace();
            }
            q += wj * term;
        }
        for (int l = 0; l < d.m_a; ++l) {
            const Scalar wl = w.w_a(t, l);
            if (wl <= Scalar(0)) continue;
            const auto& p = theta.anticausal[l];
            Scalar term = gaussian_log_density<Scalar>(xa_t - p.A_a * xa_next, p.Sigma_a) + log_prob(theta.pi_a(l));
            if (expect) {
                Matrix<Scalar> V = (*P_a)[t];
                if (t + 1 < T) V += p.A_a * (*P_a)[t + 1] * p.A_a.transpose();
                term -= Scalar(0.5) * (inv_a[l] * V).trace();
            }
            q += wl * term;
        }
        for (int j = 0; j < d.m_c; ++j) {
            for (int l = 0; l < d.m_a; ++l) {
                const Scalar wjl = w.w_c(t, j) * w.w_a(t, l);
                if (wjl <= Scalar(0)) continue;
                const auto& Cc = theta.causal[j].C_c;
                const auto& Ca = theta.anticausal[l].C_a;
                const Vector<Scalar> r = y.row(t).transpose() - Cc * xc_t - Ca * xa_t;
                Scalar term = gaussian_log_density<Scalar>(r, theta.Sigma_m);
                if (expect) {
                    const Matrix<Scalar> V =
                        Cc * (*P_c)[t] * Cc.transpose() + Ca * (*P_a)[t] * Ca.transpose();
                    term -= Scalar(0.5) * (inv_m * V).trace();
                }
                q += wjl * term;
            }
        }
    }
    return q;
}

/// One E-step: `cfg.sweeps` rounds of (forward causal pass, backward
/// anti-causal pass). The forward pass takes the opposite chain's prior from
/// `memory` (diffuse when empty); the backward pass uses the causal priors of
/// the forward pass just completed. When `fixed_modes` is given the labels are
/// not re-estimated.
template <typename Scalar>
EstepResult<Scalar> run_estep(const ThetaBundle<Scalar>& theta, const Matrix<Scalar>& y, EstepMemory<Scalar> memory,
                              const EstepConfig& cfg = {},
                              const std::pair<ModeSequence, ModeSequence>* fixed_modes = nullptr) {
    const Dims& d = theta.dims;
    const Index T = y.rows();
    if (y.cols() != d.n_y) throw std::invalid_argument("output dimension does not match theta");
    if (cfg.sweeps < 1) throw std::invalid_argument("sweeps must be >= 1");
    const Scalar diffuse = static_cast<Scalar>(cfg.diffuse_prior_scale);
    const Index nc = d.n_xc, na = d.n_xa;

    EstepResult<Scalar> res;
    FilterState<Scalar>& fs = res.states;
    fs.xhat_c_prior.resize(T, nc);
    fs.xhat_c_post.resize(T, nc);
    fs.xhat_a_prior.resize(T, na);
    fs.xhat_a_post.resize(T, na);
    fs.P_c_prior.resize(static_cast<std::size_t>(T));
    fs.P_c_post.resize(static_cast<std::size_t>(T));
    fs.P_a_prior.resize(static_cast<std::size_t>(T));
    fs.P_a_post.resize(static_cast<std::size_t>(T));
    fs.K_c.resize(static_cast<std::size_t>(T));
    fs.K_a.resize(static_cast<std::size_t>(T));
    res.weights.w_c = Matrix<Scalar>::Zero(T, d.m_c);
    res.weights.w_a = Matrix<Scalar>::Zero(T, d.m_a);
    res.s_c.labels.assign(static_cast<std::size_t>(T), 0);
    res.s_a.labels.assign(static_cast<std::size_t>(T), 0);

    std::vector<Scalar> score_c(static_cast<std::size_t>(d.m_c)), score_a(static_cast<std::size_t>(d.m_a));
    std::vector<Prediction<Scalar>> cand_c(static_cast<std::size_t>(d.m_c)), cand_a(static_cast<std::size_t>(d.m_a));

    for (int sweep = 0; sweep < cfg.sweeps; ++sweep) {
        const bool no_memory = memory.empty();
        // Forward pass: causal chain.
        Vector<Scalar> x = Vector<Scalar>::Zero(nc);
        Matrix<Scalar> P = Matrix<Scalar>::Zero(nc, nc);
        for (Index t = 0; t < T; ++t) {
            const Vector<Scalar> yt = y.row(t).transpose();
            for (int j = 0; j < d.m_c; ++j) cand_c[j] = predict_causal(x, P, theta.causal[j]);
            int j_sel = 0;
            int l_used = 0;
            if (fixed_modes) {
                j_sel = fixed_modes->first[t];
                l_used = fixed_modes->second[t];
            } else if (no_memory || cfg.joint_mode_search) {
                // No anti-causal label yet (or joint search requested): search all pairs.
                for (int l = 0; l < d.m_a; ++l)
                    cand_a[l] = detail::anticausal_prior_from_memory(theta, memory, t, l, diffuse);
                Scalar best = -std::numeric_limits<Scalar>::infinity();
                int bj = -1, bl = -1;
                for (int j = 0; j < d.m_c; ++j) {
                    Scalar marginal = -std::numeric_limits<Scalar>::infinity();
                    for (int l = 0; l < d.m_a; ++l) {
                        const Scalar s = predictive_log_density(yt, cand_c[j], cand_a[l], theta.causal[j].C_c,
                                                                theta.anticausal[l].C_a, theta.Sigma_m) +
                                         log_prob(theta.pi_c(j)) + log_prob(theta.pi_a(l));
                        if (std::isfinite(s)) {
                            marginal = std::isfinite(marginal) ? std::max(marginal, s) +
                                                                     std::log1p(std::exp(-std::abs(marginal - s)))
                                                               : s;
                            if (bj < 0 || s > best) {
                                best = s;
                                bj = j;
                                bl = l;
                            }
                        }
                    }
                    score_c[j] = marginal;
                }
                if (bj < 0) {
                    theta.pi_c.maxCoeff(&bj);
                    theta.pi_a.maxCoeff(&bl);
                }
                j_sel = bj;
                l_used = bl;
            } else {
                l_used = memory.s_a[t];
                const Prediction<Scalar> ap = detail::anticausal_prior_from_memory(theta, memory, t, l_used, diffuse);
                for (int j = 0; j < d.m_c; ++j) {
                    score_c[j] = predictive_log_density(yt, cand_c[j], ap, theta.causal[j].C_c,
                                                        theta.anticausal[l_used].C_a, theta.Sigma_m) +
                                 log_prob(theta.pi_c(j));
                }
                j_sel = detail::argmax_score(score_c, theta.pi_c);
            }
            const Prediction<Scalar> ap = detail::anticausal_prior_from_memory(theta, memory, t, l_used, diffuse);
            const Prediction<Scalar>& cp = cand_c[j_sel];
            const Correction<Scalar> c = correct(cp.x, ap.x, cp.P, ap.P, yt, theta.causal[j_sel].C_c,
                                                 theta.anticausal[l_used].C_a, theta.Sigma_m, t);
            x = c.x_c;
            P = c.P_c;
            fs.xhat_c_prior.row(t) = cp.x.transpose();
            fs.P_c_prior[t] = cp.P;
            fs.xhat_c_post.row(t) = x.transpose();
            fs.P_c_post[t] = P;
            fs.K_c[t] = c.K_c;
            res.s_c[t] = j_sel;
            if (cfg.soft_weights && !fixed_modes) {
                detail::softmax_into<Scalar>(score_c, res.weights.w_c.row(t), j_sel);
            }
        }

        // Backward pass: anti-causal chain.
        x = Vector<Scalar>::Zero(na);
        P = Matrix<Scalar>::Zero(na, na);
        for (Index t = T - 1; t >= 0; --t) {
            const Vector<Scalar> yt = y.row(t).transpose();
            const int j_used = res.s_c[t];
            const Prediction<Scalar> cp{fs.xhat_c_prior.row(t).transpose(), fs.P_c_prior[t]};
            for (int l = 0; l < d.m_a; ++l) cand_a[l] = predict_anticausal(x, P, theta.anticausal[l]);
            int l_sel = 0;
            if (fixed_modes) {
                l_sel = fixed_modes->second[t];
            } else {
                for (int l = 0; l < d.m_a; ++l) {
                    score_a[l] = predictive_log_density(yt, cp, cand_a[l], theta.causal[j_used].C_c,
                                                        theta.anticausal[l].C_a, theta.Sigma_m) +
                                 log_prob(theta.pi_a(l));
                }
                l_sel = detail::argmax_score(score_a, theta.pi_a);
            }
            const Prediction<Scalar>& ap = cand_a[l_sel];
            const Correction<Scalar> c = correct(cp.x, ap.x, cp.P, ap.P, yt, theta.causal[j_used].C_c,
                                                 theta.anticausal[l_sel].C_a, theta.Sigma_m, t);
            x = c.x_a;
            P = c.P_a;
            fs.xhat_a_prior.row(t) = ap.x.transpose();
            fs.P_a_prior[t] = ap.P;
            fs.xhat_a_post.row(t) = x.transpose();
            fs.P_a_post[t] = P;
            fs.K_a[t] = c.K_a;
            res.s_a[t] = l_sel;
            if (cfg.soft_weights && !fixed_modes) {
                detail::softmax_into<Scalar>(score_a, res.weights.w_a.row(t), l_sel);
            }
        }
        memory.xhat_a_post = fs.xhat_a_post;
        memory.P_a_post = fs.P_a_post;
        memory.s_a = res.s_a;
    }
    if (!fs.xhat_c_post.allFinite() || !fs.xhat_a_post.allFinite()) {
        throw NumericalError("state estimates are not finite");
    }
    if (!cfg.soft_weights || fixed_modes) {
        res.weights = one_hot_weights<Scalar>(res.s_c, d.m_c, res.s_a, d.m_a);
    }
    res.q = complete_data_loglik(theta, y, fs.xhat_c_post, fs.xhat_a_post, res.weights);
    res.memory = std::move(memory);
    return res;
}

}  // namespace ncasm
