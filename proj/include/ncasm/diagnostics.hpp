#pragma once

/// @file diagnostics.hpp
/// Evaluation metrics and empirical probes: match rates, relative errors,
/// mode-restricted Gram spectra, residual running means and the
/// error-versus-horizon rate probe.

#include "ncasm/em.hpp"
#include "ncasm/linalg.hpp"
#include "ncasm/model.hpp"
#include "ncasm/parallel.hpp"
#include "ncasm/rng.hpp"
#include "ncasm/simulate.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace ncasm {

/// Fraction of time steps with equal labels. Sequences must already be
/// aligned.
inline double mode_match_rate(const ModeSequence& truth, const ModeSequence& est) {
    if (truth.size() != est.size()) {
        throw std::invalid_argument(fmt::format("mode_match_rate: length mismatch ({} vs {})", truth.size(), est.size()));
    }
    if (truth.size() == 0) throw std::invalid_argument("mode_match_rate: empty sequences");
    Index hits = 0;
    for (Index t = 0; t < truth.size(); ++t) hits += truth[t] == est[t];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// ‖x - x̂‖² / ‖x‖² over the whole stacked sequence.
template <typename A, typename B>
auto relative_state_error(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& xhat) {
    if (x.rows() != xhat.rows() || x.cols() != xhat.cols()) throw std::invalid_argument("relative_state_error: shape mismatch");
    const auto den = x.squaredNorm();
    if (!(den > 0)) throw std::invalid_argument("relative_state_error: truth has zero norm");
    return (x - xhat).squaredNorm() / den;
}

/// ‖y - ŷ‖ / ‖y‖ (not squared).
template <typename A, typename B>
auto output_reconstruction_error(const Eigen::MatrixBase<A>& y, const Eigen::MatrixBase<B>& yhat) {
    if (y.rows() != yhat.rows() || y.cols() != yhat.cols()) throw std::invalid_argument("output_reconstruction_error: shape mismatch");
    const auto den = y.norm();
    if (!(den > 0)) throw std::invalid_argument("output_reconstruction_error: y has zero norm");
    return (y - yhat).norm() / den;
}

/// ŷ(t) = C_c(ŝ_c(t)) x̂_c(t) + C_a(ŝ_a(t)) x̂_a(t).
template <typename Scalar>
Matrix<Scalar> reconstruct_output(const ThetaBundle<Scalar>& theta, const Matrix<Scalar>& xc, const Matrix<Scalar>& xa,
                                  const ModeSequence& s_c, const ModeSequence& s_a) {
    Matrix<Scalar> y(xc.rows(), theta.dims.n_y);
    for (Index t = 0; t < xc.rows(); ++t) {
        y.row(t) = (theta.causal[static_cast<std::size_t>(s_c[t])].C_c * xc.row(t).transpose() +
                    theta.anticausal[static_cast<std::size_t>(s_a[t])].C_a * xa.row(t).transpose())
                       .transpose();
    }
    return y;
}

struct GramSpectrum {
    double lambda_min = 0;
    double lambda_max = 0;
    double trace = 0;
    Index count = 0;
    bool empty = true;  ///< mode never visited; eigenvalues reported as 0
};

/// Eigen-range of W_j = Σ_{t: s(t)=j} x(t) x(t)ᵀ for every mode j < m.
template <typename Scalar>
std::vector<GramSpectrum> gram_spectra(const Matrix<Scalar>& x, const ModeSequence& s, int m) {
    if (s.size() != x.rows()) throw std::invalid_argument("gram_spectra: length mismatch");
    std::vector<Matrix<Scalar>> W(static_cast<std::size_t>(m), Matrix<Scalar>::Zero(x.cols(), x.cols()));
    std::vector<GramSpectrum> out(static_cast<std::size_t>(m));
    for (Index t = 0; t < x.rows(); ++t) {
        const auto j = static_cast<std::size_t>(s[t]);
        W[j].noalias() += x.row(t).transpose() * x.row(t);
        ++out[j].count;
    }
    for (std::size_t j = 0; j < W.size(); ++j) {
        if (out[j].count == 0) continue;
        Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(symmetrize(W[j]), Eigen::EigenvaluesOnly);
        out[j].lambda_min = static_cast<double>(es.eigenvalues().minCoeff());
        out[j].lambda_max = static_cast<double>(es.eigenvalues().maxCoeff());
        out[j].trace = static_cast<double>(W[j].trace());
        out[j].empty = false;
    }
    return out;
}

struct RunningMeans {
    std::vector<double> causal, anticausal, measurement;  ///< mean of ‖η‖² over 1..t
    bool causal_bounded = true, anticausal_bounded = true, measurement_bounded = true;

    bool bounded() const noexcept { return causal_bounded && anticausal_bounded && measurement_bounded; }
};

/// Running means of the squared model residuals
/// η_c(t) = x_c(t) - A_c(s_c(t)) x_c(t-1), η_a(t) = x_a(t) - A_a(s_a(t)) x_a(t+1),
/// η_m(t) = y(t) - C_c x_c(t) - C_a x_a(t), with zero boundary states. A curve
/// counts as bounded when its final value is at most twice its value at T/2.
template <typename Scalar>
RunningMeans residual_boundedness(const Trajectory<Scalar>& traj, const ThetaBundle<Scalar>& theta,
                                  const ModeSequence& s_c, const ModeSequence& s_a) {
    if (!traj.has_states()) throw std::invalid_argument("residual_boundedness needs ground-truth states");
    const Index T = traj.T();
    const Matrix<Scalar>& xc = *traj.x_c;
    const Matrix<Scalar>& xa = *traj.x_a;
    std::vector<double> ec(static_cast<std::size_t>(T)), ea(static_cast<std::size_t>(T)), em(static_cast<std::size_t>(T));
    for (Index t = 0; t < T; ++t) {
        const auto& pc = theta.causal[static_cast<std::size_t>(s_c[t])];
        const auto& pa = theta.anticausal[static_cast<std::size_t>(s_a[t])];
        Vector<Scalar> rc = xc.row(t).transpose();
        if (t > 0) rc -= pc.A_c * xc.row(t - 1).transpose();
        Vector<Scalar> ra = xa.row(t).transpose();
        if (t + 1 < T) ra -= pa.A_a * xa.row(t + 1).transpose();
        const Vector<Scalar> rm = traj.y.row(t).transpose() - pc.C_c * xc.row(t).transpose() - pa.C_a * xa.row(t).transpose();
        ec[static_cast<std::size_t>(t)] = static_cast<double>(rc.squaredNorm());
        ea[static_cast<std::size_t>(t)] = static_cast<double>(ra.squaredNorm());
        em[static_cast<std::size_t>(t)] = static_cast<double>(rm.squaredNorm());
    }
    auto running = [](const std::vector<double>& v) {
        std::vector<double> out(v.size());
        double acc = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            acc += v[i];
            out[i] = acc / static_cast<double>(i + 1);
        }
        return out;
    };
    RunningMeans rm{running(ec), running(ea), running(em)};
    auto bounded = [](const std::vector<double>& v) {
        const double half = v[v.size() / 2 - (v.size() >= 2 ? 1 : 0)];
        return std::isfinite(v.back()) && v.back() <= 2.0 * half + 1e-300;
    };
    rm.causal_bounded = bounded(rm.causal);
    rm.anticausal_bounded = bounded(rm.anticausal);
    rm.measurement_bounded = bounded(rm.measurement);
    return rm;
}

// ---------------------------------------------------------------------------
// Rate probe

/// Names and per-mode matrices compared by the rate probe.
template <typename Scalar>
std::vector<std::pair<std::string, Matrix<Scalar>>> mode_matrices(const ThetaBundle<Scalar>& th) {
    std::vector<std::pair<std::string, Matrix<Scalar>>> out;
    for (std::size_t j = 0; j < th.causal.size(); ++j) out.emplace_back(fmt::format("A_c({})", j + 1), th.causal[j].A_c);
    for (std::size_t l = 0; l < th.anticausal.size(); ++l) out.emplace_back(fmt::format("A_a({})", l + 1), th.anticausal[l].A_a);
    for (std::size_t j = 0; j < th.causal.size(); ++j) out.emplace_back(fmt::format("C_c({})", j + 1), th.causal[j].C_c);
    for (std::size_t l = 0; l < th.anticausal.size(); ++l) out.emplace_back(fmt::format("C_a({})", l + 1), th.anticausal[l].C_a);
    return out;
}

template <typename Scalar>
struct RateProbeConfig {
    std::vector<Index> horizons{100, 1000, 10000};
    int seeds = 10;
    std::uint64_t seed = 0;
    int jobs = 1;
    double perturb_rho = 0.02;
    /// Compare after align_coordinates; raw errors are recorded either way.
    bool align_coordinates = true;
    EmConfig<Scalar> em;  ///< init is overridden with perturb(theta_true, perturb_rho)
};

struct RateSample {
    Index horizon = 0;
    int seed = 0;
    std::string matrix;
    double error = 0;      ///< ‖Â - A‖_∞ after mode (and, if enabled, coordinate) alignment
    double raw_error = 0;  ///< after mode alignment only
};

struct RateFailure {
    Index horizon = 0;
    int seed = 0;
    std::string message;
};

struct RateProbe {
    std::vector<Index> horizons;
    std::vector<std::string> matrices;
    std::vector<RateSample> samples;
    std::vector<RateFailure> failures;
    /// median_error[m][h]: median over seeds of matrix m's error at horizon h.
    std::vector<std::vector<double>> median_error;
    /// gram[h]: median over seeds of (λ_min, λ_max) of the true-state Gram
    /// matrix of each mode, in the order A_c(1..m_c), A_a(1..m_a).
    std::vector<std::vector<std::pair<double, double>>> gram;
    std::vector<std::string> gram_names;  ///< W_c(j), W_a(l)
    std::vector<double> matrix_slope;  ///< per-matrix log-log slope of the medians
    double slope = std::numeric_limits<double>::quiet_NaN();  ///< pooled slope with per-matrix intercepts
    double median_seed_slope = std::numeric_limits<double>::quiet_NaN();
    bool degenerate = false;
    bool slope_undefined = false;
    std::size_t iterations = 0;         ///< EM iterations over all fits
    std::size_t ascent_violations = 0;  ///< iterations whose M step lowered the surrogate
    std::size_t invalid_estimates = 0;  ///< fits whose final theta fails validation
    std::vector<bool> monotone;  ///< per matrix: medians non-increasing in T
};

inline double rate_regressor(double T) { return std::log(std::sqrt(std::log(T) / T)); }

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Least-squares slope of log(e) on x pooled over series with separate
/// intercepts. Series entries that are non-positive or NaN are skipped.
inline double pooled_slope(const std::vector<double>& x, const std::vector<std::vector<double>>& series) {
    double sxy = 0, sxx = 0;
    for (const auto& e : series) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t h = 0; h < x.size(); ++h)
            if (e[h] > 0 && std::isfinite(e[h])) pts.emplace_back(x[h], std::log(e[h]));
        if (pts.size() < 2) continue;
        double mx = 0, my = 0;
        for (auto [a, b] : pts) mx += a, my += b;
        mx /= static_cast<double>(pts.size());
        my /= static_cast<double>(pts.size());
        for (auto [a, b] : pts) sxy += (a - mx) * (b - my), sxx += (a - mx) * (a - mx);
    }
    return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

/// Simulates `theta_true` at every horizon for every seed, identifies it from
/// a perturbed start, and relates the aligned parameter errors to
/// sqrt(log T / T).
template <typename Scalar>
RateProbe rate_probe(const ThetaBundle<Scalar>& theta_true, const RateProbeConfig<Scalar>& cfg) {
    if (cfg.horizons.empty()) throw std::invalid_argument("rate_probe: no horizons");
    for (std::size_t h = 0; h < cfg.horizons.size(); ++h) {
        if (cfg.horizons[h] < 2 || (h > 0 && cfg.horizons[h] <= cfg.horizons[h - 1])) {
            throw std::invalid_argument("rate_probe: horizons must be strictly increasing and >= 2");
        }
    }
    if (cfg.seeds < 1) throw std::invalid_argument("rate_probe: seeds must be >= 1");
    validate_theta(theta_true, MeasurementNoise::PositiveSemidefinite);
    const auto names = mode_matrices(theta_true);
    const std::size_t H = cfg.horizons.size(), S = static_cast<std::size_t>(cfg.seeds), M = names.size();
    const std::size_t G = static_cast<std::size_t>(theta_true.dims.m_c + theta_true.dims.m_a);

    struct Job {
        std::vector<double> errors, raw;
        std::vector<std::pair<double, double>> gram;
        std::optional<std::string> failure;
        std::size_t iterations = 0, ascent_violations = 0;
        bool valid = true;
    };
    std::vector<Job> jobs(H * S);
    parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
        const std::size_t h = i / S, s = i % S;
        Job& job = jobs[i];
        try {
            SimConfig<Scalar> sc;
            sc.T = cfg.horizons[h];
            sc.seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(cfg.horizons[h])), s);
            const Trajectory<Scalar> traj = simulate(theta_true, sc);
            EmConfig<Scalar> ec = cfg.em;
            ec.init = InitStrategy::Perturb;
            ec.perturb_reference = theta_true;
            ec.perturb_rho = cfg.perturb_rho;
            ec.seed = sc.seed;
            const EmReport<Scalar> rep = fit(traj, theta_true.dims, ec);
            job.iterations = rep.iterates.size();
            for (const auto& it : rep.iterates)
                if (it.q_mstep < it.q_estep - Scalar(kAscentSlack)) ++job.ascent_violations;
            job.valid = theta_violations(rep.final_theta).empty();
            const auto al = align_modes(rep.final_s_c, rep.final_s_a, rep.final_theta, *traj.s_c, *traj.s_a);
            const auto raw = mode_matrices(al.theta);
            const auto est = cfg.align_coordinates ? mode_matrices(align_coordinates(al.theta, theta_true)) : raw;
            for (std::size_t m = 0; m < M; ++m) {
                job.errors.push_back(static_cast<double>(inf_norm(est[m].second - names[m].second)));
                job.raw.push_back(static_cast<double>(inf_norm(raw[m].second - names[m].second)));
            }
            for (const auto& g : gram_spectra(*traj.x_c, *traj.s_c, theta_true.dims.m_c))
                job.gram.emplace_back(g.lambda_min, g.lambda_max);
            for (const auto& g : gram_spectra(*traj.x_a, *traj.s_a, theta_true.dims.m_a))
                job.gram.emplace_back(g.lambda_min, g.lambda_max);
        } catch (const std::exception& ex) {
            job.failure = ex.what();
        }
    });

    RateProbe out;
    out.horizons = cfg.horizons;
    for (const auto& n : names) out.matrices.push_back(n.first);
    for (int j = 0; j < theta_true.dims.m_c; ++j) out.gram_names.push_back(fmt::format("W_c({})", j + 1));
    for (int l = 0; l < theta_true.dims.m_a; ++l) out.gram_names.push_back(fmt::format("W_a({})", l + 1));
    out.median_error.assign(M, std::vector<double>(H, std::numeric_limits<double>::quiet_NaN()));
    out.gram.assign(H, std::vector<std::pair<double, double>>(G, {0.0, 0.0}));
    std::vector<std::vector<std::vector<double>>> seed_errors(M, std::vector<std::vector<double>>(S, std::vector<double>(H, std::numeric_limits<double>::quiet_NaN())));
    for (std::size_t h = 0; h < H; ++h) {
        std::vector<std::vector<double>> per_matrix(M);
        std::vector<std::vector<double>> lo(G), hi(G);
        for (std::size_t s = 0; s < S; ++s) {
            const Job& job = jobs[h * S + s];
            out.iterations += job.iterations;
            out.ascent_violations += job.ascent_violations;
            out.invalid_estimates += !job.valid;
            if (job.failure) {
                out.failures.push_back({cfg.horizons[h], static_cast<int>(s), *job.failure});
                continue;
            }
            for (std::size_t m = 0; m < M; ++m) {
                out.samples.push_back({cfg.horizons[h], static_cast<int>(s), names[m].first, job.errors[m], job.raw[m]});
                per_matrix[m].push_back(job.errors[m]);
                seed_errors[m][s][h] = job.errors[m];
            }
            for (std::size_t g = 0; g < G; ++g) {
                lo[g].push_back(job.gram[g].first);
                hi[g].push_back(job.gram[g].second);
            }
        }
        for (std::size_t m = 0; m < M; ++m) out.median_error[m][h] = detail::median(per_matrix[m]);
        for (std::size_t g = 0; g < G; ++g) out.gram[h][g] = {detail::median(lo[g]), detail::median(hi[g])};
    }

    std::vector<double> x;
    for (Index T : cfg.horizons) x.push_back(rate_regressor(static_cast<double>(T)));
    double largest = 0;
    for (const auto& row : out.median_error)
        for (double e : row)
            if (std::isfinite(e)) largest = std::max(largest, e);
    out.degenerate = largest < 1e-9;
    out.slope_undefined = H < 2;
    out.monotone.assign(M, true);
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t h = 1; h < H; ++h)
            if (!(out.median_error[m][h] <= out.median_error[m][h - 1])) out.monotone[m] = false;
    if (!out.degenerate && !out.slope_undefined) {
        out.slope = detail::pooled_slope(x, out.median_error);
        for (std::size_t m = 0; m < M; ++m) out.matrix_slope.push_back(detail::pooled_slope(x, {out.median_error[m]}));
        std::vector<double> per_seed;
        for (std::size_t s = 0; s < S; ++s) {
            std::vector<std::vector<double>> series;
            for (std::size_t m = 0; m < M; ++m) series.push_back(seed_errors[m][s]);
            const double sl = detail::pooled_slope(x, series);
            if (std::isfinite(sl)) per_seed.push_back(sl);
        }
        out.median_seed_slope = detail::median(per_seed);
    }
    if (out.slope_undefined || out.degenerate) out.matrix_slope.assign(M, std::numeric_limits<double>::quiet_NaN());
    return out;
}

}  // namespace ncasm
