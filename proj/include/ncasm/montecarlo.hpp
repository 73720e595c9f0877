#pragma once

/// @file montecarlo.hpp
/// Repeated simulate-and-identify trials over a list of process-noise levels.

#include "ncasm/diagnostics.hpp"
#include "ncasm/em.hpp"
#include "ncasm/parallel.hpp"
#include "ncasm/simulate.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ncasm {

template <typename Scalar>
struct MonteCarloConfig {
    /// Subsystem matrices, π and Σ_m; Σ_c and Σ_a are replaced by level·I.
    ThetaBundle<Scalar> base;
    std::vector<double> levels{0.01, 0.1, 0.5, 1.0};
    int trials = 100;
    Index T = 10000;
    std::uint64_t seed = 0;
    int jobs = 1;
    /// When init is Perturb the reference is the level's true theta.
    EmConfig<Scalar> em;
};

struct TrialResult {
    double level = 0;
    int trial = 0;
    bool ok = false;
    double match_c = 0, match_a = 0;
    double delta_c = 0, delta_a = 0;
    bool converged = false;
    int iterations = 0;
    bool ascent_ok = true;  ///< every iteration satisfied the surrogate ascent check
    bool valid = true;      ///< the final theta passes validation
    std::string error;
};

struct LevelSummary {
    double level = 0;
    int succeeded = 0, failed = 0;
    double mean_c = 0, var_c = 0;
    double mean_a = 0, var_a = 0;
};

struct MonteCarloResult {
    std::vector<TrialResult> trials;  ///< level-major, trial-minor
    std::vector<LevelSummary> levels;
};

inline std::uint64_t trial_seed(std::uint64_t master, std::size_t level_index, int trial) {
    return derive_seed(derive_seed(master, 1000 + level_index), static_cast<std::uint64_t>(trial));
}

/// Mean and (n-1)-normalized variance; variance is 0 for fewer than 2 values.
inline std::pair<double, double> mean_variance(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, s / static_cast<double>(v.size() - 1)};
}

template <typename Scalar>
TrialResult run_trial(const ThetaBundle<Scalar>& truth, double level, int trial, std::uint64_t seed, Index T,
                      EmConfig<Scalar> em) {
    TrialResult r;
    r.level = level;
    r.trial = trial;
    try {
        SimConfig<Scalar> sc;
        sc.T = T;
        sc.seed = seed;
        const Trajectory<Scalar> traj = simulate(truth, sc);
        if (em.init == InitStrategy::Perturb) em.perturb_reference = truth;
        em.seed = derive_seed(seed, 99);
        const EmReport<Scalar> rep = fit(traj, truth.dims, em);
        const auto al = align_modes(rep.final_s_c, rep.final_s_a, rep.final_theta, *traj.s_c, *traj.s_a);
        r.match_c = mode_match_rate(*traj.s_c, al.s_c);
        r.match_a = mode_match_rate(*traj.s_a, al.s_a);
        const Scalar nc = traj.x_c->squaredNorm(), na = traj.x_a->squaredNorm();
        r.delta_c = nc > 0 ? static_cast<double>(relative_state_error(*traj.x_c, rep.final_states.xhat_c_post))
                           : std::numeric_limits<double>::quiet_NaN();
        r.delta_a = na > 0 ? static_cast<double>(relative_state_error(*traj.x_a, rep.final_states.xhat_a_post))
                           : std::numeric_limits<double>::quiet_NaN();
        r.converged = rep.converged;
        r.iterations = static_cast<int>(rep.iterates.size());
        for (const auto& it : rep.iterates)
            if (it.q_mstep < it.q_estep - Scalar(kAscentSlack)) r.ascent_ok = false;
        r.valid = theta_violations(rep.final_theta).empty();
        r.ok = true;
    } catch (const std::exception& ex) {
        r.error = ex.what();
    }
    return r;
}

/// Runs every (level, trial) pair on up to cfg.jobs threads. Seeds depend
/// only on (cfg.seed, level index, trial), and aggregation runs in a fixed
/// order, so results do not depend on the job count.
template <typename Scalar>
MonteCarloResult monte_carlo(const MonteCarloConfig<Scalar>& cfg) {
    if (cfg.trials < 1) throw std::invalid_argument("trials must be >= 1");
    if (cfg.levels.empty()) throw std::invalid_argument("no noise levels given");
    for (double l : cfg.levels)
        if (!(l >= 0)) throw std::invalid_argument("noise levels must be >= 0");
    const std::size_t L = cfg.levels.size(), N = static_cast<std::size_t>(cfg.trials);
    MonteCarloResult out;
    out.trials.resize(L * N);
    parallel_for(L * N, cfg.jobs, [&](std::size_t i) {
        const std::size_t li = i / N;
        const int trial = static_cast<int>(i % N);
        const ThetaBundle<Scalar> truth = with_process_noise(cfg.base, static_cast<Scalar>(cfg.levels[li]));
        out.trials[i] = run_trial(truth, cfg.levels[li], trial, trial_seed(cfg.seed, li, trial), cfg.T, cfg.em);
    });
    for (std::size_t li = 0; li < L; ++li) {
        LevelSummary s;
        s.level = cfg.levels[li];
        std::vector<double> mc, ma;
        for (std::size_t k = 0; k < N; ++k) {
            const TrialResult& r = out.trials[li * N + k];
            if (r.ok) {
                ++s.succeeded;
                mc.push_back(r.match_c);
                ma.push_back(r.match_a);
            } else {
                ++s.failed;
            }
        }
        std::tie(s.mean_c, s.var_c) = mean_variance(mc);
        std::tie(s.mean_a, s.var_a) = mean_variance(ma);
        out.levels.push_back(s);
    }
    return out;
}

}  // namespace ncasm
