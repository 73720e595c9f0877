// Generated-case checks of the module invariants, kCases random cases each.

#include "ncasm/diagnostics.hpp"
#include "ncasm/em.hpp"
#include "ncasm/io.hpp"
#include "ncasm/mstep.hpp"
#include "ncasm/simulate.hpp"
#include "support.hpp"

#include <doctest.h>

#include <Eigen/QR>

#include <numeric>
#include <sstream>

using namespace ncasm;
using namespace ncasm::test;

namespace {

/// Rescales A so that its spectral norm is at most `bound`; switching between
/// such matrices cannot blow up.
M contractive(Gen& g, Index n, double bound = 0.9) {
    M a = g.stable(n, g.uniform(0.1, 0.8));
    const double s = Eigen::JacobiSVD<M>(a).singularValues()(0);
    return s > bound ? M(a * (bound / s)) : a;
}

M modest_cov(Gen& g, Index n) {
    return symmetrize(M(g.psd(n) * (0.5 / static_cast<double>(n)))) + 0.1 * M::Identity(n, n);
}

Theta random_theta(Gen& g, const Dims& d) {
    Theta th = g.theta(d);
    for (auto& p : th.causal) p.A_c = contractive(g, d.n_xc), p.Sigma_c = modest_cov(g, d.n_xc);
    for (auto& p : th.anticausal) p.A_a = contractive(g, d.n_xa), p.Sigma_a = modest_cov(g, d.n_xa);
    th.Sigma_m = modest_cov(g, d.n_y);
    return th;
}

Trajectory<double> draw(const Theta& th, Index T, std::uint64_t seed) {
    SimConfig<double> cfg;
    cfg.T = T;
    cfg.seed = seed;
    return simulate(th, cfg);
}

std::vector<int> random_perm(Gen& g, int m) {
    std::vector<int> p(static_cast<std::size_t>(m));
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), g.eng);
    return p;
}

std::vector<int> inverse(const std::vector<int>& p) {
    std::vector<int> q(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) q[static_cast<std::size_t>(p[k])] = static_cast<int>(k);
    return q;
}

M orthogonal(Gen& g, Index n) {
    Eigen::HouseholderQR<M> qr(g.matrix(n, n));
    return qr.householderQ() * M::Identity(n, n);
}

double min_eig(const M& a) {
    return Eigen::SelfAdjointEigenSolver<M>(symmetrize(a), Eigen::EigenvaluesOnly).eigenvalues()(0);
}

double lag1(const Eigen::Ref<const V>& e) {
    const V c = e.array() - e.mean();
    const Index n = c.size();
    return c.head(n - 1).dot(c.tail(n - 1)) / c.squaredNorm();
}

EmConfig<double> from_reference(const Theta& ref, int iters) {
    EmConfig<double> cfg;
    cfg.init = InitStrategy::Perturb;
    cfg.perturb_reference = ref;
    cfg.perturb_rho = 0.0;
    cfg.max_iters = iters;
    cfg.monotonicity = Monotonicity::Permissive;
    return cfg;
}

double weighted_sse_A(const M& x, const M& w, int j, const M& A, bool causal) {
    double s = 0;
    for (Index t = 0; t + 1 < x.rows(); ++t) {
        const Index to = causal ? t + 1 : t, from = causal ? t : t + 1;
        s += w(to, j) * (x.row(to).transpose() - A * x.row(from).transpose()).squaredNorm();
    }
    return s;
}

double output_sse(const M& xc, const M& xa, const M& y, const ModeWeights<double>& w, const std::vector<M>& Cc,
                  const std::vector<M>& Ca) {
    double s = 0;
    for (Index t = 0; t < y.rows(); ++t)
        for (std::size_t j = 0; j < Cc.size(); ++j)
            for (std::size_t l = 0; l < Ca.size(); ++l) {
                const double ww = w.w_c(t, static_cast<Index>(j)) * w.w_a(t, static_cast<Index>(l));
                if (ww > 0)
                    s += ww * (y.row(t).transpose() - Cc[j] * xc.row(t).transpose() - Ca[l] * xa.row(t).transpose())
                                  .squaredNorm();
            }
    return s;
}

}  // namespace

// --- model -------------------------------------------------------------------

TEST_CASE("validation is idempotent") {
    Gen g(101);
    for (int c = 0; c < kCases; ++c) {
        Theta th = g.theta(g.dims());
        if (c % 2) th.pi_c(0) += 0.5;  // half the cases are invalid
        const auto v1 = theta_violations(th);
        if (v1.empty()) {
            const Theta& once = validate_theta(th);
            const Theta twice = validate_theta(once);
            REQUIRE(max_parameter_change(twice, th) == 0.0);
        } else {
            REQUIRE(theta_violations(th) == v1);
            REQUIRE_THROWS_AS(validate_theta(th), ValidationError);
        }
    }
}

TEST_CASE("estimated parameters pass validation") {
    Gen g(102);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 3);
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, g.integer(20, 60), static_cast<std::uint64_t>(c));
        const auto e = run_estep(th, tr.y, EstepMemory<double>{});
        const auto m = run_mstep(th, tr.y, e.states.xhat_c_post, e.states.xhat_a_post, e.weights, &e.states.P_c_post,
                                 &e.states.P_a_post);
        const auto v = theta_violations(m.theta);
        INFO(c);
        REQUIRE(v.empty());
    }
}

// --- simulate ----------------------------------------------------------------

TEST_CASE("simulation is a function of theta and seed") {
    Gen g(201);
    for (int c = 0; c < kCases; ++c) {
        const Theta th = random_theta(g, g.dims());
        const Index T = g.integer(2, 40);
        const auto seed = static_cast<std::uint64_t>(g.integer(0, 1 << 30));
        const auto a = draw(th, T, seed), b = draw(th, T, seed);
        REQUIRE(a.y == b.y);
        REQUIRE(*a.x_c == *b.x_c);
        REQUIRE(*a.x_a == *b.x_a);
        REQUIRE(a.s_c->labels == b.s_c->labels);
        REQUIRE(a.s_a->labels == b.s_a->labels);
    }
}

TEST_CASE("injected noise has the stated covariance and no lag-one correlation") {
    // Per sequence |r1| < 3/sqrt(T) is a 3-sigma event, so over thousands of
    // sequences it is checked as a rate; 5.5 sigma is a hard bound.
    Gen g(202);
    const Index T = 10000;
    const double band = 3.0 / std::sqrt(static_cast<double>(T));
    long sequences = 0, outside = 0;
    double worst = 0, worst_cov = 0;
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 2);
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, T, static_cast<std::uint64_t>(c));
        const auto &xc = *tr.x_c, &xa = *tr.x_a;
        M ec(T, d.n_xc), ea(T, d.n_xa), em(T, d.n_y);
        for (Index t = 0; t < T; ++t) {
            const auto& pc = th.causal[(*tr.s_c)[t]];
            const auto& pa = th.anticausal[(*tr.s_a)[t]];
            const V prev = t > 0 ? V(xc.row(t - 1).transpose()) : V::Zero(d.n_xc);
            const V next = t + 1 < T ? V(xa.row(t + 1).transpose()) : V::Zero(d.n_xa);
            ec.row(t) = (xc.row(t).transpose() - pc.A_c * prev).transpose();
            ea.row(t) = (xa.row(t).transpose() - pa.A_a * next).transpose();
            em.row(t) = (tr.y.row(t).transpose() - pc.C_c * xc.row(t).transpose() - pa.C_a * xa.row(t).transpose())
                            .transpose();
        }
        for (const M* e : {&ec, &ea, &em})
            for (Index k = 0; k < e->cols(); ++k) {
                const double r = std::abs(lag1(e->col(k)));
                ++sequences;
                outside += r >= band;
                worst = std::max(worst, r * std::sqrt(static_cast<double>(T)));
            }
        const M S = em.transpose() * em / static_cast<double>(T);
        worst_cov = std::max(worst_cov, (S - th.Sigma_m).norm() / th.Sigma_m.norm());
    }
    MESSAGE("sequences " << sequences << ", outside the 3/sqrt(T) band " << outside << ", worst sqrt(T)|r1| " << worst
                         << ", worst covariance error " << worst_cov);
    CHECK(static_cast<double>(outside) / static_cast<double>(sequences) < 0.01);
    CHECK(worst < 5.5);
    CHECK(worst_cov < 0.10);
}

// --- estep -------------------------------------------------------------------

TEST_CASE("the filter gains minimize the posterior covariance trace") {
    Gen g(301);
    const double eps = 1e-4;
    for (int c = 0; c < kCases; ++c) {
        const Index nc = g.integer(1, 3), na = g.integer(1, 3), ny = g.integer(1, 3);
        const M Pc = g.psd(nc), Pa = g.psd(na), Cc = g.matrix(ny, nc), Ca = g.matrix(ny, na), Sm = g.pd(ny);
        const auto k = correct<double>(V::Zero(nc), V::Zero(na), Pc, Pa, V::Zero(ny), Cc, Ca, Sm);
        const double tc = causal_covariance_for_gain(k.K_c, Pc, Pa, Cc, Ca, Sm).trace();
        const double ta = anticausal_covariance_for_gain(k.K_a, Pc, Pa, Cc, Ca, Sm).trace();
        const M Dc = g.matrix(nc, ny), Da = g.matrix(na, ny);
        REQUIRE(causal_covariance_for_gain(M(k.K_c + eps * Dc), Pc, Pa, Cc, Ca, Sm).trace() >= tc - 1e-12);
        REQUIRE(anticausal_covariance_for_gain(M(k.K_a + eps * Da), Pc, Pa, Cc, Ca, Sm).trace() >= ta - 1e-12);
    }
}

TEST_CASE("the short covariance update equals the full quadratic form at the optimal gain") {
    Gen g(302);
    for (int c = 0; c < kCases; ++c) {
        const Index nc = g.integer(1, 3), na = g.integer(1, 3), ny = g.integer(1, 3);
        const M Pc = g.psd(nc), Pa = g.psd(na), Cc = g.matrix(ny, nc), Ca = g.matrix(ny, na), Sm = g.pd(ny);
        const auto k = correct<double>(g.vector(nc), g.vector(na), Pc, Pa, g.vector(ny), Cc, Ca, Sm);
        const double scale = std::max(1.0, std::max(Pc.norm(), Pa.norm()));
        REQUIRE((k.P_c - causal_covariance_for_gain(k.K_c, Pc, Pa, Cc, Ca, Sm)).norm() <= 1e-10 * scale);
        REQUIRE((k.P_a - anticausal_covariance_for_gain(k.K_a, Pc, Pa, Cc, Ca, Sm)).norm() <= 1e-10 * scale);
    }
}

TEST_CASE("without the anti-causal chain the E step is a textbook Kalman filter") {
    Gen g(303);
    for (int c = 0; c < kCases; ++c) {
        const Index nc = g.integer(1, 3), na = g.integer(1, 2), ny = g.integer(1, 3);
        const M A = contractive(g, nc), C = g.matrix(ny, nc), Q = g.pd(nc), R = g.pd(ny);
        const Theta th = single_mode_theta(A, C, Q, M::Zero(na, na), M::Zero(ny, na), M::Zero(na, na), R);
        const M y = g.matrix(g.integer(2, 50), ny);
        const auto e = run_estep(th, y, EstepMemory<double>{});
        const auto kf = textbook_kf(A, C, Q, R, y, V::Zero(nc), M::Zero(nc, nc));
        for (Index t = 0; t < y.rows(); ++t) {
            const auto ts = static_cast<std::size_t>(t);
            const double sx = std::max(1.0, kf.x_post[ts].norm()), sp = std::max(1.0, kf.P_post[ts].norm());
            REQUIRE((e.states.xhat_c_post.row(t).transpose() - kf.x_post[ts]).norm() <= 1e-10 * sx);
            REQUIRE((e.states.P_c_post[ts] - kf.P_post[ts]).norm() <= 1e-10 * sp);
            REQUIRE((e.states.xhat_c_prior.row(t).transpose() - kf.x_prior[ts]).norm() <= 1e-10 * sx);
            REQUIRE(e.states.xhat_a_post.row(t).norm() == 0.0);
        }
    }
}

TEST_CASE("classification of its own output is a fixed point") {
    Gen g(304);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 3);
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, g.integer(5, 40), static_cast<std::uint64_t>(c));
        const auto e = run_estep(th, tr.y, EstepMemory<double>{});
        const bool joint = c % 2;
        const auto once = classify_modes(th, tr.y, e.states, e.s_c, e.s_a, joint);
        const auto twice = classify_modes(th, tr.y, e.states, once.first, once.second, joint);
        REQUIRE(once.first.labels == twice.first.labels);
        REQUIRE(once.second.labels == twice.second.labels);
    }
}

TEST_CASE("E-step outputs satisfy the type invariants") {
    Gen g(305);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 3);
        const Theta th = random_theta(g, d);
        const Index T = g.integer(2, 40);
        const auto tr = draw(th, T, static_cast<std::uint64_t>(c));
        EstepConfig cfg;
        cfg.soft_weights = c % 2;
        const auto e = run_estep(th, tr.y, EstepMemory<double>{}, cfg);
        for (Index t = 0; t < T; ++t) {
            const auto ts = static_cast<std::size_t>(t);
            for (const M* P : {&e.states.P_c_prior[ts], &e.states.P_c_post[ts], &e.states.P_a_prior[ts], &e.states.P_a_post[ts]}) {
                REQUIRE(P->isApprox(P->transpose(), 0.0));
                REQUIRE(min_eig(*P) >= -1e-10 * std::max(1.0, P->norm()));
            }
            REQUIRE(min_eig(M(e.states.P_c_prior[ts] - e.states.P_c_post[ts])) >= -1e-9 * std::max(1.0, e.states.P_c_prior[ts].norm()));
            for (const M* w : {&e.weights.w_c, &e.weights.w_a}) {
                REQUIRE(std::abs(w->row(t).sum() - 1.0) < 1e-12);
                REQUIRE(w->row(t).minCoeff() >= 0.0);
                if (!cfg.soft_weights) REQUIRE(w->row(t).maxCoeff() == 1.0);
            }
        }
        if (!cfg.soft_weights) {
            REQUIRE(e.weights.w_c.sum() == static_cast<double>(T));
            REQUIRE(e.weights.w_a.sum() == static_cast<double>(T));
        }
    }
}

// --- mstep -------------------------------------------------------------------

TEST_CASE("each least-squares update does not increase its own objective") {
    Gen g(401);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(3, 3, 3);
        const Index T = g.integer(30, 80);
        const M xc = g.matrix(T, d.n_xc), xa = g.matrix(T, d.n_xa), y = g.matrix(T, d.n_y);
        const auto w = one_hot_weights<double>(g.labels(T, d.m_c), d.m_c, g.labels(T, d.m_a), d.m_a);
        const Theta prev = g.theta(d);
        auto slack = [](double old) { return 1e-10 * std::max(1.0, old); };
        for (int j = 0; j < d.m_c; ++j) {
            const M A = update_A_causal(j, xc, w.w_c, prev.causal[j].A_c);
            const double before = weighted_sse_A(xc, w.w_c, j, prev.causal[j].A_c, true);
            REQUIRE(weighted_sse_A(xc, w.w_c, j, A, true) <= before + slack(before));
        }
        for (int l = 0; l < d.m_a; ++l) {
            const M A = update_A_anticausal(l, xa, w.w_a, prev.anticausal[l].A_a);
            const double before = weighted_sse_A(xa, w.w_a, l, prev.anticausal[l].A_a, false);
            REQUIRE(weighted_sse_A(xa, w.w_a, l, A, false) <= before + slack(before));
        }
        std::vector<M> Cc0, Ca0;
        for (const auto& p : prev.causal) Cc0.push_back(p.C_c);
        for (const auto& p : prev.anticausal) Ca0.push_back(p.C_a);
        const auto [Cc, Ca] = update_C_joint(xc, xa, y, w, Cc0, Ca0);
        const double before = output_sse(xc, xa, y, w, Cc0, Ca0);
        REQUIRE(output_sse(xc, xa, y, w, Cc, Ca) <= before + slack(before));
    }
}

TEST_CASE("relabelling the weights relabels the M-step output") {
    Gen g(402);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 3);
        const Index T = g.integer(30, 60);
        const M xc = g.matrix(T, d.n_xc), xa = g.matrix(T, d.n_xa), y = g.matrix(T, d.n_y);
        const ModeSequence sc = g.labels(T, d.m_c), sa = g.labels(T, d.m_a);
        const Theta prev = g.theta(d);
        const auto pc = random_perm(g, d.m_c), pa = random_perm(g, d.m_a);
        const auto m0 = run_mstep(prev, y, xc, xa, one_hot_weights<double>(sc, d.m_c, sa, d.m_a));
        const auto m1 = run_mstep(permute_modes(prev, pc, pa), y, xc, xa,
                                  one_hot_weights<double>(permute_labels(sc, pc), d.m_c, permute_labels(sa, pa), d.m_a));
        REQUIRE(max_parameter_change(m1.theta, permute_modes(m0.theta, pc, pa)) <= 1e-10);
    }
}

TEST_CASE("single-mode transition update equals ordinary least squares") {
    Gen g(403);
    for (int c = 0; c < kCases; ++c) {
        const Index n = g.integer(1, 4), T = g.integer(3 * n + 2, 60);
        const M x = g.matrix(T, n);
        const M w = M::Ones(T, 1);
        const M X = x.topRows(T - 1), Y = x.bottomRows(T - 1);
        const M ols = ((X.transpose() * X).inverse() * X.transpose() * Y).transpose();
        REQUIRE((update_A_causal(0, x, w, M(M::Zero(n, n))) - ols).norm() <= 1e-10 * std::max(1.0, ols.norm()));
        const M ols_a = ((Y.transpose() * Y).inverse() * Y.transpose() * X).transpose();
        REQUIRE((update_A_anticausal(0, x, w, M(M::Zero(n, n))) - ols_a).norm() <= 1e-10 * std::max(1.0, ols_a.norm()));
    }
}

TEST_CASE("hard weights put exactly T units of mass on each chain") {
    Gen g(404);
    for (int c = 0; c < kCases; ++c) {
        const int mc = g.integer(1, 5), ma = g.integer(1, 5);
        const Index T = g.integer(1, 500);
        const auto w = one_hot_weights<double>(g.labels(T, mc), mc, g.labels(T, ma), ma);
        REQUIRE(w.w_c.colwise().sum().sum() == static_cast<double>(T));
        REQUIRE(w.w_a.colwise().sum().sum() == static_cast<double>(T));
        const auto [pi_c, pi_a] = update_pi(w);
        REQUIRE(std::abs(pi_c.sum() - 1.0) < 1e-12);
        REQUIRE(std::abs(pi_a.sum() - 1.0) < 1e-12);
    }
}

// --- em ----------------------------------------------------------------------

TEST_CASE("every M step raises the surrogate") {
    Gen g(501);
    long iterations = 0;
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 3, 3);
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, g.integer(20 * std::max(d.n_xc, d.n_xa), 80), static_cast<std::uint64_t>(c));
        EmConfig<double> cfg;
        cfg.seed = static_cast<std::uint64_t>(c);
        cfg.max_iters = 4;
        cfg.init = c % 2 ? InitStrategy::Random : InitStrategy::Segments;
        cfg.soft_weights = c % 5 == 0;
        cfg.monotonicity = Monotonicity::Permissive;
        const auto rep = fit(tr, d, cfg);
        for (const auto& it : rep.iterates) {
            ++iterations;
            INFO("case " << c << " iteration " << it.k);
            REQUIRE(it.q_mstep >= it.q_estep - kAscentSlack);
        }
    }
    MESSAGE(iterations << " iterations checked");
}

TEST_CASE("an exact M-step solution is a fixed point of one iteration") {
    // Outputs pin the states (invertible [C_c C_a], no measurement noise), so
    // the M step on the true states gives a theta the E step reproduces.
    Gen g(502);
    double worst = 0;
    for (int c = 0; c < kCases; ++c) {
        const Index nc = g.integer(1, 2), na = g.integer(1, 2), ny = nc + na;
        V sv(ny);
        for (Index i = 0; i < ny; ++i) sv(i) = g.uniform(0.5, 1.5);
        const M C = orthogonal(g, ny) * sv.asDiagonal();
        Theta th = single_mode_theta(contractive(g, nc), C.leftCols(nc), modest_cov(g, nc), contractive(g, na),
                                     C.rightCols(na), modest_cov(g, na), M::Zero(ny, ny));
        const auto tr = draw(th, g.integer(40, 100), static_cast<std::uint64_t>(c));
        th.Sigma_m = M::Identity(ny, ny);
        const Theta star = run_mstep(th, tr.y, *tr.x_c, *tr.x_a, one_hot_weights<double>(*tr.s_c, 1, *tr.s_a, 1)).theta;
        Trajectory<double> y_only;
        y_only.y = tr.y;
        const auto rep = fit(y_only, th.dims, from_reference(star, 1));
        REQUIRE(rep.iterates.size() == 1);
        worst = std::max(worst, rep.iterates[0].max_delta);
        INFO("case " << c);
        REQUIRE(rep.iterates[0].max_delta <= 1e-8);
    }
    MESSAGE("largest change " << worst);
}

TEST_CASE("permuting the initial labels permutes the result") {
    Gen g(503);
    for (int c = 0; c < kCases; ++c) {
        const Dims d{g.integer(1, 2), g.integer(1, 2), g.integer(1, 3), g.integer(2, 3), g.integer(2, 3)};
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, g.integer(20, 50), static_cast<std::uint64_t>(c));
        EmConfig<double> start;
        start.init = InitStrategy::Perturb;
        start.perturb_reference = th;
        start.perturb_rho = 0.2;
        start.seed = static_cast<std::uint64_t>(c);
        const Theta theta0 = initialize(tr, d, start);
        const auto pc = random_perm(g, d.m_c), pa = random_perm(g, d.m_a);
        const auto a = fit(tr, d, from_reference(theta0, 3));
        const auto b = fit(tr, d, from_reference(permute_modes(theta0, pc, pa), 3));
        REQUIRE(a.iterates.size() == b.iterates.size());
        INFO("case " << c);
        REQUIRE(max_parameter_change(permute_modes(b.final_theta, inverse(pc), inverse(pa)), a.final_theta) <= 1e-6);
        REQUIRE(permute_labels(a.final_s_c, pc).labels == b.final_s_c.labels);
        REQUIRE(permute_labels(a.final_s_a, pa).labels == b.final_s_a.labels);
    }
}

TEST_CASE("identical fits give identical reports") {
    Gen g(504);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims(2, 2, 2);
        const Theta th = random_theta(g, d);
        const auto tr = draw(th, g.integer(20, 40), static_cast<std::uint64_t>(c));
        EmConfig<double> cfg;
        cfg.seed = static_cast<std::uint64_t>(c);
        cfg.max_iters = 2;
        cfg.monotonicity = Monotonicity::Permissive;
        const auto a = fit(tr, d, cfg), b = fit(tr, d, cfg);
        REQUIRE(a.iterates.size() == b.iterates.size());
        for (std::size_t k = 0; k < a.iterates.size(); ++k) {
            REQUIRE(a.iterates[k].q_estep == b.iterates[k].q_estep);
            REQUIRE(a.iterates[k].q_mstep == b.iterates[k].q_mstep);
        }
        REQUIRE(max_parameter_change(a.final_theta, b.final_theta) == 0.0);
        REQUIRE(a.final_s_c.labels == b.final_s_c.labels);
        REQUIRE(a.final_q == b.final_q);
    }
}

// --- diagnostics ---------------------------------------------------------------

TEST_CASE("match rate is unchanged by a common relabelling") {
    Gen g(601);
    for (int c = 0; c < kCases; ++c) {
        const int m = g.integer(1, 5);
        const Index T = g.integer(1, 200);
        const ModeSequence a = g.labels(T, m), b = g.labels(T, m);
        const auto p = random_perm(g, m);
        REQUIRE(mode_match_rate(permute_labels(a, p), permute_labels(b, p)) == mode_match_rate(a, b));
    }
}

TEST_CASE("Gram spectra are ordered and partition the energy") {
    Gen g(602);
    for (int c = 0; c < kCases; ++c) {
        const int m = g.integer(1, 4);
        const Index T = g.integer(1, 200), n = g.integer(1, 4);
        const M x = g.matrix(T, n, g.uniform(0.1, 10));
        double total = 0;
        for (const auto& s : gram_spectra(x, g.labels(T, m), m)) {
            REQUIRE(s.lambda_min <= s.lambda_max);
            REQUIRE(s.lambda_min >= -1e-12 * std::max(1.0, s.lambda_max));
            total += s.trace;
        }
        REQUIRE(std::abs(total - x.squaredNorm()) <= 1e-12 * x.squaredNorm());
    }
}

TEST_CASE("state error is invariant under a common rotation") {
    Gen g(603);
    for (int c = 0; c < kCases; ++c) {
        const Index T = g.integer(2, 100), n = g.integer(1, 5);
        const M x = g.matrix(T, n), xh = x + g.matrix(T, n, g.uniform(0.01, 2));
        const M R = orthogonal(g, n);
        const double e = relative_state_error(x, xh);
        REQUIRE(std::abs(relative_state_error(M(x * R.transpose()), M(xh * R.transpose())) - e) <= 1e-12 * std::max(1.0, e));
    }
}

// --- io ----------------------------------------------------------------------

TEST_CASE("theta and trajectory files round trip exactly") {
    Gen g(701);
    for (int c = 0; c < kCases; ++c) {
        const Dims d = g.dims();
        const Theta th = g.theta(d);
        REQUIRE(max_parameter_change(theta_from_json(json::parse(dump_json(theta_to_json(th)))), th) == 0.0);
        const auto tr = draw(random_theta(g, d), g.integer(2, 20), static_cast<std::uint64_t>(c));
        std::ostringstream os;
        write_trajectory_csv(os, tr);
        std::istringstream is(os.str());
        const auto back = read_trajectory_csv(is, "case.csv");
        REQUIRE(back.y == tr.y);
        REQUIRE(*back.x_c == *tr.x_c);
        REQUIRE(*back.x_a == *tr.x_a);
        REQUIRE(back.s_c->labels == tr.s_c->labels);
        REQUIRE(back.s_a->labels == tr.s_a->labels);
    }
}
