#include "ncasm/diagnostics.hpp"
#include "ncasm/estep.hpp"
#include "ncasm/simulate.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace ncasm;
using namespace ncasm::test;

namespace {

M m2(double a, double b, double c, double d) {
    M m(2, 2);
    m << a, b, c, d;
    return m;
}

CausalModeParams<double> causal(const M& A, const M& Sigma) { return {A, M::Zero(1, A.rows()), Sigma}; }
AntiCausalModeParams<double> anticausal(const M& A, const M& Sigma) { return {A, M::Zero(1, A.rows()), Sigma}; }

}  // namespace

TEST_CASE("causal prediction") {
    V x(2);
    x << 1, 2;
    auto p = predict_causal<double>(x, M::Identity(2, 2), causal(M::Identity(2, 2), M::Zero(2, 2)));
    CHECK(p.x == x);
    CHECK(p.P == M::Identity(2, 2));

    Gen g(2);
    const M Q = g.pd(2);
    p = predict_causal<double>(x, g.pd(2), causal(M::Zero(2, 2), Q));
    CHECK(p.x == V::Zero(2));
    CHECK(p.P.isApprox(Q, 1e-15));

    p = predict_causal<double>(x, M::Identity(2, 2), causal(m2(1, 0.2, 0.3, 0.8), M::Identity(2, 2)));
    // A Aᵀ + I by hand: rows (1, 0.2) and (0.3, 0.8).
    CHECK(p.P.isApprox(m2(1 + 0.04 + 1, 0.3 + 0.16, 0.3 + 0.16, 0.09 + 0.64 + 1), 1e-15));
    CHECK(p.x.isApprox(V(V::Map(std::vector<double>{1.4, 1.9}.data(), 2)), 1e-15));
}

TEST_CASE("anti-causal prediction") {
    V x(2);
    x << -1, 3;
    auto p = predict_anticausal<double>(x, M::Identity(2, 2), anticausal(M::Identity(2, 2), M::Zero(2, 2)));
    CHECK(p.x == x);
    CHECK(p.P == M::Identity(2, 2));

    p = predict_anticausal<double>(x, M::Identity(2, 2), anticausal(0.5 * M::Identity(2, 2), M::Zero(2, 2)));
    CHECK(p.P.isApprox(0.25 * M::Identity(2, 2), 1e-15));

    p = predict_anticausal<double>(x, M::Identity(2, 2), anticausal(m2(0.6, 0.2, 0.3, 0.8), M::Identity(2, 2)));
    CHECK(p.P.isApprox(m2(0.36 + 0.04 + 1, 0.18 + 0.16, 0.18 + 0.16, 0.09 + 0.64 + 1), 1e-15));
}

TEST_CASE("innovation covariance") {
    Gen g(3);
    const M P = g.pd(2), R = g.pd(2), Pa = g.pd(3);
    CHECK(innovation_covariance<double>(P, Pa, M::Identity(2, 2), M::Zero(2, 3), R).isApprox(P + R, 1e-15));
    CHECK(innovation_covariance<double>(M::Zero(2, 2), M::Zero(3, 3), g.matrix(2, 2), g.matrix(2, 3), R).isApprox(R, 1e-15));

    const Theta th = example1_theta();
    const M S = innovation_covariance<double>(M::Identity(2, 2), M::Identity(2, 2), th.causal[0].C_c,
                                              th.anticausal[0].C_a, th.Sigma_m);
    CHECK(S(0, 0) == doctest::Approx(0.3 * 0.3 + 0.7 * 0.7 + 0.2 * 0.2 + 0.6 * 0.6 + 1).epsilon(1e-15));
    CHECK(S(0, 0) == doctest::Approx(1.98).epsilon(1e-15));
}

TEST_CASE("coupled correction reduces to a single-model update without the other chain") {
    Gen g(4);
    for (int rep = 0; rep < 20; ++rep) {
        const M A = g.stable(3, 0.9), C = g.matrix(2, 3), Q = g.pd(3), R = g.pd(2);
        const M y = g.matrix(1, 2);
        const V x0 = g.vector(3);
        const M P0 = g.pd(3);
        const auto kf = textbook_kf(A, C, Q, R, y, x0, P0);
        const auto p = predict_causal<double>(x0, P0, {A, C, Q});
        const auto c = correct<double>(p.x, V::Zero(2), p.P, g.pd(2), y.row(0).transpose(), C, M::Zero(2, 2), R);
        CHECK((c.x_c - kf.x_post[0]).norm() < 1e-10);
        CHECK((c.P_c - kf.P_post[0]).norm() < 1e-10);
        CHECK((c.K_c - kf.K[0]).norm() < 1e-10);
        CHECK(c.K_a.isZero(0));
    }
}

TEST_CASE("a perfect prior is never corrected") {
    Gen g(5);
    const V xc = g.vector(2), xa = g.vector(2);
    const auto c = correct<double>(xc, xa, M::Zero(2, 2), g.pd(2), g.vector(3), g.matrix(3, 2), g.matrix(3, 2), g.pd(3));
    CHECK(c.K_c.isZero(0));
    CHECK(c.x_c == xc);
    CHECK(c.P_c.isZero(0));
}

TEST_CASE("scalar correction by hand") {
    const M one = scalar(1);
    V y(1), z(1);
    y << 3;
    z << 0;
    const auto c = correct<double>(z, z, one, one, y, one, one, one);
    CHECK(c.S(0, 0) == doctest::Approx(3));
    CHECK(c.K_c(0, 0) == doctest::Approx(1.0 / 3));
    CHECK(c.K_a(0, 0) == doctest::Approx(1.0 / 3));
    CHECK(c.P_c(0, 0) == doctest::Approx(2.0 / 3));
    CHECK(c.P_a(0, 0) == doctest::Approx(2.0 / 3));
    CHECK(c.innovation(0) == 3);
    CHECK(c.x_c(0) == doctest::Approx(1));
}

TEST_CASE("singular innovation covariance names the time") {
    const V z = V::Zero(1);
    CHECK_THROWS_WITH_AS(correct<double>(z, z, scalar(0), scalar(0), z, scalar(1), scalar(1), scalar(0), Index{6}),
                         "singular innovation covariance at t=7", NumericalError);
}

TEST_CASE("one causal mode is always selected") {
    Gen g(6);
    Dims d = g.dims();
    d.m_c = 1;
    const Theta th = g.theta(d);
    SimConfig<double> cfg;
    cfg.T = 200;
    cfg.seed = 6;
    const auto tr = simulate(th, cfg);
    const auto r = run_estep<double>(th, tr.y, {});
    CHECK(r.s_c.labels == std::vector<int>(200, 0));
    CHECK(r.weights.w_c == M::Ones(200, 1));
}

TEST_CASE("a mode with zero prior probability is never selected") {
    Gen g(7);
    for (int rep = 0; rep < 10; ++rep) {
        Dims d = g.dims();
        d.m_c = 2;
        Theta th = g.theta(d);
        SimConfig<double> cfg;
        cfg.T = 200;
        cfg.seed = rep;
        const auto tr = simulate(th, cfg);
        th.pi_c << 1, 0;
        for (bool joint : {false, true}) {
            EstepConfig ec;
            ec.joint_mode_search = joint;
            const auto r = run_estep<double>(th, tr.y, {}, ec);
            CHECK(std::count(r.s_c.labels.begin(), r.s_c.labels.end(), 1) == 0);
        }
    }
}

TEST_CASE("fully observed states are recovered exactly") {
    // Measurement noise negligible and [C_c C_a] square and invertible: every
    // posterior state is pinned by its own output sample.
    const Theta th = single_mode_theta(scalar(0.8), M((M(2, 1) << 1, 0).finished()), scalar(1), scalar(0.5),
                                       M((M(2, 1) << 0.3, 1).finished()), scalar(1), 1e-20 * M::Identity(2, 2));
    SimConfig<double> cfg;
    cfg.T = 300;
    cfg.seed = 8;
    Theta sim = th;
    sim.Sigma_m.setZero();
    const auto tr = simulate(sim, cfg);
    EstepConfig ec;
    ec.sweeps = 2;
    const auto r = run_estep<double>(th, tr.y, {}, ec);
    CHECK((r.states.xhat_c_post - *tr.x_c).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((r.states.xhat_a_post - *tr.x_a).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("state estimates on the separated benchmark with the true parameters") {
    const Theta th = benchmark_theta();
    SimConfig<double> cfg;
    cfg.T = 10000;
    cfg.seed = 1;
    const auto tr = simulate(th, cfg);
    const auto r = run_estep<double>(th, tr.y, {});
    CHECK(relative_state_error(*tr.x_c, r.states.xhat_c_post) <= 0.05);
    CHECK(relative_state_error(*tr.x_a, r.states.xhat_a_post) <= 0.05);
    CHECK(mode_match_rate(*tr.s_c, r.s_c) >= 0.97);
    CHECK(mode_match_rate(*tr.s_a, r.s_a) >= 0.97);
}

TEST_CASE("filter state shapes and covariance invariants") {
    const Theta th = benchmark_theta();
    SimConfig<double> cfg;
    cfg.T = 300;
    cfg.seed = 2;
    const auto tr = simulate(th, cfg);
    const auto r = run_estep<double>(th, tr.y, {});
    const auto& fs = r.states;
    REQUIRE(fs.T() == 300);
    CHECK(fs.K_c[0].rows() == 2);
    CHECK(fs.K_c[0].cols() == 8);
    for (Index t = 0; t < fs.T(); ++t) {
        CHECK(is_psd(fs.P_c_post[t]));
        CHECK(is_psd(fs.P_a_post[t]));
        CHECK(min_symmetric_eigenvalue(M(fs.P_c_prior[t] - fs.P_c_post[t] + 1e-10 * M::Identity(2, 2))) >= 0);
        CHECK(min_symmetric_eigenvalue(M(fs.P_a_prior[t] - fs.P_a_post[t] + 1e-10 * M::Identity(2, 2))) >= 0);
    }
}

TEST_CASE("soft weights are normalized and agree with the hard labels") {
    const Theta th = benchmark_theta();
    SimConfig<double> cfg;
    cfg.T = 300;
    cfg.seed = 3;
    const auto tr = simulate(th, cfg);
    EstepConfig ec;
    ec.soft_weights = true;
    const auto r = run_estep<double>(th, tr.y, {}, ec);
    for (Index t = 0; t < 300; ++t) {
        CHECK(r.weights.w_c.row(t).sum() == doctest::Approx(1).epsilon(1e-12));
        CHECK(r.weights.w_a.row(t).sum() == doctest::Approx(1).epsilon(1e-12));
        Index jc = 0, ja = 0;
        r.weights.w_c.row(t).maxCoeff(&jc);
        r.weights.w_a.row(t).maxCoeff(&ja);
        CHECK(jc == r.s_c[t]);
        CHECK(ja == r.s_a[t]);
    }
}

TEST_CASE("fixed labels are respected") {
    const Theta th = benchmark_theta();
    SimConfig<double> cfg;
    cfg.T = 100;
    cfg.seed = 4;
    const auto tr = simulate(th, cfg);
    const std::pair<ModeSequence, ModeSequence> fixed{*tr.s_c, *tr.s_a};
    const auto r = run_estep<double>(th, tr.y, {}, {}, &fixed);
    CHECK(r.s_c == *tr.s_c);
    CHECK(r.s_a == *tr.s_a);
}

TEST_CASE("memory carries the backward pass into the next call") {
    const Theta th = benchmark_theta();
    SimConfig<double> cfg;
    cfg.T = 200;
    cfg.seed = 5;
    const auto tr = simulate(th, cfg);
    EstepConfig one;
    one.sweeps = 1;
    EstepConfig two;
    two.sweeps = 2;
    const auto first = run_estep<double>(th, tr.y, {}, one);
    const auto chained = run_estep<double>(th, tr.y, first.memory, one);
    const auto both = run_estep<double>(th, tr.y, {}, two);
    CHECK(chained.states.xhat_c_post == both.states.xhat_c_post);
    CHECK(chained.s_a == both.s_a);
}

TEST_CASE("expected complete-data log-likelihood matches quadrature") {
    Gen g(9);
    const auto [nodes, weights] = gauss_hermite(6);
    for (int rep = 0; rep < 10; ++rep) {
        const double ac = g.uniform(-0.9, 0.9), aa = g.uniform(-0.9, 0.9);
        const double cc = g.normal(), ca = g.normal();
        const double sc = g.uniform(0.3, 2), sa = g.uniform(0.3, 2), sm = g.uniform(0.3, 2);
        const Theta th = single_mode_theta(scalar(ac), scalar(cc), scalar(sc), scalar(aa), scalar(ca), scalar(sa), scalar(sm));
        const M y = g.matrix(2, 1);
        const M xc = g.matrix(2, 1), xa = g.matrix(2, 1);
        std::vector<M> Pc{scalar(g.uniform(0.1, 1)), scalar(g.uniform(0.1, 1))};
        std::vector<M> Pa{scalar(g.uniform(0.1, 1)), scalar(g.uniform(0.1, 1))};
        const ModeWeights<double> w{M::Ones(2, 1), M::Ones(2, 1)};

        // E over independent x_c(1), x_c(2), x_a(1), x_a(2) ~ N(mean, P).
        auto logp = [&](double c1, double c2, double a1, double a2) {
            double v = log_normal_scalar(c1 - 0, sc) + log_normal_scalar(c2 - ac * c1, sc);
            v += log_normal_scalar(a1 - aa * a2, sa) + log_normal_scalar(a2 - 0, sa);
            v += log_normal_scalar(y(0, 0) - cc * c1 - ca * a1, sm) + log_normal_scalar(y(1, 0) - cc * c2 - ca * a2, sm);
            return v;
        };
        auto at = [&](double mean, const M& P, Index i) { return mean + std::sqrt(2 * P(0, 0)) * nodes(i); };
        double q = 0;
        const Index n = nodes.size();
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j)
                for (Index k = 0; k < n; ++k)
                    for (Index l = 0; l < n; ++l)
                        q += weights(i) * weights(j) * weights(k) * weights(l) *
                             logp(at(xc(0, 0), Pc[0], i), at(xc(1, 0), Pc[1], j), at(xa(0, 0), Pa[0], k),
                                  at(xa(1, 0), Pa[1], l));
        q /= std::pow(std::numbers::pi, 2);
        CHECK(complete_data_loglik(th, y, xc, xa, w, &Pc, &Pa) == doctest::Approx(q).epsilon(1e-10));
        CHECK(std::abs(complete_data_loglik(th, y, xc, xa, w, &Pc, &Pa) - q) < 1e-4);
        // Point version: the integrand at the means.
        CHECK(complete_data_loglik(th, y, xc, xa, w) ==
              doctest::Approx(logp(xc(0, 0), xc(1, 0), xa(0, 0), xa(1, 0))).epsilon(1e-12));
    }
}

TEST_CASE("surrogate uses the weights and the mixing probabilities") {
    Theta th = example1_theta();
    const M y = M::Zero(3, 1), x = M::Zero(3, 2);
    const ModeWeights<double> w = one_hot_weights<double>(ModeSequence{{0, 1, 0}}, 2, ModeSequence{{1, 1, 1}}, 2);
    const double base = complete_data_loglik(th, y, x, x, w);
    const double per_state = -std::log(2 * std::numbers::pi);  // log N(0; 0, I₂)
    const double per_output = -0.5 * std::log(2 * std::numbers::pi);
    const double expected = 6 * per_state + 3 * per_output + 2 * std::log(0.7) + std::log(0.3) + 3 * std::log(0.5);
    CHECK(base == doctest::Approx(expected).epsilon(1e-13));
}
