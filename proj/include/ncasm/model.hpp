#pragma once

/// @file model.hpp
/// Parameter and data types for non-causal linear systems with i.i.d. switching
/// modes:
///
///   x_c(t) = A_c(s_c(t)) x_c(t-1) + v_c(t)
///   x_a(t) = A_a(s_a(t)) x_a(t+1) + v_a(t)
///   y(t)   = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t) + v_m(t)
///
/// Mode labels are 0-based in memory and 1-based in every file format.

#include "ncasm/linalg.hpp"
#include "ncasm/types.hpp"

#include <fmt/format.h>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace ncasm {

struct Dims {
    int n_xc = 1;
    int n_xa = 1;
    int n_y = 1;
    int m_c = 1;
    int m_a = 1;

    bool operator==(const Dims&) const = default;
};

template <typename Scalar>
struct CausalModeParams {
    Matrix<Scalar> A_c;
    Matrix<Scalar> C_c;
    Matrix<Scalar> Sigma_c;
};

template <typename Scalar>
struct AntiCausalModeParams {
    Matrix<Scalar> A_a;
    Matrix<Scalar> C_a;
    Matrix<Scalar> Sigma_a;
};

/// Full parameter object: per-mode subsystems, mixing probabilities and the
/// shared measurement-noise covariance.
template <typename Scalar>
struct ThetaBundle {
    Dims dims;
    std::vector<CausalModeParams<Scalar>> causal;
    std::vector<AntiCausalModeParams<Scalar>> anticausal;
    Vector<Scalar> pi_c;
    Vector<Scalar> pi_a;
    Matrix<Scalar> Sigma_m;
};

using Theta = ThetaBundle<double>;

/// Length-T sequence of 0-based mode labels.
struct ModeSequence {
    std::vector<int> labels;

    ModeSequence() = default;
    explicit ModeSequence(std::vector<int> l) : labels(std::move(l)) {}

    Index size() const noexcept { return static_cast<Index>(labels.size()); }
    int operator[](Index t) const { return labels[static_cast<std::size_t>(t)]; }
    int& operator[](Index t) { return labels[static_cast<std::size_t>(t)]; }
    bool operator==(const ModeSequence&) const = default;
};

/// Output sequence with optional ground truth. Rows are time steps.
template <typename Scalar>
struct Trajectory {
    Matrix<Scalar> y;
    std::optional<Matrix<Scalar>> x_c;
    std::optional<Matrix<Scalar>> x_a;
    std::optional<ModeSequence> s_c;
    std::optional<ModeSequence> s_a;

    Index T() const noexcept { return y.rows(); }
    bool has_states() const noexcept { return x_c.has_value() && x_a.has_value(); }
    bool has_modes() const noexcept { return s_c.has_value() && s_a.has_value(); }
};

/// What validate_theta demands of Sigma_m. Simulation accepts a singular
/// (even zero) measurement noise; estimation needs it invertible.
enum class MeasurementNoise { PositiveDefinite, PositiveSemidefinite };

namespace detail {

template <typename Scalar>
void check_shape(std::vector<std::string>& out, const std::string& name, const Matrix<Scalar>& m,
                 Index rows, Index cols) {
    if (m.rows() != rows || m.cols() != cols) {
        out.push_back(fmt::format("{}: dimension mismatch (expected {}x{}, got {}x{})", name, rows,
                                  cols, m.rows(), m.cols()));
    } else if (!m.allFinite()) {
        out.push_back(fmt::format("{}: non-finite entries", name));
    }
}

template <typename Scalar>
void check_covariance(std::vector<std::string>& out, const std::string& name,
                      const Matrix<Scalar>& m, Index n, bool definite) {
    const std::size_t before = out.size();
    check_shape(out, name, m, n, n);
    if (out.size() != before) return;
    if (!is_symmetric(m)) out.push_back(name + " not symmetric");
    const Scalar lo = min_symmetric_eigenvalue(m);
    if (lo < Scalar(kEigenFloor)) {
        out.push_back(name + " not PSD");
    } else if (definite && lo <= Scalar(0)) {
        out.push_back(name + " not positive definite");
    }
}

template <typename Scalar>
void check_probabilities(std::vector<std::string>& out, const std::string& name,
                         const Vector<Scalar>& p, Index m) {
    if (p.size() != m) {
        out.push_back(fmt::format("{}: dimension mismatch (expected {}, got {})", name, m, p.size()));
        return;
    }
    if (!p.allFinite() || (p.array() < Scalar(0)).any()) {
        out.push_back(name + ": negative or non-finite probability");
    }
    const Scalar sum = p.sum();
    if (std::abs(sum - Scalar(1)) > Scalar(1e-12)) {
        out.push_back(fmt::format("{}: probability vector sums to {:.17g}", name,
                                  static_cast<double>(sum)));
    }
}

}  // namespace detail

/// Every invariant violation of `theta`, each message naming the field.
template <typename Scalar>
std::vector<std::string> theta_violations(const ThetaBundle<Scalar>& theta,
                                          MeasurementNoise noise = MeasurementNoise::PositiveDefinite) {
    std::vector<std::string> out;
    const Dims& d = theta.dims;
    if (d.n_xc < 1 || d.n_xa < 1 || d.n_y < 1 || d.m_c < 1 || d.m_a < 1) {
        out.push_back("dims: every dimension and mode count must be >= 1");
        return out;
    }
    if (static_cast<int>(theta.causal.size()) != d.m_c) {
        out.push_back(fmt::format("causal: dimension mismatch (expected {} modes, got {})", d.m_c,
                                  theta.causal.size()));
    }
    if (static_cast<int>(theta.anticausal.size()) != d.m_a) {
        out.push_back(fmt::format("anticausal: dimension mismatch (expected {} modes, got {})",
                                  d.m_a, theta.anticausal.size()));
    }
    for (std::size_t j = 0; j < theta.causal.size(); ++j) {
        const auto& p = theta.causal[j];
        const auto tag = [&](const char* f) { return fmt::format("{}({})", f, j + 1); };
        detail::check_shape(out, tag("A_c"), p.A_c, d.n_xc, d.n_xc);
        detail::check_shape(out, tag("C_c"), p.C_c, d.n_y, d.n_xc);
        detail::check_covariance(out, tag("Sigma_c"), p.Sigma_c, d.n_xc, false);
    }
    for (std::size_t l = 0; l < theta.anticausal.size(); ++l) {
        const auto& p = theta.anticausal[l];
        const auto tag = [&](const char* f) { return fmt::format("{}({})", f, l + 1); };
        detail::check_shape(out, tag("A_a"), p.A_a, d.n_xa, d.n_xa);
        detail::check_shape(out, tag("C_a"), p.C_a, d.n_y, d.n_xa);
        detail::check_covariance(out, tag("Sigma_a"), p.Sigma_a, d.n_xa, false);
    }
    detail::check_probabilities(out, "pi_c", theta.pi_c, d.m_c);
    detail::check_probabilities(out, "pi_a", theta.pi_a, d.m_a);
    detail::check_covariance(out, "Sigma_m", theta.Sigma_m, d.n_y,
                             noise == MeasurementNoise::PositiveDefinite);
    return out;
}

/// Returns `theta` unchanged when valid, otherwise throws ValidationError
/// listing every violation.
template <typename Scalar>
const ThetaBundle<Scalar>& validate_theta(const ThetaBundle<Scalar>& theta,
                                          MeasurementNoise noise = MeasurementNoise::PositiveDefinite) {
    auto v = theta_violations(theta, noise);
    if (!v.empty()) throw ValidationError(std::move(v));
    return theta;
}

/// Trajectory invariants: T >= 2, consistent lengths, labels in range.
template <typename Scalar>
std::vector<std::string> trajectory_violations(const Trajectory<Scalar>& traj, const Dims* dims = nullptr) {
    std::vector<std::string> out;
    const Index T = traj.T();
    if (T < 2) out.push_back("T >= 2 required");
    if (dims && traj.y.cols() != dims->n_y) {
        out.push_back(fmt::format("y: expected {} columns, got {}", dims->n_y, traj.y.cols()));
    }
    if (!traj.y.allFinite()) out.push_back("y: non-finite entries");
    auto rows = [&](const char* name, const auto& m) {
        if (m && m->rows() != T) out.push_back(fmt::format("{}: length {} != T={}", name, m->rows(), T));
    };
    rows("x_c", traj.x_c);
    rows("x_a", traj.x_a);
    auto seq = [&](const char* name, const std::optional<ModeSequence>& s, int m) {
        if (!s) return;
        if (s->size() != T) out.push_back(fmt::format("{}: length {} != T={}", name, s->size(), T));
        for (int label : s->labels) {
            if (label < 0 || (m > 0 && label >= m)) {
                out.push_back(fmt::format("{}: label {} out of range", name, label + 1));
                break;
            }
        }
    };
    seq("s_c", traj.s_c, dims ? dims->m_c : 0);
    seq("s_a", traj.s_a, dims ? dims->m_a : 0);
    return out;
}

struct SpectralRadius {
    std::string matrix;  ///< e.g. "A_c(1)"
    double rho = 0.0;
    bool flagged = false;  ///< rho >= 1: not stable on its own
};

/// Per-mode spectral radii of every A_c(j), A_a(l). Flags are warnings: the
/// switched system can be stable on average with individually unstable modes.
template <typename Scalar>
std::vector<SpectralRadius> spectral_radius_report(const ThetaBundle<Scalar>& theta) {
    std::vector<SpectralRadius> out;
    auto add = [&](std::string name, const Matrix<Scalar>& a) {
        const double rho = static_cast<double>(spectral_radius(a));
        out.push_back({std::move(name), rho, rho >= 1.0 - 1e-12});
    };
    for (std::size_t j = 0; j < theta.causal.size(); ++j)
        add(fmt::format("A_c({})", j + 1), theta.causal[j].A_c);
    for (std::size_t l = 0; l < theta.anticausal.size(); ++l)
        add(fmt::format("A_a({})", l + 1), theta.anticausal[l].A_a);
    return out;
}

/// Largest absolute entry-wise difference between two bundles of equal shape.
template <typename Scalar>
Scalar max_parameter_change(const ThetaBundle<Scalar>& a, const ThetaBundle<Scalar>& b) {
    Scalar d = (a.pi_c - b.pi_c).cwiseAbs().maxCoeff();
    d = std::max(d, (a.pi_a - b.pi_a).cwiseAbs().maxCoeff());
    d = std::max(d, (a.Sigma_m - b.Sigma_m).cwiseAbs().maxCoeff());
    for (std::size_t j = 0; j < a.causal.size(); ++j) {
        d = std::max(d, (a.causal[j].A_c - b.causal[j].A_c).cwiseAbs().maxCoeff());
        d = std::max(d, (a.causal[j].C_c - b.causal[j].C_c).cwiseAbs().maxCoeff());
        d = std::max(d, (a.causal[j].Sigma_c - b.causal[j].Sigma_c).cwiseAbs().maxCoeff());
    }
    for (std::size_t l = 0; l < a.anticausal.size(); ++l) {
        d = std::max(d, (a.anticausal[l].A_a - b.anticausal[l].A_a).cwiseAbs().maxCoeff());
        d = std::max(d, (a.anticausal[l].C_a - b.anticausal[l].C_a).cwiseAbs().maxCoeff());
        d = std::max(d, (a.anticausal[l].Sigma_a - b.anticausal[l].Sigma_a).cwiseAbs().maxCoeff());
    }
    return d;
}

/// Relabels modes: estimated label k becomes perm_c[k] (resp. perm_a[k]).
template <typename Scalar>
ThetaBundle<Scalar> permute_modes(const ThetaBundle<Scalar>& theta, const std::vector<int>& perm_c,
                                  const std::vector<int>& perm_a) {
    ThetaBundle<Scalar> out = theta;
    for (std::size_t k = 0; k < perm_c.size(); ++k) {
        out.causal[static_cast<std::size_t>(perm_c[k])] = theta.causal[k];
        out.pi_c(perm_c[k]) = theta.pi_c(static_cast<Index>(k));
    }
    for (std::size_t k = 0; k < perm_a.size(); ++k) {
        out.anticausal[static_cast<std::size_t>(perm_a[k])] = theta.anticausal[k];
        out.pi_a(perm_a[k]) = theta.pi_a(static_cast<Index>(k));
    }
    return out;
}

inline ModeSequence permute_labels(const ModeSequence& s, const std::vector<int>& perm) {
    ModeSequence out = s;
    for (auto& l : out.labels) l = perm[static_cast<std::size_t>(l)];
    return out;
}

/// Same subsystem matrices with every process-noise covariance replaced by
/// sigma * I. Measurement noise is left alone.
template <typename Scalar>
ThetaBundle<Scalar> with_process_noise(ThetaBundle<Scalar> theta, Scalar sigma) {
    for (auto& p : theta.causal) p.Sigma_c = sigma * Matrix<Scalar>::Identity(theta.dims.n_xc, theta.dims.n_xc);
    for (auto& p : theta.anticausal) p.Sigma_a = sigma * Matrix<Scalar>::Identity(theta.dims.n_xa, theta.dims.n_xa);
    return theta;
}

/// The academic two-mode example: n_y = 1, two-dimensional causal and
/// anti-causal states, pi_c = (0.7, 0.3), pi_a = (0.5, 0.5), unit noise.
template <typename Scalar = double>
ThetaBundle<Scalar> example1_theta() {
    using M = Matrix<Scalar>;
    auto m2 = [](Scalar a, Scalar b, Scalar c, Scalar d) {
        M m(2, 2);
        m << a, b, c, d;
        return m;
    };
    auto row = [](Scalar a, Scalar b) {
        M m(1, 2);
        m << a, b;
        return m;
    };
    ThetaBundle<Scalar> th;
    th.dims = {2, 2, 1, 2, 2};
    const M I2 = M::Identity(2, 2);
    th.causal = {{m2(1, 0.2, 0.3, 0.8), row(0.3, 0.7), I2}, {m2(0.8, 0.2, 0.3, 0.5), row(0.7, 0.2), I2}};
    th.anticausal = {{m2(1, 0, 0, 1), row(0.2, 0.6), I2}, {m2(0.6, 0.2, 0.3, 0.8), row(0.3, 0.76), I2}};
    th.pi_c = Vector<Scalar>(2);
    th.pi_c << 0.7, 0.3;
    th.pi_a = Vector<Scalar>(2);
    th.pi_a << 0.5, 0.5;
    th.Sigma_m = M::Identity(1, 1);
    return th;
}

/// A well-separated two-mode system: n_y = 8, two-dimensional states, every
/// mode's output matrix occupying its own pair of output channels, stable
/// modes, unit process noise and Sigma_m = 0.01 I. Mode labels are nearly
/// recoverable from single output samples.
template <typename Scalar = double>
ThetaBundle<Scalar> benchmark_theta() {
    using M = Matrix<Scalar>;
    auto m2 = [](Scalar a, Scalar b, Scalar c, Scalar d) {
        M m(2, 2);
        m << a, b, c, d;
        return m;
    };
    auto block = [](int k) {
        M c = M::Zero(8, 2);
        c(2 * k, 0) = 1;
        c(2 * k + 1, 1) = 1;
        c((2 * k + 2) % 8, 0) = Scalar(0.2);
        return c;
    };
    ThetaBundle<Scalar> th;
    th.dims = {2, 2, 8, 2, 2};
    const M I2 = M::Identity(2, 2);
    th.causal = {{m2(0.9, 0.2, -0.2, 0.8), block(0), I2}, {m2(0.3, -0.6, 0.6, 0.3), block(1), I2}};
    th.anticausal = {{m2(0.85, 0, 0.3, 0.7), block(2), I2}, {m2(-0.5, 0.3, 0, 0.6), block(3), I2}};
    th.pi_c = Vector<Scalar>(2);
    th.pi_c << 0.6, 0.4;
    th.pi_a = Vector<Scalar>(2);
    th.pi_a << 0.5, 0.5;
    th.Sigma_m = Scalar(0.01) * M::Identity(8, 8);
    return th;
}

}  // namespace ncasm
