#pragma once

/// @file io.hpp
/// File formats. Theta is JSON (matrices as arrays of rows); trajectories are
/// CSV with a mandatory header `t,y_1..[,xc_1..,xa_1..][,s_c,s_a]` and 1-based
/// mode labels. All doubles are written with 17 significant digits.

#include "ncasm/diagnostics.hpp"
#include "ncasm/em.hpp"
#include "ncasm/model.hpp"
#include "ncasm/montecarlo.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

namespace ncasm {

/// Malformed input file; the message names the file and line where possible.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using json = nlohmann::json;

/// Serializes with every floating-point number printed as %.17g.
std::string dump_json(const json& j, int indent = 2);

json matrix_to_json(const Matrix<double>& m);
Matrix<double> matrix_from_json(const json& j, const std::string& what);

json theta_to_json(const Theta& theta);
/// Parses and validates (Sigma_m must be positive semidefinite at least).
Theta theta_from_json(const json& j);

Theta read_theta(const std::filesystem::path& path);
void write_theta(const std::filesystem::path& path, const Theta& theta);

json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

void write_trajectory_csv(std::ostream& os, const Trajectory<double>& traj);
/// `source` names the input in error messages.
Trajectory<double> read_trajectory_csv(std::istream& is, const std::string& source = "<input>");
Trajectory<double> read_trajectory(const std::filesystem::path& path);
void write_trajectory(const std::filesystem::path& path, const Trajectory<double>& traj);

json report_to_json(const EmReport<double>& rep);
void write_q_trace_csv(std::ostream& os, const EmReport<double>& rep);

void write_montecarlo_trials_csv(std::ostream& os, const MonteCarloResult& mc);
void write_montecarlo_summary_csv(std::ostream& os, const MonteCarloResult& mc);

/// One row per (horizon, seed, matrix) sample.
void write_rate_samples_csv(std::ostream& os, const RateProbe& probe);
/// One row per (matrix, horizon) median, followed by slope rows.
void write_rate_summary_csv(std::ostream& os, const RateProbe& probe);

}  // namespace ncasm
