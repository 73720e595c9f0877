#include "ncasm/io.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string_view>

namespace ncasm {

namespace {

std::string num(double v) { return fmt::format("{:.17g}", v); }

void emit(std::string& out, const json& j, int indent, int depth) {
    const std::string pad = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * (depth + 1)), ' ') : "";
    const std::string close = indent > 0 ? "\n" + std::string(static_cast<std::size_t>(indent * depth), ' ') : "";
    const std::string sep = indent > 0 ? ": " : ":";
    switch (j.type()) {
        case json::value_t::number_float: {
            const double v = j.get<double>();
            out += std::isfinite(v) ? num(v) : "null";
            return;
        }
        case json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            // Arrays of scalars stay on one line so matrices read as rows.
            const bool flat = std::none_of(j.begin(), j.end(), [](const json& e) { return e.is_structured(); });
            out += '[';
            bool first = true;
            for (const auto& e : j) {
                if (!first) out += flat ? ", " : ",";
                first = false;
                if (!flat) out += pad;
                emit(out, e, indent, depth + 1);
            }
            if (!flat) out += close;
            out += ']';
            return;
        }
        case json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += '{';
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ',';
                first = false;
                out += pad;
                out += json(it.key()).dump();
                out += sep;
                emit(out, it.value(), indent, depth + 1);
            }
            out += close;
            out += '}';
            return;
        }
        default:
            out += j.dump();
    }
}

std::vector<std::string> split(std::string_view line, char delim) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(delim, start);
        std::string_view f = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
        out.emplace_back(f);
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

bool parse_double(const std::string& s, double& v) {
    if (s.empty()) return false;
    std::size_t used = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        return false;
    }
    return used == s.size();
}

/// Index of column `prefix_k` for k = 1, 2, ... until absent.
std::vector<std::size_t> numbered_columns(const std::vector<std::string>& header, const std::string& prefix) {
    std::vector<std::size_t> out;
    for (int k = 1;; ++k) {
        const auto it = std::find(header.begin(), header.end(), prefix + std::to_string(k));
        if (it == header.end()) break;
        out.push_back(static_cast<std::size_t>(it - header.begin()));
    }
    return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
    return os;
}

}  // namespace

std::string dump_json(const json& j, int indent) {
    std::string out;
    emit(out, j, indent, 0);
    out += '\n';
    return out;
}

json matrix_to_json(const Matrix<double>& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Index k = 0; k < m.cols(); ++k) r.push_back(m(i, k));
        rows.push_back(std::move(r));
    }
    return rows;
}

Matrix<double> matrix_from_json(const json& j, const std::string& what) {
    if (j.is_number()) {
        Matrix<double> m(1, 1);
        m(0, 0) = j.get<double>();
        return m;
    }
    if (!j.is_array()) throw ParseError(what + ": expected an array of rows");
    const auto rows = static_cast<Index>(j.size());
    Index cols = -1;
    Matrix<double> m;
    for (Index i = 0; i < rows; ++i) {
        const json& r = j[static_cast<std::size_t>(i)];
        if (!r.is_array()) throw ParseError(fmt::format("{}: row {} is not an array", what, i + 1));
        if (cols < 0) {
            cols = static_cast<Index>(r.size());
            m.resize(rows, cols);
        } else if (static_cast<Index>(r.size()) != cols) {
            throw ParseError(fmt::format("{}: ragged rows", what));
        }
        for (Index k = 0; k < cols; ++k) {
            const json& e = r[static_cast<std::size_t>(k)];
            if (!e.is_number()) throw ParseError(fmt::format("{}: entry ({}, {}) is not a number", what, i + 1, k + 1));
            m(i, k) = e.get<double>();
        }
    }
    if (rows == 0) m.resize(0, 0);
    return m;
}

json theta_to_json(const Theta& theta) {
    const Dims& d = theta.dims;
    json j;
    j["dims"] = {{"n_xc", d.n_xc}, {"n_xa", d.n_xa}, {"n_y", d.n_y}, {"m_c", d.m_c}, {"m_a", d.m_a}};
    j["causal"] = json::array();
    for (const auto& p : theta.causal)
        j["causal"].push_back({{"A_c", matrix_to_json(p.A_c)}, {"C_c", matrix_to_json(p.C_c)}, {"Sigma_c", matrix_to_json(p.Sigma_c)}});
    j["anticausal"] = json::array();
    for (const auto& p : theta.anticausal)
        j["anticausal"].push_back({{"A_a", matrix_to_json(p.A_a)}, {"C_a", matrix_to_json(p.C_a)}, {"Sigma_a", matrix_to_json(p.Sigma_a)}});
    j["pi_c"] = std::vector<double>(theta.pi_c.data(), theta.pi_c.data() + theta.pi_c.size());
    j["pi_a"] = std::vector<double>(theta.pi_a.data(), theta.pi_a.data() + theta.pi_a.size());
    j["Sigma_m"] = matrix_to_json(theta.Sigma_m);
    return j;
}

Theta theta_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("theta: expected a JSON object");
    for (const char* key : {"dims", "causal", "anticausal", "pi_c", "pi_a", "Sigma_m"})
        if (!j.contains(key)) throw ParseError(fmt::format("theta: missing key '{}'", key));
    Theta th;
    try {
        const json& d = j.at("dims");
        th.dims = {d.at("n_xc").get<int>(), d.at("n_xa").get<int>(), d.at("n_y").get<int>(), d.at("m_c").get<int>(),
                   d.at("m_a").get<int>()};
        auto vec = [](const json& a, const std::string& what) {
            if (!a.is_array()) throw ParseError(what + ": expected an array");
            Vector<double> v(static_cast<Index>(a.size()));
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (!a[i].is_number()) throw ParseError(what + ": non-numeric entry");
                v(static_cast<Index>(i)) = a[i].get<double>();
            }
            return v;
        };
        int k = 1;
        for (const auto& p : j.at("causal")) {
            const std::string tag = fmt::format("({})", k++);
            th.causal.push_back({matrix_from_json(p.at("A_c"), "A_c" + tag), matrix_from_json(p.at("C_c"), "C_c" + tag),
                                 matrix_from_json(p.at("Sigma_c"), "Sigma_c" + tag)});
        }
        k = 1;
        for (const auto& p : j.at("anticausal")) {
            const std::string tag = fmt::format("({})", k++);
            th.anticausal.push_back({matrix_from_json(p.at("A_a"), "A_a" + tag), matrix_from_json(p.at("C_a"), "C_a" + tag),
                                     matrix_from_json(p.at("Sigma_a"), "Sigma_a" + tag)});
        }
        th.pi_c = vec(j.at("pi_c"), "pi_c");
        th.pi_a = vec(j.at("pi_a"), "pi_a");
        th.Sigma_m = matrix_from_json(j.at("Sigma_m"), "Sigma_m");
    } catch (const json::exception& ex) {
        throw ParseError(std::string("theta: ") + ex.what());
    }
    validate_theta(th, MeasurementNoise::PositiveSemidefinite);
    return th;
}

json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
    try {
        return json::parse(is);
    } catch (const json::parse_error& ex) {
        throw ParseError(fmt::format("{}: {}", path.string(), ex.what()));
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    auto os = open_out(path);
    os << text;
    if (!os) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
}

Theta read_theta(const std::filesystem::path& path) { return theta_from_json(read_json(path)); }

void write_theta(const std::filesystem::path& path, const Theta& theta) { write_text(path, dump_json(theta_to_json(theta))); }

void write_trajectory_csv(std::ostream& os, const Trajectory<double>& traj) {
    const Index T = traj.T();
    os << 't';
    for (Index k = 0; k < traj.y.cols(); ++k) os << ",y_" << k + 1;
    if (traj.x_c)
        for (Index k = 0; k < traj.x_c->cols(); ++k) os << ",xc_" << k + 1;
    if (traj.x_a)
        for (Index k = 0; k < traj.x_a->cols(); ++k) os << ",xa_" << k + 1;
    if (traj.s_c) os << ",s_c";
    if (traj.s_a) os << ",s_a";
    os << '\n';
    std::string line;
    for (Index t = 0; t < T; ++t) {
        line = std::to_string(t + 1);
        for (Index k = 0; k < traj.y.cols(); ++k) line += "," + num(traj.y(t, k));
        if (traj.x_c)
            for (Index k = 0; k < traj.x_c->cols(); ++k) line += "," + num((*traj.x_c)(t, k));
        if (traj.x_a)
            for (Index k = 0; k < traj.x_a->cols(); ++k) line += "," + num((*traj.x_a)(t, k));
        if (traj.s_c) line += "," + std::to_string((*traj.s_c)[t] + 1);
        if (traj.s_a) line += "," + std::to_string((*traj.s_a)[t] + 1);
        os << line << '\n';
    }
}

Trajectory<double> read_trajectory_csv(std::istream& is, const std::string& source) {
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> header;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        header = split(line, ',');
        break;
    }
    if (header.empty()) throw ParseError(fmt::format("{}: empty file", source));
    double probe = 0;
    if (header[0] != "t") {
        if (parse_double(header[0], probe)) {
            throw ParseError(fmt::format("{}: line {}: missing header row (expected 't,y_1,...')", source, lineno));
        }
        throw ParseError(fmt::format("{}: line {}: first column must be 't'", source, lineno));
    }
    const auto ycol = numbered_columns(header, "y_");
    const auto xccol = numbered_columns(header, "xc_");
    const auto xacol = numbered_columns(header, "xa_");
    if (ycol.empty()) throw ParseError(fmt::format("{}: line {}: no output columns 'y_1'...", source, lineno));
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto sccol = find("s_c");
    const auto sacol = find("s_a");
    if (xccol.empty() != xacol.empty()) throw ParseError(fmt::format("{}: line {}: state columns must include both xc_ and xa_", source, lineno));
    if (sccol.has_value() != sacol.has_value()) throw ParseError(fmt::format("{}: line {}: mode columns must include both s_c and s_a", source, lineno));
    const std::size_t known = 1 + ycol.size() + xccol.size() + xacol.size() + (sccol ? 2 : 0);
    if (known != header.size()) throw ParseError(fmt::format("{}: line {}: unrecognized column in header", source, lineno));

    std::vector<std::vector<double>> rows;
    std::vector<int> sc, sa;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = split(line, ',');
        if (f.size() != header.size()) {
            throw ParseError(fmt::format("{}: line {}: expected {} fields, got {}", source, lineno, header.size(), f.size()));
        }
        std::vector<double> r(f.size());
        for (std::size_t c = 0; c < f.size(); ++c) {
            if (!parse_double(f[c], r[c])) {
                throw ParseError(fmt::format("{}: line {}: invalid number '{}' in column {}", source, lineno, f[c], header[c]));
            }
        }
        auto label = [&](std::size_t c) {
            const double v = r[c];
            if (v != std::floor(v) || v < 1) {
                throw ParseError(fmt::format("{}: line {}: mode label in column {} must be a positive integer", source, lineno, header[c]));
            }
            return static_cast<int>(v) - 1;
        };
        if (sccol) {
            sc.push_back(label(*sccol));
            sa.push_back(label(*sacol));
        }
        rows.push_back(std::move(r));
    }
    const auto T = static_cast<Index>(rows.size());
    Trajectory<double> traj;
    auto gather = [&](const std::vector<std::size_t>& cols) {
        Matrix<double> m(T, static_cast<Index>(cols.size()));
        for (Index t = 0; t < T; ++t)
            for (std::size_t k = 0; k < cols.size(); ++k) m(t, static_cast<Index>(k)) = rows[static_cast<std::size_t>(t)][cols[k]];
        return m;
    };
    traj.y = gather(ycol);
    if (!xccol.empty()) {
        traj.x_c = gather(xccol);
        traj.x_a = gather(xacol);
    }
    if (sccol) {
        traj.s_c = ModeSequence(std::move(sc));
        traj.s_a = ModeSequence(std::move(sa));
    }
    if (auto v = trajectory_violations(traj); !v.empty()) {
        throw ParseError(fmt::format("{}: {}", source, ValidationError(std::move(v)).what()));
    }
    return traj;
}

Trajectory<double> read_trajectory(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
    return read_trajectory_csv(is, path.string());
}

void write_trajectory(const std::filesystem::path& path, const Trajectory<double>& traj) {
    auto os = open_out(path);
    write_trajectory_csv(os, traj);
    if (!os) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
}

json report_to_json(const EmReport<double>& rep) {
    json j;
    j["converged"] = rep.converged;
    j["stop_reason"] = std::string(to_string(rep.stop_reason));
    if (!rep.message.empty()) j["message"] = rep.message;
    j["final_q"] = rep.final_q;
    j["initial_theta"] = theta_to_json(rep.initial_theta);
    json its = json::array();
    for (const auto& it : rep.iterates) {
        json r;
        r["k"] = it.k;
        r["q_estep"] = it.q_estep;
        r["q_mstep"] = it.q_mstep;
        r["max_delta"] = it.max_delta;
        r["label_change"] = it.label_change;
        r["frozen"] = it.frozen;
        if (it.match_c) r["match_c"] = *it.match_c;
        if (it.match_a) r["match_a"] = *it.match_a;
        json pc = json::array(), pa = json::array();
        for (Index i = 0; i < it.theta.pi_c.size(); ++i) pc.push_back(it.theta.pi_c(i));
        for (Index i = 0; i < it.theta.pi_a.size(); ++i) pa.push_back(it.theta.pi_a(i));
        r["theta_summary"] = {{"pi_c", pc}, {"pi_a", pa}, {"Sigma_m_trace", it.theta.Sigma_m.trace()}};
        if (!it.warnings.empty()) r["warnings"] = it.warnings;
        its.push_back(std::move(r));
    }
    j["iterates"] = std::move(its);
    j["theta"] = theta_to_json(rep.final_theta);
    return j;
}

void write_q_trace_csv(std::ostream& os, const EmReport<double>& rep) {
    os << "k,q_estep,q_mstep,max_delta,label_change,match_c,match_a\n";
    for (const auto& it : rep.iterates) {
        os << it.k << ',' << num(it.q_estep) << ',' << num(it.q_mstep) << ',' << num(it.max_delta) << ','
           << num(it.label_change) << ',' << (it.match_c ? num(*it.match_c) : "") << ','
           << (it.match_a ? num(*it.match_a) : "") << '\n';
    }
}

void write_montecarlo_trials_csv(std::ostream& os, const MonteCarloResult& mc) {
    os << "level,trial,ok,match_c,match_a,delta_c,delta_a,converged,iterations,error\n";
    for (const auto& r : mc.trials) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        os << num(r.level) << ',' << r.trial << ',' << int(r.ok) << ',' << num(r.match_c) << ',' << num(r.match_a)
           << ',' << num(r.delta_c) << ',' << num(r.delta_a) << ',' << int(r.converged) << ',' << r.iterations << ','
           << err << '\n';
    }
}

void write_montecarlo_summary_csv(std::ostream& os, const MonteCarloResult& mc) {
    os << "level,succeeded,failed,mean_match_c,var_match_c,mean_match_a,var_match_a\n";
    for (const auto& s : mc.levels) {
        os << num(s.level) << ',' << s.succeeded << ',' << s.failed << ',' << num(s.mean_c) << ',' << num(s.var_c)
           << ',' << num(s.mean_a) << ',' << num(s.var_a) << '\n';
    }
}

void write_rate_samples_csv(std::ostream& os, const RateProbe& probe) {
    os << "horizon,seed,matrix,error,raw_error\n";
    for (const auto& s : probe.samples)
        os << s.horizon << ',' << s.seed << ',' << s.matrix << ',' << num(s.error) << ',' << num(s.raw_error) << '\n';
}

void write_rate_summary_csv(std::ostream& os, const RateProbe& probe) {
    os << "kind,matrix,horizon,value\n";
    for (std::size_t m = 0; m < probe.matrices.size(); ++m)
        for (std::size_t h = 0; h < probe.horizons.size(); ++h)
            os << "median_error," << probe.matrices[m] << ',' << probe.horizons[h] << ',' << num(probe.median_error[m][h]) << '\n';
    for (std::size_t h = 0; h < probe.horizons.size(); ++h)
        for (std::size_t g = 0; g < probe.gram[h].size(); ++g) {
            os << "gram_lambda_min," << probe.gram_names[g] << ',' << probe.horizons[h] << ',' << num(probe.gram[h][g].first) << '\n';
            os << "gram_lambda_max," << probe.gram_names[g] << ',' << probe.horizons[h] << ',' << num(probe.gram[h][g].second) << '\n';
        }
    for (std::size_t m = 0; m < probe.matrix_slope.size(); ++m)
        os << "slope," << probe.matrices[m] << ",," << num(probe.matrix_slope[m]) << '\n';
    os << "slope,pooled,," << num(probe.slope) << '\n';
    os << "slope,median_over_seeds,," << num(probe.median_seed_slope) << '\n';
    os << "flag,degenerate,," << int(probe.degenerate) << '\n';
    os << "flag,slope_undefined,," << int(probe.slope_undefined) << '\n';
    os << "flag,failures,," << probe.failures.size() << '\n';
}

}  // namespace ncasm
