#include "ncasm/cli.hpp"

#include "ncasm/diagnostics.hpp"
#include "ncasm/em.hpp"
#include "ncasm/io.hpp"
#include "ncasm/montecarlo.hpp"
#include "ncasm/simulate.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace ncasm {

namespace {

/// Expands `--config FILE` (a flat JSON object keyed by long option names,
/// underscores and dashes interchangeable) into flags placed right after the
/// subcommand. Keys whose flag is already on the command line are skipped.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file name");
            path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (path.empty() || args.size() < 2) return args;
    std::ifstream is(path);
    if (!is) throw CLI::ConfigError("config: cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& ex) {
        throw CLI::ConfigError(std::string("config: ") + ex.what());
    }
    if (!j.is_object()) throw CLI::ConfigError("config: expected a JSON object");
    auto given = [&](const std::string& flag) {
        return std::any_of(args.begin(), args.end(),
                           [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
    };
    auto text = [](const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_float()) return fmt::format("{:.17g}", v.get<double>());
        return v.dump();
    };
    std::vector<std::string> extra;
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::string flag = "--" + it.key();
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (given(flag)) continue;
        const json& v = it.value();
        if (v.is_boolean()) {
            if (v.get<bool>()) extra.push_back(flag);
            continue;
        }
        extra.push_back(flag);
        if (v.is_array()) {
            for (const auto& e : v) extra.push_back(text(e));
        } else {
            extra.push_back(text(v));
        }
    }
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    return args;
}

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto log = std::make_shared<spdlog::logger>("ncasm", sink);
    log->set_pattern("[%l] %v");
    spdlog::level::level_enum level = spdlog::level::warn;
    if (const char* env = std::getenv("NCASM_LOG")) {
        const std::string v = env;
        if (v == "error") level = spdlog::level::err;
        else if (v == "warn") level = spdlog::level::warn;
        else if (v == "info") level = spdlog::level::info;
        else if (v == "debug") level = spdlog::level::debug;
    }
    log->set_level(level);
    return log;
}

struct EmFlags {
    int max_iters = 100;
    double tol_q = 1e-6;
    double tol_theta = 1e-5;
    int sweeps = 2;
    std::string init = "random";
    double rho = 0.2;
    bool soft = false;
    bool joint = false;
    bool permissive = false;
    double freeze = 1e-3;

    void add_to(CLI::App* app) {
        app->add_option("--max-iters", max_iters, "maximum EM iterations")->check(CLI::PositiveNumber);
        app->add_option("--tol-q", tol_q, "relative surrogate change threshold")->check(CLI::PositiveNumber);
        app->add_option("--tol-theta", tol_theta, "max parameter change threshold")->check(CLI::PositiveNumber);
        app->add_option("--sweeps", sweeps, "forward/backward sweeps per E step")->check(CLI::PositiveNumber);
        app->add_option("--init", init, "random | perturb | segments")->check(CLI::IsMember({"random", "perturb", "segments"}));
        app->add_option("--rho", rho, "relative perturbation size for --init perturb")->check(CLI::NonNegativeNumber);
        app->add_flag("--soft", soft, "soft mode weights instead of hard assignment");
        app->add_flag("--joint", joint, "exhaustive search over mode pairs");
        app->add_flag("--permissive", permissive, "warn instead of stopping when the surrogate decreases");
        app->add_option("--freeze", freeze, "label-change fraction below which labels are frozen")->check(CLI::NonNegativeNumber);
    }

    EmConfig<double> config(std::uint64_t seed) const {
        EmConfig<double> c;
        c.max_iters = max_iters;
        c.tol_Q = tol_q;
        c.tol_theta = tol_theta;
        c.sweeps = sweeps;
        c.init = init == "perturb" ? InitStrategy::Perturb : init == "segments" ? InitStrategy::Segments : InitStrategy::Random;
        c.perturb_rho = rho;
        c.seed = seed;
        c.soft_weights = soft;
        c.joint_mode_search = joint;
        c.monotonicity = permissive ? Monotonicity::Permissive : Monotonicity::Assert;
        c.freeze_fraction = freeze;
        return c;
    }
};

struct Common {
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string out = ".";
};

void add_common(CLI::App* app, Common& c, bool random, bool parallel) {
    app->add_option("--config", "JSON file with option values (flags win)");
    app->add_option("--out", c.out, "output directory");
    if (random) app->add_option("--seed", c.seed, "RNG seed");
    if (parallel) app->add_option("--jobs", c.jobs, "parallel jobs")->check(CLI::PositiveNumber);
}

Theta load_truth(const std::string& theta_path, bool example1, bool benchmark) {
    if (example1 && benchmark) throw std::invalid_argument("--example1 and --benchmark are exclusive");
    if (example1) return example1_theta<double>();
    if (benchmark) return benchmark_theta<double>();
    if (theta_path.empty()) throw std::invalid_argument("one of --theta, --example1 or --benchmark is required");
    return read_theta(theta_path);
}

std::string csv_num(double v) { return fmt::format("{:.17g}", v); }

// ---------------------------------------------------------------------------

struct SimulateArgs {
    Common common;
    std::string theta;
    bool example1 = false;
    bool benchmark = false;
    long long T = 0;
    std::optional<double> process_noise;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
    if (a.T < 2) throw std::invalid_argument("T >= 2 required");
    Theta theta = load_truth(a.theta, a.example1, a.benchmark);
    if (a.process_noise) theta = with_process_noise(theta, *a.process_noise);
    SimConfig<double> cfg;
    cfg.T = a.T;
    cfg.seed = a.common.seed;
    const Trajectory<double> traj = simulate(theta, cfg);
    const fs::path dir = a.common.out;
    write_trajectory(dir / "trajectory.csv", traj);
    write_theta(dir / "theta.json", theta);
    for (const auto& r : spectral_radius_report(theta)) {
        if (r.flagged) out << fmt::format("note: spectral radius of {} is {:.6g}\n", r.matrix, r.rho);
    }
    out << fmt::format("wrote {} rows to {}\n", traj.T(), (dir / "trajectory.csv").string());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct IdentifyArgs {
    Common common;
    EmFlags em;
    std::string data;
    std::string init_theta;
    int n_xc = 0, n_xa = 0, m_c = 0, m_a = 0;
};

void write_identify_outputs(const fs::path& dir, const Trajectory<double>& traj, const EmReport<double>& rep, bool complete) {
    write_text(dir / "report.json", dump_json(report_to_json(rep)));
    {
        std::ofstream q(dir / "q_trace.csv", std::ios::binary);
        write_q_trace_csv(q, rep);
    }
    if (!complete) return;
    write_theta(dir / "theta.json", rep.final_theta);
    Trajectory<double> est;
    est.y = traj.y;
    est.x_c = rep.final_states.xhat_c_post;
    est.x_a = rep.final_states.xhat_a_post;
    est.s_c = rep.final_s_c;
    est.s_a = rep.final_s_a;
    write_trajectory(dir / "estimates.csv", est);
}

int cmd_identify(const IdentifyArgs& a, std::ostream& out, spdlog::logger& log) {
    const Trajectory<double> traj = read_trajectory(a.data);
    EmConfig<double> cfg = a.em.config(a.common.seed);
    Dims dims;
    std::optional<Theta> ref;
    if (!a.init_theta.empty()) {
        ref = read_theta(a.init_theta);
        dims = ref->dims;
    }
    if (a.n_xc > 0) dims.n_xc = a.n_xc;
    if (a.n_xa > 0) dims.n_xa = a.n_xa;
    if (a.m_c > 0) dims.m_c = a.m_c;
    if (a.m_a > 0) dims.m_a = a.m_a;
    dims.n_y = static_cast<int>(traj.y.cols());
    if (!ref && (a.n_xc < 1 || a.n_xa < 1 || a.m_c < 1 || a.m_a < 1)) {
        throw std::invalid_argument("--n-xc, --n-xa, --m-c and --m-a are required without --init-theta");
    }
    if (cfg.init == InitStrategy::Perturb) {
        if (!ref) throw std::invalid_argument("--init perturb needs --init-theta");
        if (!(ref->dims == dims)) throw std::invalid_argument("--init-theta dimensions do not match the data and flags");
        cfg.perturb_reference = *ref;
    }
    const fs::path dir = a.common.out;
    fs::create_directories(dir);
    EmReport<double> rep;
    try {
        rep = fit(traj, dims, cfg);
    } catch (const EmError<double>& ex) {
        write_identify_outputs(dir, traj, ex.partial(), false);
        throw;
    }
    std::map<std::string, int> repeats;
    for (const auto& it : rep.iterates) {
        out << fmt::format("iter {} Q={:.10g} max_delta={:.6g}", it.k, it.q_mstep, it.max_delta);
        if (it.match_c) out << fmt::format(" match_c={:.4f} match_a={:.4f}", *it.match_c, *it.match_a);
        out << '\n';
        for (const auto& w : it.warnings)
            if (repeats[w]++ == 0) log.warn("iteration {}: {}", it.k, w);
    }
    for (const auto& [w, n] : repeats)
        if (n > 1) log.warn("{} (in {} iterations)", w, n);
    for (const auto& r : spectral_radius_report(rep.final_theta))
        if (r.flagged) log.info("estimated {} has spectral radius {:.6g}", r.matrix, r.rho);
    const bool aborted = rep.stop_reason == StopReason::MonotonicityViolation;
    write_identify_outputs(dir, traj, rep, !aborted);
    out << fmt::format("stop_reason={} iterations={} converged={}\n", to_string(rep.stop_reason), rep.iterates.size(),
                       rep.converged);
    if (aborted) {
        log.error("{}", rep.message);
        return kExitRuntime;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    Common common;
    std::string data, estimates, theta, true_theta;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, spdlog::logger& log) {
    const Trajectory<double> truth = read_trajectory(a.data);
    const Trajectory<double> est = read_trajectory(a.estimates);
    if (est.T() != truth.T()) throw std::invalid_argument("estimates and data have different lengths");
    std::optional<Theta> theta_hat;
    if (!a.theta.empty()) theta_hat = read_theta(a.theta);
    std::vector<std::pair<std::string, double>> rows;
    std::vector<int> perm_c, perm_a;
    if (est.has_modes() && truth.has_modes()) {
        const int mc = theta_hat ? theta_hat->dims.m_c : 1 + std::max(*std::max_element(est.s_c->labels.begin(), est.s_c->labels.end()),
                                                                        *std::max_element(truth.s_c->labels.begin(), truth.s_c->labels.end()));
        const int ma = theta_hat ? theta_hat->dims.m_a : 1 + std::max(*std::max_element(est.s_a->labels.begin(), est.s_a->labels.end()),
                                                                        *std::max_element(truth.s_a->labels.begin(), truth.s_a->labels.end()));
        rows.emplace_back("raw_match_c", mode_match_rate(*truth.s_c, *est.s_c));
        rows.emplace_back("raw_match_a", mode_match_rate(*truth.s_a, *est.s_a));
        const auto ac = align_chain(*est.s_c, *truth.s_c, mc);
        const auto aa = align_chain(*est.s_a, *truth.s_a, ma);
        perm_c = ac.perm;
        perm_a = aa.perm;
        rows.emplace_back("match_c", static_cast<double>(ac.matches) / static_cast<double>(truth.T()));
        rows.emplace_back("match_a", static_cast<double>(aa.matches) / static_cast<double>(truth.T()));
    } else {
        log.warn("mode columns missing in data or estimates: match rates skipped");
    }
    if (est.has_states() && truth.has_states()) {
        if (truth.x_c->squaredNorm() > 0) rows.emplace_back("delta_c", relative_state_error(*truth.x_c, *est.x_c));
        else log.warn("true causal states are zero: delta_c skipped");
        if (truth.x_a->squaredNorm() > 0) rows.emplace_back("delta_a", relative_state_error(*truth.x_a, *est.x_a));
        else log.warn("true anti-causal states are zero: delta_a skipped");
    } else {
        log.warn("state columns missing in data or estimates: state errors skipped");
    }
    if (theta_hat && est.has_states() && est.has_modes()) {
        const Matrix<double> yhat = reconstruct_output(*theta_hat, *est.x_c, *est.x_a, *est.s_c, *est.s_a);
        rows.emplace_back("delta_output", output_reconstruction_error(truth.y, yhat));
    } else {
        log.warn("--theta and estimated states/modes are needed for delta_output");
    }
    if (!a.true_theta.empty()) {
        if (!theta_hat) throw std::invalid_argument("--true-theta needs --theta");
        const Theta th_true = read_theta(a.true_theta);
        if (!(th_true.dims == theta_hat->dims)) throw std::invalid_argument("--true-theta and --theta dimensions differ");
        const Theta aligned = perm_c.empty() ? *theta_hat : permute_modes(*theta_hat, perm_c, perm_a);
        const auto e = mode_matrices(aligned), t = mode_matrices(th_true);
        for (std::size_t m = 0; m < e.size(); ++m) rows.emplace_back("error_" + e[m].first, inf_norm(e[m].second - t[m].second));
        rows.emplace_back("error_pi_c", (aligned.pi_c - th_true.pi_c).cwiseAbs().maxCoeff());
        rows.emplace_back("error_pi_a", (aligned.pi_a - th_true.pi_a).cwiseAbs().maxCoeff());
        rows.emplace_back("error_Sigma_m", (aligned.Sigma_m - th_true.Sigma_m).cwiseAbs().maxCoeff());
    }
    std::ostringstream csv;
    csv << "metric,value\n";
    for (const auto& [k, v] : rows) {
        csv << k << ',' << csv_num(v) << '\n';
        out << fmt::format("{} = {:.6g}\n", k, v);
    }
    write_text(fs::path(a.common.out) / "metrics.csv", csv.str());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct MonteCarloArgs {
    Common common;
    EmFlags em;
    std::string theta;
    bool example1 = false;
    bool benchmark = false;
    std::vector<double> levels{0.01, 0.1, 0.5, 1.0};
    int trials = 100;
    long long T = 10000;
};

int cmd_montecarlo(const MonteCarloArgs& a, std::ostream& out) {
    if (a.T < 2) throw std::invalid_argument("T >= 2 required");
    MonteCarloConfig<double> cfg;
    cfg.base = load_truth(a.theta, a.example1, a.benchmark);
    cfg.levels = a.levels;
    cfg.trials = a.trials;
    cfg.T = a.T;
    cfg.seed = a.common.seed;
    cfg.jobs = a.common.jobs;
    cfg.em = a.em.config(a.common.seed);
    const MonteCarloResult mc = monte_carlo(cfg);
    const fs::path dir = a.common.out;
    std::ostringstream trials, summary;
    write_montecarlo_trials_csv(trials, mc);
    write_montecarlo_summary_csv(summary, mc);
    write_text(dir / "montecarlo_trials.csv", trials.str());
    write_text(dir / "montecarlo_summary.csv", summary.str());
    for (const auto& s : mc.levels) {
        out << fmt::format("level {:g}: match_c {:.4f} (var {:.3g}) match_a {:.4f} (var {:.3g}) ok {} failed {}\n", s.level,
                           s.mean_c, s.var_c, s.mean_a, s.var_a, s.succeeded, s.failed);
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct RatesArgs {
    Common common;
    EmFlags em;
    std::string theta;
    bool example1 = false;
    bool benchmark = false;
    std::vector<long long> horizons{100, 1000, 10000};
    int seeds = 10;
};

int cmd_rates(const RatesArgs& a, std::ostream& out) {
    RateProbeConfig<double> cfg;
    cfg.horizons.assign(a.horizons.begin(), a.horizons.end());
    cfg.seeds = a.seeds;
    cfg.seed = a.common.seed;
    cfg.jobs = a.common.jobs;
    cfg.perturb_rho = a.em.rho;
    cfg.em = a.em.config(a.common.seed);
    const RateProbe probe = rate_probe(load_truth(a.theta, a.example1, a.benchmark), cfg);
    const fs::path dir = a.common.out;
    std::ostringstream samples, summary;
    write_rate_samples_csv(samples, probe);
    write_rate_summary_csv(summary, probe);
    write_text(dir / "rates_samples.csv", samples.str());
    write_text(dir / "rates_summary.csv", summary.str());
    for (std::size_t m = 0; m < probe.matrices.size(); ++m) {
        out << probe.matrices[m] << ':';
        for (double e : probe.median_error[m]) out << fmt::format(" {:.4g}", e);
        out << '\n';
    }
    if (probe.degenerate) out << "degenerate: errors vanish at every horizon\n";
    if (probe.slope_undefined) out << "slope undefined: fewer than two horizons\n";
    if (!probe.degenerate && !probe.slope_undefined)
        out << fmt::format("slope {:.4f} (median over seeds {:.4f})\n", probe.slope, probe.median_seed_slope);
    if (!probe.failures.empty()) out << fmt::format("{} failed runs\n", probe.failures.size());
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    auto log = make_logger(err);
    CLI::App app{"Simulation and identification of non-causal switched linear systems", "ncasm"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "simulate a trajectory");
    add_common(s, sim.common, true, false);
    s->add_option("--theta", sim.theta, "theta JSON");
    s->add_flag("--example1", sim.example1, "use the bundled two-mode example");
    s->add_flag("--benchmark", sim.benchmark, "use the bundled well-separated two-mode system");
    s->add_option("--T", sim.T, "horizon")->required();
    s->add_option("--process-noise", sim.process_noise, "replace every process-noise covariance by this multiple of I");

    IdentifyArgs idf;
    auto* i = app.add_subcommand("identify", "identify theta from a trajectory CSV");
    add_common(i, idf.common, true, false);
    idf.em.add_to(i);
    i->add_option("--data", idf.data, "trajectory CSV")->required();
    i->add_option("--init-theta", idf.init_theta, "reference theta (dims, and the centre for --init perturb)");
    i->add_option("--n-xc", idf.n_xc, "causal state dimension");
    i->add_option("--n-xa", idf.n_xa, "anti-causal state dimension");
    i->add_option("--m-c", idf.m_c, "number of causal modes");
    i->add_option("--m-a", idf.m_a, "number of anti-causal modes");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "compare estimates with ground truth");
    add_common(e, ev.common, false, false);
    e->add_option("--data", ev.data, "trajectory CSV with ground truth (or y only)")->required();
    e->add_option("--estimates", ev.estimates, "estimates.csv written by identify")->required();
    e->add_option("--theta", ev.theta, "estimated theta JSON");
    e->add_option("--true-theta", ev.true_theta, "true theta JSON for parameter errors");

    MonteCarloArgs mcs;
    auto* m = app.add_subcommand("montecarlo", "repeated trials over process-noise levels");
    add_common(m, mcs.common, true, true);
    mcs.em.add_to(m);
    m->add_option("--theta", mcs.theta, "base theta JSON");
    m->add_flag("--example1", mcs.example1, "use the bundled two-mode example");
    m->add_flag("--benchmark", mcs.benchmark, "use the bundled well-separated two-mode system");
    m->add_option("--levels", mcs.levels, "process-noise levels")->check(CLI::NonNegativeNumber);
    m->add_option("--trials", mcs.trials, "trials per level")->check(CLI::PositiveNumber);
    m->add_option("--T", mcs.T, "horizon");

    RatesArgs rt;
    auto* r = app.add_subcommand("rates", "parameter error versus horizon");
    add_common(r, rt.common, true, true);
    rt.em.add_to(r);
    rt.em.init = "perturb";
    rt.em.rho = 0.02;
    r->add_option("--theta", rt.theta, "true theta JSON");
    r->add_flag("--example1", rt.example1, "use the bundled two-mode example");
    r->add_flag("--benchmark", rt.benchmark, "use the bundled well-separated two-mode system");
    r->add_option("--horizons", rt.horizons, "horizons, strictly increasing");
    r->add_option("--seeds", rt.seeds, "seeds per horizon")->check(CLI::PositiveNumber);

    try {
        std::vector<std::string> args(argv, argv + argc);
        args = expand_config(std::move(args));
        std::reverse(args.begin(), args.end());
        args.pop_back();
        app.parse(args);
    } catch (const CLI::CallForHelp& ex) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& ex) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::Error& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    }

    try {
        if (s->parsed()) return cmd_simulate(sim, out);
        if (i->parsed()) return cmd_identify(idf, out, *log);
        if (e->parsed()) return cmd_evaluate(ev, out, *log);
        if (m->parsed()) return cmd_montecarlo(mcs, out);
        if (r->parsed()) return cmd_rates(rt, out);
    } catch (const ValidationError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const ParseError& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace ncasm
