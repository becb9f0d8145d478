#include "pbd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/version.hpp>

#include "pbd/errors.hpp"
#include "pbd/parallel.hpp"

namespace pbd {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

template <class T>
void read(const ojson& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("config key '") + key + "': " + e.what());
        }
    }
}

void reject_unknown(const ojson& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw UsageError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw UsageError("unknown config key '" + key + "' in " + where);
    }
}

std::vector<double> with_floor(const std::vector<double>& schedule, double eps) {
    std::vector<double> out;
    for (double e : schedule) {
        if (e > eps) out.push_back(e);
    }
    out.push_back(eps);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

void ExperimentConfig::validate() const {
    if (domain != "unit_disk") throw UsageError("unknown domain '" + domain + "'");
    const auto names = conductivity_preset_names();
    for (const auto& c : {conductivity, conductivity_b}) {
        if (std::find(names.begin(), names.end(), c) == names.end()) {
            throw UsageError("unknown conductivity preset '" + c + "'");
        }
    }
    if (data != "exp" && data != "constant" && data != "oscillating") throw UsageError("unknown data '" + data + "'");
    if (!(p > 1.0) || !std::isfinite(p)) throw UsageError("p must satisfy 1 < p < infinity");
    if (!(theta0 >= 0.0 && theta0 < 2.0 * M_PI)) throw UsageError("theta0 must lie in [0, 2 pi)");
    if (!std::isfinite(alpha_angle)) throw UsageError("alpha_angle must be finite");
    for (std::size_t i = 0; i < M.size(); ++i) {
        if (!(M[i] >= 1.0)) throw UsageError("every M must be >= 1");
        if (i > 0 && !(M[i] > M[i - 1])) throw UsageError("M list must be increasing");
    }
    if (!(h > 0.0)) throw UsageError("mesh size h must be positive");
    if (!(points_per_period > 0.0)) throw UsageError("points_per_period must be positive");
    if (!(reconstruction_floor_factor > 0.0) || !(probe.floor_factor > 0.0)) {
        throw UsageError("probe floor factors must be positive");
    }
    if (!(wolff_tol > 0.0)) throw UsageError("wolff tolerance must be positive");
    CutoffSpec::from_id(cutoff);
    if (gamma_grid < 3) throw UsageError("gamma_grid must be at least 3");
    if (threads < 1) throw UsageError("threads must be at least 1");
    solver().validate();
    if (sweep) {
        if (sweep->kind != "reconstruct" && sweep->kind != "rellich") {
            throw UsageError("unknown sweep kind '" + sweep->kind + "'");
        }
    }
}

ojson ExperimentConfig::to_json() const {
    ojson j;
    j["domain"] = domain;
    j["conductivity"] = conductivity;
    j["conductivity_b"] = conductivity_b;
    j["data"] = data;
    j["p"] = p;
    j["theta0"] = theta0;
    j["alpha_angle"] = alpha_angle;
    j["M"] = M;
    j["h"] = h;
    j["mesh"] = {{"max_vertices", mesh.max_vertices}, {"growth", mesh.growth}, {"grading_ratio", mesh.grading_ratio}};
    j["eps_schedule"] = eps_schedule;
    j["residual_tol"] = residual_tol;
    j["max_newton"] = max_newton;
    j["gamma_mode"] = to_string(gamma_mode);
    j["points_per_period"] = points_per_period;
    j["probe"] = {{"delta0", probe.delta0},
                  {"floor_factor", probe.floor_factor},
                  {"levels", probe.levels},
                  {"richardson_order", probe.richardson_order},
                  {"divergence_tol", probe.divergence_tol},
                  {"abs_floor", probe.abs_floor}};
    j["reconstruction_floor_factor"] = reconstruction_floor_factor;
    j["probe_angles"] = probe_angles;
    j["wolff_tol"] = wolff_tol;
    j["cutoff"] = cutoff;
    j["gamma_grid"] = gamma_grid;
    j["gamma_grid_M"] = gamma_grid_M;
    if (sweep) {
        ojson s;
        s["kind"] = sweep->kind;
        if (!sweep->M.empty()) s["M"] = sweep->M;
        if (!sweep->h.empty()) s["h"] = sweep->h;
        if (!sweep->eps.empty()) s["eps"] = sweep->eps;
        if (!sweep->p.empty()) s["p"] = sweep->p;
        j["sweep"] = s;
    }
    j["output_dir"] = output_dir;
    j["seed"] = seed;
    j["threads"] = threads;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const ojson& j) {
    reject_unknown(j,
                   {"domain", "conductivity", "conductivity_b", "data", "p", "theta0", "alpha_angle", "M", "h", "mesh",
                    "eps_schedule", "residual_tol", "max_newton", "gamma_mode", "points_per_period", "probe",
                    "reconstruction_floor_factor", "probe_angles", "wolff_tol", "cutoff", "gamma_grid",
                    "gamma_grid_M", "sweep", "output_dir", "seed", "threads"},
                   "config");
    ExperimentConfig c;
    read(j, "domain", c.domain);
    read(j, "conductivity", c.conductivity);
    read(j, "conductivity_b", c.conductivity_b);
    read(j, "data", c.data);
    read(j, "p", c.p);
    read(j, "theta0", c.theta0);
    read(j, "alpha_angle", c.alpha_angle);
    read(j, "M", c.M);
    read(j, "h", c.h);
    if (j.contains("mesh")) {
        const ojson& m = j.at("mesh");
        reject_unknown(m, {"max_vertices", "growth", "grading_ratio"}, "mesh");
        read(m, "max_vertices", c.mesh.max_vertices);
        read(m, "growth", c.mesh.growth);
        read(m, "grading_ratio", c.mesh.grading_ratio);
    }
    read(j, "eps_schedule", c.eps_schedule);
    read(j, "residual_tol", c.residual_tol);
    read(j, "max_newton", c.max_newton);
    if (j.contains("gamma_mode")) {
        std::string mode;
        read(j, "gamma_mode", mode);
        c.gamma_mode = gamma_mode_from_string(mode);
    }
    read(j, "points_per_period", c.points_per_period);
    if (j.contains("probe")) {
        const ojson& pr = j.at("probe");
        reject_unknown(pr, {"delta0", "floor_factor", "levels", "richardson_order", "divergence_tol", "abs_floor"},
                       "probe");
        read(pr, "delta0", c.probe.delta0);
        read(pr, "floor_factor", c.probe.floor_factor);
        read(pr, "levels", c.probe.levels);
        read(pr, "richardson_order", c.probe.richardson_order);
        read(pr, "divergence_tol", c.probe.divergence_tol);
        read(pr, "abs_floor", c.probe.abs_floor);
    }
    read(j, "reconstruction_floor_factor", c.reconstruction_floor_factor);
    read(j, "probe_angles", c.probe_angles);
    read(j, "wolff_tol", c.wolff_tol);
    read(j, "cutoff", c.cutoff);
    read(j, "gamma_grid", c.gamma_grid);
    read(j, "gamma_grid_M", c.gamma_grid_M);
    if (j.contains("sweep")) {
        const ojson& s = j.at("sweep");
        reject_unknown(s, {"kind", "M", "h", "eps", "p"}, "sweep");
        SweepSpec sw;
        read(s, "kind", sw.kind);
        read(s, "M", sw.M);
        read(s, "h", sw.h);
        read(s, "eps", sw.eps);
        read(s, "p", sw.p);
        for (const char* key : {"M", "h", "eps", "p"}) {
            if (s.contains(key) && s.at(key).empty()) throw UsageError(std::string("sweep list '") + key + "' is empty");
        }
        c.sweep = sw;
    }
    read(j, "output_dir", c.output_dir);
    read(j, "seed", c.seed);
    read(j, "threads", c.threads);
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    ojson j;
    try {
        j = ojson::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
}

Domain ExperimentConfig::make_domain() const { return build_disk_domain(); }

Vec2 ExperimentConfig::x0() const { return make_domain().boundary_point_at_angle(theta0); }

Vec2 ExperimentConfig::alpha() const { return Vec2(std::cos(alpha_angle), std::sin(alpha_angle)); }

SolverConfig ExperimentConfig::solver() const {
    SolverConfig s;
    s.p = p;
    s.eps_schedule = eps_schedule;
    s.residual_tol = residual_tol;
    s.max_newton = max_newton;
    return s;
}

MeasurementOptions ExperimentConfig::measurement() const {
    MeasurementOptions m;
    m.h = h;
    m.mesh = mesh;
    return m;
}

ReconstructionOptions ExperimentConfig::reconstruction() const {
    ReconstructionOptions o;
    o.mode = gamma_mode;
    o.oscillation.cutoff = CutoffSpec::from_id(cutoff);
    o.oscillation.points_per_period = points_per_period;
    o.field.probe = probe;
    o.field.probe.throw_on_divergence = false;
    o.field.probe.floor_factor = reconstruction_floor_factor;
    o.gamma_grid = gamma_grid;
    o.gamma_grid_M = gamma_grid_M;
    o.threads = threads;
    return o;
}

BoundaryDatum ExperimentConfig::datum(const std::shared_ptr<const WolffProfile>& profile) const {
    if (data == "exp") return BoundaryDatum::smooth("exp(-x1)", [](const Vec2& x) { return std::exp(-x.x()); });
    if (data == "constant") return BoundaryDatum::smooth("constant", [](const Vec2&) { return 1.0; });
    if (!profile) throw UsageError("oscillating data needs a Wolff profile");
    if (M.empty()) throw UsageError("oscillating data needs an M");
    const Domain d = make_domain();
    const auto od = OscillatingDatum::make(boundary_frame(d, x0()), M.front(), profile, CutoffSpec::from_id(cutoff));
    return oscillating_boundary_datum(od, d, points_per_period);
}

// ---------------------------------------------------------------------------
// Study plumbing

std::vector<StudyRow> study_tuples(const ExperimentConfig& config) {
    if (!config.sweep) throw UsageError("study needs a 'sweep' section");
    const SweepSpec& s = *config.sweep;
    if (s.M.empty() && s.h.empty() && s.eps.empty() && s.p.empty()) throw UsageError("sweep lists are empty");
    const auto or_base = [](const std::vector<double>& v, double base) {
        return v.empty() ? std::vector<double>{base} : v;
    };
    const auto ps = or_base(s.p, config.p);
    const auto epss = or_base(s.eps, config.eps_schedule.back());
    const auto hs = or_base(s.h, config.h);
    const auto Ms = or_base(s.M, config.M.empty() ? 1.0 : config.M.back());
    std::vector<StudyRow> rows;
    std::set<std::vector<double>> seen;
    for (double p : ps)
        for (double eps : epss)
            for (double h : hs)
                for (double M : Ms) {
                    if (!seen.insert({p, eps, h, M}).second) throw UsageError("duplicate sweep tuple");
                    StudyRow r;
                    r.index = rows.size();
                    r.kind = s.kind;
                    r.p = p;
                    r.eps = eps;
                    r.h = h;
                    r.M = M;
                    rows.push_back(r);
                }
    return rows;
}

void write_study_csv(std::ostream& out, const std::vector<StudyRow>& rows) {
    const auto prec = out.precision(17);
    out << "kind,p,M,h,eps,status,gamma_hat,dgamma_hat,err_gamma,err_dgamma,rellich_lhs,rellich_rhs,rellich_residual\n";
    for (const auto& r : rows) {
        out << r.kind << ',' << r.p << ',' << r.M << ',' << r.h << ',' << r.eps << ',' << (r.ok ? "ok" : "failed");
        if (!r.ok) {
            out << ",,,,,,,\n";
            continue;
        }
        if (r.kind == "reconstruct") {
            out << ',' << r.gamma_hat << ',' << r.dgamma_hat << ',' << r.err_gamma << ',' << r.err_dgamma << ",,,\n";
        } else {
            out << ",,,,," << r.rellich_lhs << ',' << r.rellich_rhs << ',' << r.rellich_residual << '\n';
        }
    }
    out.precision(prec);
}

// ---------------------------------------------------------------------------
// Command runner

namespace {

class Run {
public:
    Run(std::string command, const ExperimentConfig& config) : command_(std::move(command)), config_(config) {
        dir_ = config.output_dir;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw UsageError("cannot create output directory '" + config.output_dir + "': " + ec.message());
        start_ = std::chrono::steady_clock::now();
    }

    std::ofstream open(const std::string& name) {
        std::ofstream out(dir_ / name);
        if (!out) throw Error("cannot write " + (dir_ / name).string());
        outputs_.push_back(name);
        return out;
    }

    void timing(const std::string& stage, double seconds) { timings_[stage] = seconds; }

    void finish(int code, const std::string& error) {
        ojson m;
        m["command"] = command_;
        m["exit_code"] = code;
        if (!error.empty()) m["error"] = error;
        m["config"] = config_.to_json();
        m["versions"] = {{"pbd", kVersion},
                         {"compiler", __VERSION__},
                         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                       "." + std::to_string(EIGEN_MINOR_VERSION)},
                         {"boost", BOOST_LIB_VERSION},
                         {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                               std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                               std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
        ojson t;
        for (const auto& [k, v] : timings_) t[k] = v;
        t["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        m["timings"] = t;
        m["outputs"] = outputs_;
        std::ofstream out(dir_ / "manifest.json");
        out << m.dump(2) << '\n';
    }

private:
    std::string command_;
    const ExperimentConfig& config_;
    fs::path dir_;
    std::vector<std::string> outputs_;
    std::map<std::string, double> timings_;
    std::chrono::steady_clock::time_point start_;
};

template <class Body>
int guarded(const std::string& command, const ExperimentConfig& config, std::ostream& console, Body&& body) {
    std::optional<Run> run;
    int code = 0;
    std::string error;
    try {
        run.emplace(command, config);
        config.validate();
        code = body(*run);
    } catch (const UsageError& e) {
        code = 1;
        error = e.what();
    } catch (const std::exception& e) {
        code = 2;
        error = e.what();
    }
    if (!error.empty()) console << "error: " << error << '\n';
    if (run) {
        try {
            run->finish(code, error);
        } catch (const std::exception& e) {
            console << "error: cannot write manifest: " << e.what() << '\n';
            if (code == 0) code = 2;
        }
    }
    return code;
}

void write_json(Run& run, const std::string& name, const ojson& j) {
    auto out = run.open(name);
    out << j.dump(2) << '\n';
}

double since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::shared_ptr<const WolffProfile> profile_for(const ExperimentConfig& c, double p) {
    return std::make_shared<const WolffProfile>(solve_profile(p, c.wolff_tol));
}

void print_reconstruction(std::ostream& console, const std::string& title, const ReconstructionResult& r) {
    console << title << "  x0 = (" << r.x0.x() << ", " << r.x0.y() << ")  alpha = (" << r.alpha.x() << ", "
            << r.alpha.y() << ")  mode = " << to_string(r.mode) << '\n';
    console << std::setw(5) << "M" << std::setw(7) << "N" << std::setw(13) << "gamma_hat" << std::setw(11)
            << "err_gamma" << std::setw(13) << "dgamma_hat" << std::setw(12) << "err_dgamma" << "  status\n";
    for (const auto& row : r.rows) {
        console << std::setw(5) << row.M << std::setw(7) << row.N;
        if (row.ok) {
            console << std::fixed << std::setprecision(5) << std::setw(13) << row.gamma_hat << std::setw(11)
                    << row.err_gamma << std::setw(13) << row.dgamma_hat << std::setw(12) << row.err_dgamma
                    << "  ok\n";
            console.unsetf(std::ios::floatfield);
            console << std::setprecision(6);
        } else {
            console << "  failed: " << row.error << '\n';
        }
    }
    if (r.has_truth) {
        console << "truth: gamma(x0) = " << r.true_gamma << ", d_alpha gamma(x0) = " << r.true_dgamma
                << ", |grad gamma(x0)| = " << r.true_grad_norm << '\n';
    }
}

ReconstructionResult reconstruct_with(const ExperimentConfig& config, const std::string& preset,
                                      const std::shared_ptr<const WolffProfile>& profile) {
    const Domain domain = config.make_domain();
    const Conductivity gamma = conductivity_preset(preset, config.p);
    validate_conductivity(gamma, domain, 100, config.seed);
    const DNMeasurement meas(domain, gamma, config.solver(), config.measurement());
    return recover_grad_gamma(meas, domain, config.x0(), config.alpha(), profile, config.M, config.reconstruction(),
                              GroundTruth::of(gamma));
}

ojson reconstruction_to_json(const ReconstructionResult& r) {
    std::ostringstream s;
    write_reconstruction_json(s, r);
    return ojson::parse(s.str());
}

} // namespace

// ---------------------------------------------------------------------------
// Commands

int cmd_wolff(const ExperimentConfig& config, std::ostream& console) {
    return guarded("wolff", config, console, [&](Run& run) {
        const auto t = std::chrono::steady_clock::now();
        const WolffProfile profile = solve_profile(config.p, config.wolff_tol);
        const CutoffSpec cutoff = CutoffSpec::from_id(config.cutoff);
        const double cp = constant_cp(profile, cutoff, 2);
        run.timing("profile_seconds", since(t));
        {
            auto out = run.open("profile.csv");
            write_profile_csv(out, profile, cutoff, cp);
        }
        ojson j;
        j["p"] = config.p;
        j["tol"] = config.wolff_tol;
        j["lambda"] = profile.period();
        j["K"] = profile.K();
        j["c_p"] = cp;
        j["cutoff"] = cutoff.id();
        j["amplitude"] = profile.amplitude();
        j["closure_defect"] = profile.closure_defect();
        j["mean_defect"] = profile.mean_defect();
        j["interpolation_error"] = profile.interpolation_error();
        j["max_abs_a"] = profile.max_abs_a();
        write_json(run, "wolff.json", j);
        console << std::setprecision(10) << "p = " << config.p << "  lambda = " << profile.period()
                << "  K = " << profile.K() << "  c_p = " << cp << '\n';
        return 0;
    });
}

int cmd_forward(const ExperimentConfig& config, std::ostream& console) {
    return guarded("forward", config, console, [&](Run& run) {
        const Domain domain = config.make_domain();
        const Conductivity gamma = conductivity_preset(config.conductivity, config.p);
        validate_conductivity(gamma, domain, 100, config.seed);
        const auto profile = config.data == "oscillating" ? profile_for(config, config.p) : nullptr;
        const BoundaryDatum v = config.datum(profile);

        auto t = std::chrono::steady_clock::now();
        const auto mesh = std::make_shared<const Mesh>(generate_mesh(domain, config.h, v.focus, config.mesh));
        run.timing("mesh_seconds", since(t));
        {
            auto out = run.open("mesh.txt");
            mesh->write(out);
        }
        const P1Space space(mesh, gamma);
        ojson summary;
        summary["p"] = config.p;
        summary["h"] = config.h;
        summary["conductivity"] = config.conductivity;
        summary["data"] = config.data;
        summary["vertices"] = mesh->num_vertices();
        summary["triangles"] = mesh->num_triangles();

        t = std::chrono::steady_clock::now();
        ForwardSolution sol;
        try {
            sol = solve_dirichlet(space, v.value, config.solver(), &domain);
        } catch (const NonConvergence& e) {
            ForwardSolution best;
            best.mesh = mesh;
            best.u = e.best_iterate;
            best.p = config.p;
            best.eps = config.eps_schedule.back();
            for (std::size_t k = 0; k < mesh->num_triangles(); ++k) best.gradients.push_back(space.element_gradient(k, best.u));
            best.report = e.report;
            {
                auto out = run.open("solution.csv");
                write_solution_csv(out, best);
            }
            {
                auto out = run.open("convergence.json");
                write_convergence_json(out, e.report);
            }
            summary["converged"] = false;
            summary["best_residual"] = e.best_residual;
            write_json(run, "forward.json", summary);
            throw;
        }
        run.timing("solve_seconds", since(t));
        {
            auto out = run.open("solution.csv");
            write_solution_csv(out, sol);
        }
        {
            auto out = run.open("convergence.json");
            write_convergence_json(out, sol.report);
        }
        summary["converged"] = sol.report.converged;
        summary["constant_data"] = sol.report.constant_data;
        summary["final_residual"] = sol.report.final_residual;
        summary["eps"] = sol.eps;
        summary["energy"] = assemble_energy(space, config.p, sol.eps, sol.u);
        summary["energy_eps0"] = assemble_energy(space, config.p, 0.0, sol.u);
        if (config.data == "exp" && config.conductivity == "manufactured") {
            summary["relative_l2_error"] = relative_l2_error(sol, [](const Vec2& x) { return std::exp(-x.x()); });
        }
        if (config.p == 2.0) {
            const ForwardSolution lin = linear_solve_p2(space, boundary_vector(*mesh, v.value));
            summary["linear_max_difference"] = (lin.u - sol.u).lpNorm<Eigen::Infinity>();
        }
        write_json(run, "forward.json", summary);
        console << "solved: " << mesh->num_triangles() << " triangles, residual " << sol.report.final_residual;
        if (summary.contains("relative_l2_error")) console << ", relative L2 error " << summary["relative_l2_error"].get<double>();
        console << '\n';
        return 0;
    });
}

int cmd_dnmap_probe(const ExperimentConfig& config, std::ostream& console) {
    return guarded("dnmap-probe", config, console, [&](Run& run) {
        if (config.probe_angles.empty()) throw UsageError("probe_angles is empty");
        const Domain domain = config.make_domain();
        const Conductivity gamma = conductivity_preset(config.conductivity, config.p);
        validate_conductivity(gamma, domain, 100, config.seed);
        const auto profile = config.data == "oscillating" ? profile_for(config, config.p) : nullptr;
        const BoundaryDatum v = config.datum(profile);
        const DNMeasurement meas(domain, gamma, config.solver(), config.measurement());
        ProbeOptions opt = config.probe;
        opt.throw_on_divergence = false;
        const bool has_truth = config.data == "exp" && config.conductivity == "manufactured";

        const std::size_t n = config.probe_angles.size();
        std::vector<std::optional<StrongDnResult>> results(n);
        std::vector<std::string> errors(n);
        const auto t = std::chrono::steady_clock::now();
        parallel_for(n, config.threads, [&](std::size_t i) {
            const Vec2 x = domain.boundary_point_at_angle(config.probe_angles[i]);
            try {
                results[i] = strong_dn_at(meas, v, x, opt);
            } catch (const Error& e) {
                errors[i] = e.what();
            }
        });
        run.timing("probe_seconds", since(t));

        std::vector<StrongDnResult> ok;
        ojson rows = ojson::array();
        bool failed = false;
        for (std::size_t i = 0; i < n; ++i) {
            ojson r;
            r["angle"] = config.probe_angles[i];
            const Vec2 x = domain.boundary_point_at_angle(config.probe_angles[i]);
            r["x0"] = {x.x(), x.y()};
            if (!results[i]) {
                failed = true;
                r["error"] = errors[i];
                rows.push_back(r);
                continue;
            }
            const StrongDnResult& s = *results[i];
            r["index"] = ok.size();
            r["value"] = s.value;
            r["deltas"] = s.deltas;
            r["normalized"] = s.normalized;
            r["observed_rate"] = std::isfinite(s.observed_rate) ? ojson(s.observed_rate) : ojson(nullptr);
            r["extrapolation_residual"] = s.extrapolation_residual;
            r["converged"] = s.converged;
            if (has_truth) {
                const double exact = -domain.outward_normal(x).x();
                r["exact"] = exact;
                r["relative_error"] = std::abs(s.value - exact) / std::max(std::abs(exact), 1e-12);
            }
            failed = failed || !s.converged;
            ok.push_back(s);
            rows.push_back(r);
            console << "angle " << config.probe_angles[i] << ": strong DN " << s.value << (s.converged ? "" : " (not converged)")
                    << '\n';
        }
        {
            auto out = run.open("probes.csv");
            write_probe_csv(out, ok);
        }
        write_json(run, "probe.json", ojson{{"probes", rows}});
        return failed ? 2 : 0;
    });
}

int cmd_reconstruct(const ExperimentConfig& config, std::ostream& console) {
    return guarded("reconstruct", config, console, [&](Run& run) {
        if (config.M.empty()) throw UsageError("M list is empty");
        const auto t = std::chrono::steady_clock::now();
        const ReconstructionResult r = reconstruct_with(config, config.conductivity, profile_for(config, config.p));
        run.timing("reconstruct_seconds", since(t));
        {
            auto out = run.open("reconstruction.json");
            write_reconstruction_json(out, r);
        }
        {
            auto out = run.open("reconstruction.csv");
            write_reconstruction_csv(out, r);
        }
        print_reconstruction(console, "conductivity " + config.conductivity, r);
        return r.successful_rows() > 0 ? 0 : 2;
    });
}

namespace {

void run_study_row(const ExperimentConfig& base, const std::map<double, std::shared_ptr<const WolffProfile>>& profiles,
                   StudyRow& row) {
    ExperimentConfig c = base;
    c.p = row.p;
    c.h = row.h;
    c.eps_schedule = with_floor(base.eps_schedule, row.eps);
    c.M = {row.M};
    c.threads = 1;
    const Domain domain = c.make_domain();
    if (row.kind == "reconstruct") {
        const ReconstructionResult r = reconstruct_with(c, c.conductivity, profiles.at(row.p));
        const ReconstructionRow& rr = r.rows.front();
        if (!rr.ok) throw Error(rr.error);
        row.gamma_hat = rr.gamma_hat;
        row.dgamma_hat = rr.dgamma_hat;
        row.err_gamma = rr.err_gamma;
        row.err_dgamma = rr.err_dgamma;
        row.unconverged_probes = rr.unconverged_probes;
    } else {
        if (c.data == "oscillating") throw UsageError("rellich studies need smooth data");
        const Conductivity gamma = conductivity_preset(c.conductivity, c.p);
        const DNMeasurement meas(domain, gamma, c.solver(), c.measurement());
        GradientFieldOptions f;
        f.probe = c.probe;
        f.probe.throw_on_divergence = false;
        const RellichCheck check = rellich_identity_check(meas, c.datum(), c.alpha(), c.h, f);
        row.rellich_lhs = check.lhs;
        row.rellich_rhs = check.rhs.value;
        row.rellich_residual = check.residual;
        row.unconverged_probes = check.unconverged_probes;
    }
}

} // namespace

int cmd_study(const ExperimentConfig& config, std::ostream& console) {
    return guarded("study", config, console, [&](Run& run) {
        std::vector<StudyRow> rows = study_tuples(config);
        std::map<double, std::shared_ptr<const WolffProfile>> profiles;
        if (config.sweep->kind == "reconstruct") {
            for (const auto& r : rows) {
                if (!profiles.count(r.p)) profiles[r.p] = profile_for(config, r.p);
            }
        }
        const auto t = std::chrono::steady_clock::now();
        parallel_for(rows.size(), config.threads, [&](std::size_t i) {
            const auto start = std::chrono::steady_clock::now();
            try {
                run_study_row(config, profiles, rows[i]);
            } catch (const UsageError&) {
                throw;
            } catch (const std::exception& e) {
                rows[i].ok = false;
                rows[i].error = e.what();
            }
            rows[i].seconds = since(start);
        });
        run.timing("study_seconds", since(t));

        {
            auto out = run.open("study.csv");
            write_study_csv(out, rows);
        }
        std::size_t failures = 0;
        ojson jr = ojson::array();
        for (const auto& r : rows) {
            failures += r.ok ? 0 : 1;
            ojson o;
            o["kind"] = r.kind;
            o["p"] = r.p;
            o["M"] = r.M;
            o["h"] = r.h;
            o["eps"] = r.eps;
            o["ok"] = r.ok;
            if (!r.ok) o["error"] = r.error;
            if (r.kind == "reconstruct") {
                o["gamma_hat"] = r.gamma_hat;
                o["dgamma_hat"] = r.dgamma_hat;
                o["err_gamma"] = r.err_gamma;
                o["err_dgamma"] = r.err_dgamma;
            } else {
                o["rellich_lhs"] = r.rellich_lhs;
                o["rellich_rhs"] = r.rellich_rhs;
                o["rellich_residual"] = r.rellich_residual;
            }
            o["unconverged_probes"] = r.unconverged_probes;
            o["seconds"] = r.seconds;
            jr.push_back(o);
        }
        // residual ratios under h halving, other parameters fixed
        ojson ratios = ojson::array();
        for (const auto& a : rows) {
            for (const auto& b : rows) {
                if (a.kind != "rellich" || !a.ok || !b.ok || a.p != b.p || a.eps != b.eps || a.M != b.M) continue;
                if (std::abs(b.h - 0.5 * a.h) > 1e-12 * a.h) continue;
                ratios.push_back({{"h", a.h}, {"h_half", b.h}, {"ratio", a.rellich_residual / b.rellich_residual}});
            }
        }
        ojson summary = {{"rows", rows.size()}, {"failures", failures}};
        if (!ratios.empty()) summary["residual_ratios"] = ratios;
        write_json(run, "study.json", ojson{{"summary", summary}, {"rows", jr}});
        console << "study: " << rows.size() << " rows, " << failures << " failed\n";
        return failures < rows.size() ? 0 : 2;
    });
}

int cmd_ab(const ExperimentConfig& config, std::ostream& console) {
    return guarded("ab", config, console, [&](Run& run) {
        if (config.M.empty()) throw UsageError("M list is empty");
        const auto profile = profile_for(config, config.p);
        const std::array<std::string, 2> names{config.conductivity, config.conductivity_b};
        std::array<ReconstructionResult, 2> res;
        const auto t = std::chrono::steady_clock::now();
        for (int k = 0; k < 2; ++k) res[k] = reconstruct_with(config, names[k], profile);
        run.timing("ab_seconds", since(t));

        const auto error_bar = [](const ReconstructionResult& r) -> std::optional<double> {
            std::vector<double> ok;
            for (const auto& row : r.rows) {
                if (row.ok) ok.push_back(row.dgamma_hat);
            }
            if (ok.size() < 2) return std::nullopt;
            return std::abs(ok[ok.size() - 1] - ok[ok.size() - 2]);
        };
        ojson models = ojson::array();
        double bars = 0.0;
        bool all_bars = true;
        for (int k = 0; k < 2; ++k) {
            const auto bar = error_bar(res[k]);
            if (bar) {
                bars += *bar;
            } else {
                all_bars = false;
            }
            models.push_back({{"conductivity", names[k]},
                              {"final_gamma", res[k].final_gamma},
                              {"final_dgamma", res[k].final_dgamma},
                              {"error_bar", bar ? ojson(*bar) : ojson(nullptr)},
                              {"result", reconstruction_to_json(res[k])}});
            print_reconstruction(console, "model " + std::to_string(k + 1) + ": " + names[k], res[k]);
        }
        const Conductivity g1 = conductivity_preset(names[0], config.p), g2 = conductivity_preset(names[1], config.p);
        const Vec2 x0 = config.x0();
        const double separation = std::abs(res[0].final_dgamma - res[1].final_dgamma);
        const double gscale = 0.5 * (std::abs(res[0].final_gamma) + std::abs(res[1].final_gamma));
        const double gamma_rel = gscale > 0.0 ? std::abs(res[0].final_gamma - res[1].final_gamma) / gscale : 0.0;
        ojson report;
        report["x0"] = {x0.x(), x0.y()};
        report["alpha"] = {config.alpha().x(), config.alpha().y()};
        report["models"] = models;
        report["precondition"] = {{"equal_gamma_at_x0", std::abs(g1(x0) - g2(x0)) <= 1e-12},
                                  {"different_gradient_at_x0", (g1.grad(x0) - g2.grad(x0)).norm() > 1e-12}};
        report["separation_dgamma"] = separation;
        report["gamma_relative_difference"] = gamma_rel;
        report["combined_error_bar"] = all_bars ? ojson(bars) : ojson(nullptr);
        report["distinguished"] = separation > bars;
        write_json(run, "ab.json", report);
        console << "separation of d_alpha gamma estimates: " << separation << "  (combined error bar "
                << (all_bars ? std::to_string(bars) : std::string("n/a")) << "), gamma estimates differ by "
                << 100.0 * gamma_rel << "%\n";
        return res[0].successful_rows() > 0 && res[1].successful_rows() > 0 ? 0 : 2;
    });
}

} // namespace pbd
