#include "pbd/rellich.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "pbd/errors.hpp"
#include "pbd/parallel.hpp"

namespace pbd {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

struct CurvePoint {
    Vec2 x;
    Vec2 dx; // derivative in the angle parameter
};

// X(t) = c + r(t) e(t) with rho(X) = 0, so r' = -r (grad rho . e') / (grad rho . e).
CurvePoint curve_at(const Domain& domain, double t) {
    const Vec2 e(std::cos(t), std::sin(t));
    const Vec2 de(-std::sin(t), std::cos(t));
    CurvePoint cp;
    cp.x = domain.boundary_point_at_angle(t);
    const double r = (cp.x - domain.center).norm();
    const Vec2 g = domain.grad_rho(cp.x);
    const double ge = g.dot(e);
    if (std::abs(ge) < 1e-14 * g.norm()) throw DegenerateNormal("boundary is tangent to a ray from the domain center");
    const double dr = -r * g.dot(de) / ge;
    cp.dx = dr * e + r * de;
    return cp;
}

double angle_of(const Domain& domain, const Vec2& x) {
    const Vec2 d = x - domain.center;
    return std::atan2(d.y(), d.x());
}

double estimate_length(const Domain& domain, double a, double b) {
    const int n = 256;
    double len = 0.0;
    Vec2 prev = domain.boundary_point_at_angle(a);
    for (int k = 1; k <= n; ++k) {
        const Vec2 cur = domain.boundary_point_at_angle(a + (b - a) * k / n);
        len += (cur - prev).norm();
        prev = cur;
    }
    return len;
}

CurveQuadrature panels_on(const Domain& domain, double a, double b, double panel, int order) {
    if (!(panel > 0.0)) throw UsageError("quadrature panel size must be positive");
    if (order < 1) throw UsageError("quadrature order must be at least 1");
    const double length = estimate_length(domain, a, b);
    const int n = std::max(1, static_cast<int>(std::ceil(length / panel)));
    std::vector<double> nodes, weights;
    gauss_legendre(order, nodes, weights);
    CurveQuadrature q;
    q.points.reserve(static_cast<std::size_t>(n) * order);
    const double dt = (b - a) / n;
    for (int k = 0; k < n; ++k) {
        const double mid = a + (k + 0.5) * dt;
        for (int j = 0; j < order; ++j) {
            const CurvePoint cp = curve_at(domain, mid + 0.5 * dt * nodes[j]);
            q.points.push_back(cp.x);
            q.normals.push_back(domain.outward_normal(cp.x));
            q.weights.push_back(0.5 * dt * weights[j] * cp.dx.norm());
        }
    }
    return q;
}

// Largest s in (0, pi] with |X(t0 + dir s) - x0| <= radius on [0, s].
double arc_extent(const Domain& domain, const Vec2& x0, double t0, double dir, double radius) {
    const int steps = 2048;
    double inside = 0.0;
    for (int k = 1; k <= steps; ++k) {
        const double s = M_PI * k / steps;
        if ((domain.boundary_point_at_angle(t0 + dir * s) - x0).norm() > radius) {
            double lo = inside, hi = s;
            for (int it = 0; it < 100 && hi - lo > 1e-15; ++it) {
                const double mid = 0.5 * (lo + hi);
                ((domain.boundary_point_at_angle(t0 + dir * mid) - x0).norm() > radius ? hi : lo) = mid;
            }
            return 0.5 * (lo + hi);
        }
        inside = s;
    }
    return M_PI;
}

bool same_points(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if ((a[i] - b[i]).norm() > 1e-12 * std::max(1.0, a[i].norm())) return false;
    }
    return true;
}

} // namespace

CurveQuadrature curve_quadrature(const Domain& domain, double panel, int order) {
    return panels_on(domain, 0.0, kTwoPi, panel, order);
}

CurveQuadrature arc_quadrature(const Domain& domain, const Vec2& x0, double radius, double panel, int order) {
    if (!(radius > 0.0)) throw UsageError("arc radius must be positive");
    if (std::abs(domain.rho(x0)) > 1e-8) throw NotOnBoundary("arc centre is not on the boundary");
    const double t0 = angle_of(domain, x0);
    const double up = arc_extent(domain, x0, t0, 1.0, radius);
    const double down = arc_extent(domain, x0, t0, -1.0, radius);
    if (up + down >= kTwoPi - 1e-12) return panels_on(domain, t0 - M_PI, t0 + M_PI, panel, order);
    return panels_on(domain, t0 - down, t0 + up, panel, order);
}

RellichTerms rellich_rhs_terms(const SampledScalar& gamma_on_boundary, const SampledScalar& strong_dn,
                               const SampledVector& boundary_grad_u, const Vec2& alpha, const CurveQuadrature& quad,
                               double p, double critical_tol) {
    if (!same_points(gamma_on_boundary.points, quad.points) || !same_points(strong_dn.points, quad.points) ||
        !same_points(boundary_grad_u.points, quad.points) || gamma_on_boundary.values.size() != quad.size() ||
        strong_dn.values.size() != quad.size() || boundary_grad_u.values.size() != quad.size()) {
        throw SamplingMismatch("boundary fields are not sampled at the quadrature points");
    }
    if (std::abs(alpha.norm() - 1.0) > 1e-12) throw UsageError("direction alpha must be a unit vector");
    RellichTerms terms;
    for (std::size_t k = 0; k < quad.size(); ++k) {
        const Vec2& g = boundary_grad_u.values[k];
        terms.flux_term += quad.weights[k] * gamma_on_boundary.values[k] * alpha.dot(quad.normals[k]) * std::pow(g.norm(), p);
        const double s = strong_dn.values[k];
        if (std::abs(s) <= critical_tol) {
            ++terms.critical_points;
            continue;
        }
        terms.transport_term += quad.weights[k] * alpha.dot(g) * s;
    }
    terms.value = terms.flux_term - p * terms.transport_term;
    return terms;
}

double rellich_rhs(const SampledScalar& gamma_on_boundary, const SampledScalar& strong_dn,
                   const SampledVector& boundary_grad_u, const Vec2& alpha, const CurveQuadrature& quad, double p,
                   double critical_tol) {
    return rellich_rhs_terms(gamma_on_boundary, strong_dn, boundary_grad_u, alpha, quad, p, critical_tol).value;
}

double rellich_lhs_direct(const Mesh& mesh, const ForwardSolution& solution,
                          const std::function<Vec2(const Vec2&)>& grad_gamma, const Vec2& alpha) {
    double sum = 0.0;
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        sum += mesh.area(t) * alpha.dot(grad_gamma(mesh.centroid(t))) * std::pow(solution.gradients[t].norm(), solution.p);
    }
    return sum;
}

double energy_scaling(double value, double M, double N, int d, double p) {
    if (!(M >= 1.0) || !(N >= 1.0)) throw UsageError("energy_scaling needs M, N >= 1");
    return std::pow(M, d - 1) * std::pow(N, 1.0 - p) * value;
}

BoundaryGradientField boundary_gradient_field(const DNMeasurement& meas, const BoundaryDatum& v,
                                              const std::function<double(const Vec2&)>& gamma_boundary,
                                              const std::vector<Vec2>& sample_points,
                                              const GradientFieldOptions& options) {
    const Domain& domain = meas.domain();
    const double p = meas.p();
    const std::size_t n = sample_points.size();
    BoundaryGradientField f;
    f.strong.points = sample_points;
    f.strong.values.assign(n, 0.0);
    f.gradient.points = sample_points;
    f.gradient.values.assign(n, Vec2::Zero());
    f.tangential.assign(n, 0.0);
    f.normal.assign(n, 0.0);
    f.critical.assign(n, false);
    std::vector<double> extrap(n, 0.0), root(n, 0.0);
    std::vector<char> unconverged(n, 0);

    parallel_for(n, options.threads, [&](std::size_t k) {
        const Vec2& x = sample_points[k];
        const Vec2 nu = domain.outward_normal(x);
        const Vec2 t(-nu.y(), nu.x());
        const double dt = boundary_derivative(domain, v.value, x, t, options.tangent_step);
        const StrongDnResult r = strong_dn_at(meas, v, x, options.probe);
        const double gamma = gamma_boundary(x);
        const bool critical = detect_critical(r.value, options.critical_tol);
        const double dn = critical ? 0.0 : recover_normal_derivative(r.value, gamma, dt * t, p);
        f.strong.values[k] = r.value;
        f.tangential[k] = dt;
        f.normal[k] = dn;
        f.gradient.values[k] = dt * t + dn * nu;
        f.critical[k] = critical;
        extrap[k] = r.extrapolation_residual;
        unconverged[k] = r.converged ? 0 : 1;
        if (!critical) {
            const double g2 = dt * dt + dn * dn;
            const double back = gamma * std::pow(g2, 0.5 * p - 1.0) * dn;
            root[k] = std::abs(back - r.value) / std::abs(r.value);
        }
    });
    for (std::size_t k = 0; k < n; ++k) {
        if (std::isfinite(extrap[k])) f.max_extrapolation_residual = std::max(f.max_extrapolation_residual, extrap[k]);
        f.max_root_residual = std::max(f.max_root_residual, root[k]);
        f.unconverged_probes += static_cast<std::size_t>(unconverged[k]);
    }
    return f;
}

RellichCheck rellich_identity_check(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& alpha,
                                    double panel, const GradientFieldOptions& options) {
    const Conductivity& gamma = meas.oracle_conductivity();
    const CurveQuadrature q = curve_quadrature(meas.domain(), panel, 3);
    const auto g = [&gamma](const Vec2& x) { return gamma(x); };
    const BoundaryGradientField f = boundary_gradient_field(meas, v, g, q.points, options);
    SampledScalar gs{q.points, {}};
    gs.values.reserve(q.size());
    for (const Vec2& x : q.points) gs.values.push_back(gamma(x));
    const auto sol = meas.oracle_solution(v);
    RellichCheck c;
    c.rhs = rellich_rhs_terms(gs, f.strong, f.gradient, alpha, q, meas.p(), options.critical_tol);
    c.lhs = rellich_lhs_direct(*sol->mesh, *sol, gamma.grad, alpha);
    c.residual = std::abs(c.lhs - c.rhs.value) / std::max(std::abs(c.lhs), 0.1);
    c.quadrature_points = q.size();
    c.unconverged_probes = f.unconverged_probes;
    c.max_extrapolation_residual = f.max_extrapolation_residual;
    return c;
}

namespace {

BoundaryDatum oscillating_at(const Domain& domain, const Vec2& x0, double M,
                             const std::shared_ptr<const WolffProfile>& profile, const OscillationOptions& osc,
                             OscillatingDatum* out = nullptr) {
    const OscillatingDatum d = OscillatingDatum::make(boundary_frame(domain, x0), M, profile, osc.cutoff);
    if (out) *out = d;
    return oscillating_boundary_datum(d, domain, osc.points_per_period);
}

double self_pairing(const DNMeasurement& meas, const BoundaryDatum& bd, const Vec2& x0, double M) {
    // v_M vanishes outside the ball of radius 1/M, so does its P1 interpolant on triangles beyond it
    return meas.weak_pairing(bd, TestFunction::in_ball(bd.value, x0, 1.0 / M));
}

} // namespace

std::vector<GammaEstimate> recover_gamma_at(const DNMeasurement& meas, const Domain& domain, const Vec2& x0,
                                            std::shared_ptr<const WolffProfile> profile,
                                            const std::vector<double>& M_list, const OscillationOptions& osc) {
    if (!profile) throw UsageError("recover_gamma_at needs a Wolff profile");
    if (std::abs(profile->p() - meas.p()) > 1e-12) throw UsageError("Wolff profile exponent differs from the measurement's p");
    for (std::size_t i = 1; i < M_list.size(); ++i) {
        if (!(M_list[i] > M_list[i - 1])) throw UsageError("M list must be increasing");
    }
    const double cp = constant_cp(*profile, osc.cutoff, 2);
    std::vector<GammaEstimate> out;
    for (double M : M_list) {
        OscillatingDatum d;
        const BoundaryDatum bd = oscillating_at(domain, x0, M, profile, osc, &d);
        GammaEstimate e;
        e.M = M;
        e.N = d.N;
        e.cp = cp;
        e.energy = self_pairing(meas, bd, x0, M);
        e.gamma_hat = energy_scaling(e.energy, M, d.N, 2, meas.p()) / cp;
        out.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Periodic cubic spline

PeriodicBoundarySpline::PeriodicBoundarySpline(Vec2 center, std::vector<double> values)
    : center_(std::move(center)), values_(std::move(values)) {
    const int n = static_cast<int>(values_.size());
    if (n < 3) throw UsageError("periodic spline needs at least three nodes");
    const double h = kTwoPi / n;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd b(n);
    for (int k = 0; k < n; ++k) {
        A(k, (k + n - 1) % n) += 1.0;
        A(k, k) += 4.0;
        A(k, (k + 1) % n) += 1.0;
        b(k) = 6.0 / (h * h) * (values_[(k + 1) % n] - 2.0 * values_[k] + values_[(k + n - 1) % n]);
    }
    const Eigen::VectorXd m = A.partialPivLu().solve(b);
    second_.assign(m.data(), m.data() + n);
}

double PeriodicBoundarySpline::at_angle(double angle) const {
    const int n = static_cast<int>(values_.size());
    const double h = kTwoPi / n;
    double t = std::fmod(angle, kTwoPi);
    if (t < 0.0) t += kTwoPi;
    int k = static_cast<int>(std::floor(t / h));
    if (k >= n) k = n - 1;
    const int k1 = (k + 1) % n;
    const double s = t / h - k; // in [0, 1]
    const double a = 1.0 - s;
    return a * values_[k] + s * values_[k1] +
           h * h / 6.0 * ((a * a * a - a) * second_[k] + (s * s * s - s) * second_[k1]);
}

double PeriodicBoundarySpline::operator()(const Vec2& x) const {
    const Vec2 d = x - center_;
    return at_angle(std::atan2(d.y(), d.x()));
}

std::string to_string(GammaBoundaryMode mode) { return mode == GammaBoundaryMode::oracle ? "oracle" : "recovered"; }

GammaBoundaryMode gamma_mode_from_string(const std::string& s) {
    if (s == "oracle") return GammaBoundaryMode::oracle;
    if (s == "recovered") return GammaBoundaryMode::recovered;
    throw UsageError("unknown gamma boundary mode '" + s + "'");
}

GroundTruth GroundTruth::of(const Conductivity& c) {
    GroundTruth t;
    t.gamma = [c](const Vec2& x) { return c(x); };
    t.grad = [c](const Vec2& x) { return c.grad(x); };
    return t;
}

std::size_t ReconstructionResult::successful_rows() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.ok; }));
}

const ReconstructionRow* ReconstructionResult::last_ok() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (it->ok) return &*it;
    }
    return nullptr;
}

ReconstructionResult recover_grad_gamma(const DNMeasurement& meas, const Domain& domain, const Vec2& x0,
                                        const Vec2& alpha, std::shared_ptr<const WolffProfile> profile,
                                        const std::vector<double>& M_list, const ReconstructionOptions& options,
                                        const std::optional<GroundTruth>& truth) {
    if (!profile) throw UsageError("reconstruction needs a Wolff profile");
    if (std::abs(profile->p() - meas.p()) > 1e-12) throw UsageError("Wolff profile exponent differs from the measurement's p");
    if (std::abs(alpha.norm() - 1.0) > 1e-12) throw UsageError("direction alpha must be a unit vector");
    if (std::abs(domain.rho(x0)) > 1e-8) throw NotOnBoundary("x0 is not on the boundary");
    if (M_list.empty()) throw UsageError("M list is empty");
    for (std::size_t i = 1; i < M_list.size(); ++i) {
        if (!(M_list[i] > M_list[i - 1])) throw UsageError("M list must be increasing");
    }
    if (options.mode == GammaBoundaryMode::oracle && (!truth || !truth->gamma)) {
        throw UsageError("oracle gamma boundary mode needs the true conductivity");
    }

    const double p = meas.p();
    ReconstructionResult result;
    result.x0 = x0;
    result.alpha = alpha;
    result.p = p;
    result.mode = options.mode;
    if (truth) {
        result.has_truth = true;
        result.true_gamma = truth->gamma(x0);
        const Vec2 g = truth->grad ? truth->grad(x0) : Vec2::Zero();
        result.true_dgamma = alpha.dot(g);
        result.true_grad_norm = g.norm();
    }

    std::function<double(const Vec2&)> gamma_boundary;
    if (options.mode == GammaBoundaryMode::oracle) {
        gamma_boundary = truth->gamma;
    } else {
        const int n = options.gamma_grid;
        if (n < 3) throw UsageError("gamma boundary grid needs at least three points");
        std::vector<double> nodes(static_cast<std::size_t>(n));
        parallel_for(nodes.size(), options.threads, [&](std::size_t k) {
            const Vec2 xk = domain.boundary_point_at_angle(kTwoPi * static_cast<double>(k) / n);
            nodes[k] = recover_gamma_at(meas, domain, xk, profile, {options.gamma_grid_M}, options.oscillation)
                           .front()
                           .gamma_hat;
        });
        result.gamma_grid = nodes;
        auto spline = std::make_shared<const PeriodicBoundarySpline>(domain.center, std::move(nodes));
        gamma_boundary = [spline](const Vec2& x) { return (*spline)(x); };
    }

    const double cp = constant_cp(*profile, options.oscillation.cutoff, 2);
    result.rows.resize(M_list.size());
    const int row_threads = std::max(1, std::min<int>(options.threads, static_cast<int>(M_list.size())));
    GradientFieldOptions field = options.field;
    field.threads = std::max(field.threads, options.threads / row_threads);

    parallel_for(M_list.size(), row_threads, [&](std::size_t i) {
        const auto start = std::chrono::steady_clock::now();
        ReconstructionRow& row = result.rows[i];
        row.M = M_list[i];
        row.cp = cp;
        try {
            OscillatingDatum d;
            const BoundaryDatum bd = oscillating_at(domain, x0, row.M, profile, options.oscillation, &d);
            row.N = d.N;
            row.energy = self_pairing(meas, bd, x0, row.M);
            row.gamma_hat = energy_scaling(row.energy, row.M, row.N, 2, p) / cp;
            row.mesh_triangles = meas.oracle_space(bd)->mesh().num_triangles();

            const double wavelength = profile->period() / row.N;
            const CurveQuadrature quad =
                arc_quadrature(domain, x0, options.arc_factor / row.M, wavelength / options.panels_per_wavelength,
                               options.quadrature_order);
            GradientFieldOptions f = field;
            f.probe.abs_floor = std::max(f.probe.abs_floor, options.probe_floor * std::pow(row.N, p - 1.0));
            const BoundaryGradientField g = boundary_gradient_field(meas, bd, gamma_boundary, quad.points, f);
            SampledScalar gam{quad.points, {}};
            gam.values.reserve(quad.size());
            for (const Vec2& x : quad.points) gam.values.push_back(gamma_boundary(x));
            row.rhs = rellich_rhs_terms(gam, g.strong, g.gradient, alpha, quad, p, f.critical_tol);
            row.dgamma_hat = energy_scaling(row.rhs.value, row.M, row.N, 2, p) / cp;
            row.quadrature_points = quad.size();
            row.max_extrapolation_residual = g.max_extrapolation_residual;
            row.max_root_residual = g.max_root_residual;
            row.unconverged_probes = g.unconverged_probes;
        } catch (const Error& e) {
            row.ok = false;
            row.error = e.what();
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    });

    if (result.has_truth) {
        const double gscale = std::abs(result.true_gamma);
        const double dscale = result.true_grad_norm > 0.0 ? result.true_grad_norm : gscale;
        for (auto& row : result.rows) {
            if (!row.ok) continue;
            row.err_gamma = std::abs(row.gamma_hat - result.true_gamma) / gscale;
            row.err_dgamma = std::abs(row.dgamma_hat - result.true_dgamma) / dscale;
        }
    }
    if (const ReconstructionRow* last = result.last_ok()) {
        result.final_gamma = last->gamma_hat;
        result.final_dgamma = last->dgamma_hat;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Export

void write_reconstruction_json(std::ostream& out, const ReconstructionResult& r) {
    using json = nlohmann::ordered_json;
    json j;
    j["x0"] = {r.x0.x(), r.x0.y()};
    j["alpha"] = {r.alpha.x(), r.alpha.y()};
    j["p"] = r.p;
    j["gamma_boundary_mode"] = to_string(r.mode);
    if (!r.gamma_grid.empty()) j["gamma_grid"] = r.gamma_grid;
    json rows = json::array();
    for (const auto& row : r.rows) {
        json jr;
        jr["M"] = row.M;
        jr["N"] = row.N;
        jr["c_p"] = row.cp;
        jr["ok"] = row.ok;
        if (!row.ok) jr["error"] = row.error;
        jr["energy"] = row.energy;
        jr["gamma_hat"] = row.gamma_hat;
        jr["rhs"] = {{"flux_term", row.rhs.flux_term},
                     {"transport_term", row.rhs.transport_term},
                     {"value", row.rhs.value},
                     {"critical_points", row.rhs.critical_points}};
        jr["dgamma_hat"] = row.dgamma_hat;
        jr["diagnostics"] = {{"quadrature_points", row.quadrature_points},
                             {"max_extrapolation_residual", row.max_extrapolation_residual},
                             {"max_root_residual", row.max_root_residual},
                             {"unconverged_probes", row.unconverged_probes},
                             {"mesh_triangles", row.mesh_triangles},
                             {"seconds", row.seconds}};
        if (r.has_truth && row.ok) {
            jr["err_gamma"] = row.err_gamma;
            jr["err_dgamma"] = row.err_dgamma;
        }
        rows.push_back(std::move(jr));
    }
    j["rows"] = std::move(rows);
    j["final"] = {{"gamma_hat", r.final_gamma}, {"dgamma_hat", r.final_dgamma}};
    if (r.has_truth) {
        j["truth"] = {{"gamma", r.true_gamma}, {"dgamma", r.true_dgamma}, {"grad_norm", r.true_grad_norm}};
    }
    out << j.dump(2) << '\n';
}

void write_reconstruction_csv(std::ostream& out, const ReconstructionResult& r) {
    const auto prec = out.precision(17);
    out << "M,N,gamma_hat,dgamma_hat,err_gamma,err_dgamma\n";
    for (const auto& row : r.rows) {
        out << row.M << ',' << row.N << ',';
        if (row.ok) {
            out << row.gamma_hat << ',' << row.dgamma_hat << ',';
        } else {
            out << ",,";
        }
        if (r.has_truth && row.ok) {
            out << row.err_gamma << ',' << row.err_dgamma;
        } else {
            out << ',';
        }
        out << '\n';
    }
    out.precision(prec);
}

} // namespace pbd
