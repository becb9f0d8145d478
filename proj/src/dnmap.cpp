#include "pbd/dnmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>

namespace pbd {

BoundaryDatum BoundaryDatum::smooth(std::string key, BoundaryData v) {
    BoundaryDatum d;
    d.key = std::move(key);
    d.value = std::move(v);
    return d;
}

BoundaryDatum BoundaryDatum::scaled(double t) const {
    BoundaryDatum d = *this;
    char buf[64];
    std::snprintf(buf, sizeof buf, "|scale=%.17g", t);
    d.key += buf;
    d.value = [v = value, t](const Vec2& x) { return t * v(x); };
    return d;
}

BoundaryDatum oscillating_boundary_datum(const OscillatingDatum& datum, const Domain& domain,
                                         double points_per_period) {
    if (!(points_per_period > 0.0)) throw UsageError("points per period must be positive");
    BoundaryDatum d;
    char buf[64];
    std::snprintf(buf, sizeof buf, "|pp=%.17g", points_per_period);
    d.key = datum.key() + buf;
    d.value = [datum, domain](const Vec2& x) { return eval_vM(datum, domain, x); };
    d.focus = MeshFocus{datum.frame.base, datum.profile->period() / (points_per_period * datum.N), 2.0 / datum.M};
    return d;
}

TestFunction TestFunction::everywhere(std::function<double(const Vec2&)> g) {
    TestFunction t;
    t.g = std::move(g);
    return t;
}

TestFunction TestFunction::in_ball(std::function<double(const Vec2&)> g, const Vec2& center, double radius) {
    TestFunction t;
    t.g = std::move(g);
    t.center = center;
    t.radius = radius;
    return t;
}

// ---------------------------------------------------------------------------
// DNMeasurement

DNMeasurement::DNMeasurement(Domain domain, Conductivity gamma, SolverConfig config, MeasurementOptions options)
    : domain_(std::move(domain)), gamma_(std::move(gamma)), config_(std::move(config)), options_(options) {
    config_.validate();
    if (!(options_.h > 0.0)) throw UsageError("measurement mesh size must be positive");
}

namespace {

std::string mesh_key(const BoundaryDatum& v, double h) {
    char buf[160];
    if (v.focus) {
        std::snprintf(buf, sizeof buf, "h=%.17g|focus=%.17g,%.17g|lh=%.17g|r=%.17g", h, v.focus->point.x(),
                      v.focus->point.y(), std::min(h, v.focus->local_h), v.focus->radius);
    } else {
        std::snprintf(buf, sizeof buf, "h=%.17g|uniform", h);
    }
    return buf;
}

// Single computation per key; concurrent callers wait on the same future.
template <class T, class F>
std::shared_ptr<const T> cached(std::mutex& mutex, std::map<std::string, std::shared_future<std::shared_ptr<const T>>>& map,
                                const std::string& key, F&& compute) {
    std::promise<std::shared_ptr<const T>> promise;
    std::shared_future<std::shared_ptr<const T>> future;
    bool owner = false;
    {
        std::lock_guard lock(mutex);
        auto it = map.find(key);
        if (it == map.end()) {
            future = promise.get_future().share();
            map.emplace(key, future);
            owner = true;
        } else {
            future = it->second;
        }
    }
    if (owner) {
        try {
            promise.set_value(compute());
        } catch (...) {
            promise.set_exception(std::current_exception());
        }
    }
    return future.get();
}

std::vector<int> elements_for(const Mesh& mesh, const TestFunction& g) {
    std::vector<int> tris;
    if (g.center) {
        tris = mesh.triangles_touching_ball(*g.center, g.radius);
        std::sort(tris.begin(), tris.end());
    } else {
        tris.resize(mesh.num_triangles());
        for (std::size_t t = 0; t < tris.size(); ++t) tris[t] = static_cast<int>(t);
    }
    return tris;
}

} // namespace

std::shared_ptr<const P1Space> DNMeasurement::space_for(const BoundaryDatum& v) const {
    const std::string key = mesh_key(v, options_.h);
    return cached<P1Space>(mutex_, spaces_, key, [&] {
        std::optional<MeshFocus> focus = v.focus;
        if (focus) focus->local_h = std::min(focus->local_h, options_.h);
        auto mesh = std::make_shared<const Mesh>(generate_mesh(domain_, options_.h, focus, options_.mesh));
        return std::make_shared<const P1Space>(mesh, gamma_);
    });
}

std::shared_ptr<const ForwardSolution> DNMeasurement::solution_for(const BoundaryDatum& v) const {
    if (!v.value) throw UsageError("boundary datum has no values");
    const auto space = space_for(v);
    const std::string key = v.key + "#" + mesh_key(v, options_.h);
    return cached<ForwardSolution>(mutex_, solutions_, key, [&] {
        ++solves_;
        return std::make_shared<const ForwardSolution>(solve_dirichlet(*space, v.value, config_, &domain_));
    });
}

std::shared_ptr<const ForwardSolution> DNMeasurement::oracle_solution(const BoundaryDatum& v) const {
    return solution_for(v);
}

std::shared_ptr<const P1Space> DNMeasurement::oracle_space(const BoundaryDatum& v) const { return space_for(v); }

void DNMeasurement::clear_cache() {
    std::lock_guard lock(mutex_);
    spaces_.clear();
    solutions_.clear();
}

double DNMeasurement::weak_pairing(const BoundaryDatum& v, const TestFunction& g) const {
    const auto sol = solution_for(v);
    const auto space = space_for(v);
    const Mesh& mesh = space->mesh();
    const double p = config_.p;
    const double eps = sol->eps;
    double sum = 0.0;
    for (int t : elements_for(mesh, g)) {
        const auto& tri = mesh.triangle(t);
        const auto& dphi = space->basis_gradients(t);
        const Vec2 gg = g.g(mesh.vertex(tri[0])) * dphi[0] + g.g(mesh.vertex(tri[1])) * dphi[1] +
                        g.g(mesh.vertex(tri[2])) * dphi[2];
        const Vec2& gu = sol->gradients[t];
        const double s = gu.squaredNorm() + eps;
        sum += space->area(t) * space->gamma_at_centroid(t) * std::pow(s, 0.5 * p - 1.0) * gu.dot(gg);
    }
    return sum;
}

double DNMeasurement::trace_integral(const BoundaryDatum& v, const TestFunction& g) const {
    const Mesh& mesh = space_for(v)->mesh();
    double sum = 0.0;
    for (const auto& e : mesh.boundary_edges()) {
        const Vec2& a = mesh.vertex(e.vertices[0]);
        const Vec2& b = mesh.vertex(e.vertices[1]);
        if (g.center && (a - *g.center).norm() > g.radius && (b - *g.center).norm() > g.radius) continue;
        sum += 0.5 * e.length * (g.g(a) + g.g(b));
    }
    return sum;
}

double DNMeasurement::local_resolution(const BoundaryDatum& v, const Vec2& x, double radius) const {
    return space_for(v)->mesh().local_boundary_size(x, radius);
}

// ---------------------------------------------------------------------------
// Probes

TestFunction MollifierProbe::test_function() const {
    const MollifierProbe self = *this;
    return TestFunction::in_ball([self](const Vec2& x) { return self(x); }, x0, delta);
}

MollifierProbe make_probe(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0, double delta) {
    if (!(delta > 0.0)) throw UsageError("probe radius must be positive");
    MollifierProbe probe;
    probe.x0 = x0;
    probe.delta = delta;
    probe.integral = meas.trace_integral(v, probe.test_function());
    if (!(probe.integral > 0.0)) throw ProbeUnresolved("probe does not meet the boundary mesh");
    return probe;
}

std::vector<double> probe_schedule(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                                   const ProbeOptions& options) {
    if (options.levels < 2) throw UsageError("probe schedule needs at least two levels");
    std::vector<double> all;
    for (double delta = options.delta0; delta > 0.0 && all.size() < 64; delta *= 0.5) {
        if (delta < options.floor_factor * meas.local_resolution(v, x0, delta)) break;
        all.push_back(delta);
    }
    if (all.size() < 2) {
        std::ostringstream msg;
        msg << "fewer than two probe radii from delta0 = " << options.delta0 << " are resolved at ("
            << x0.x() << ", " << x0.y() << ")";
        throw ProbeUnresolved(msg.str());
    }
    const std::size_t keep = std::min<std::size_t>(all.size(), static_cast<std::size_t>(options.levels));
    return {all.end() - static_cast<std::ptrdiff_t>(keep), all.end()};
}

StrongDnResult strong_dn_at(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                            const std::vector<double>& deltas, const ProbeOptions& options) {
    if (deltas.size() < 2) throw UsageError("strong DN extrapolation needs at least two radii");
    for (std::size_t k = 1; k < deltas.size(); ++k) {
        if (!(deltas[k] < deltas[k - 1])) throw UsageError("probe radii must be decreasing");
    }
    StrongDnResult res;
    res.x0 = x0;
    res.deltas = deltas;
    for (double delta : deltas) {
        const double local = meas.local_resolution(v, x0, delta);
        if (delta < options.floor_factor * local) {
            std::ostringstream msg;
            msg << "delta = " << delta << " is below " << options.floor_factor << " x local mesh size " << local;
            throw ProbeUnresolved(msg.str());
        }
        const MollifierProbe probe = make_probe(meas, v, x0, delta);
        const double raw = meas.weak_pairing(v, probe.test_function());
        res.raw.push_back(raw);
        res.normalized.push_back(raw * probe.normalization());
    }
    const std::size_t n = deltas.size();
    const double a = res.normalized[n - 1];
    const double b = res.normalized[n - 2];
    const double ratio = deltas[n - 2] / deltas[n - 1];
    res.value = a + (a - b) / (std::pow(ratio, options.richardson_order) - 1.0);
    res.extrapolation_residual = std::abs(res.value - a);
    res.observed_rate = std::numeric_limits<double>::quiet_NaN();
    if (n >= 3) {
        const double c = res.normalized[n - 3];
        const double num = std::abs(c - b);
        const double den = std::abs(b - a);
        if (num > 0.0 && den > 0.0) res.observed_rate = std::log(num / den) / std::log(deltas[n - 3] / deltas[n - 2]);
    }
    const double scale = std::max({std::abs(a), std::abs(b), options.abs_floor});
    if (std::abs(a - b) > options.divergence_tol * scale) {
        res.converged = false;
        if (options.throw_on_divergence) {
            std::ostringstream msg;
            msg << "probe values " << b << " and " << a << " at delta " << deltas[n - 2] << ", " << deltas[n - 1]
                << " differ by more than " << options.divergence_tol * 100 << "%";
            throw NonConvergentProbe(msg.str());
        }
    }
    return res;
}

StrongDnResult strong_dn_at(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                            const ProbeOptions& options) {
    return strong_dn_at(meas, v, x0, probe_schedule(meas, v, x0, options), options);
}

// ---------------------------------------------------------------------------
// Normal derivative

double monotone_root(double tangential_norm, double p, double rhs) {
    if (!(rhs >= 0.0)) throw UsageError("monotone_root needs rhs >= 0");
    if (!(p > 1.0)) throw UsageError("monotone_root needs p > 1");
    if (rhs == 0.0) return 0.0;
    if (p == 2.0) return rhs;
    const double tau2 = tangential_norm * tangential_norm;
    const auto F = [&](double t) { return std::pow(tau2 + t * t, 0.5 * p - 1.0) * t; };
    const auto dF = [&](double t) { return std::pow(tau2 + t * t, 0.5 * p - 2.0) * (tau2 + (p - 1.0) * t * t); };
    double lo = 0.0;
    double hi = std::max(1.0, std::pow(rhs, 1.0 / (p - 1.0)) + tangential_norm);
    while (F(hi) < rhs) hi *= 2.0;
    const double tol = 1e-14 * std::max(1.0, rhs);
    double t = 0.5 * (lo + hi);
    for (int it = 0; it < 400; ++it) {
        const double f = F(t) - rhs;
        if (std::abs(f) <= tol) break;
        (f > 0.0 ? hi : lo) = t;
        if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) break;
        const double d = dF(t);
        double next = (d > 0.0 && std::isfinite(d)) ? t - f / d : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        t = next;
    }
    return t;
}

double recover_normal_derivative(double strong_value, double gamma_at_x0, const Vec2& tangential_grad, double p) {
    if (!(gamma_at_x0 > 0.0)) throw UsageError("gamma at x0 must be positive");
    const double t = monotone_root(tangential_grad.norm(), p, std::abs(strong_value) / gamma_at_x0);
    return strong_value < 0.0 ? -t : t;
}

void write_probe_csv(std::ostream& out, const std::vector<StrongDnResult>& probes) {
    const auto prec = out.precision(17);
    out << "x0_index,delta,raw_pairing,normalized_value,extrapolated_value\n";
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto& pr = probes[i];
        for (std::size_t k = 0; k < pr.deltas.size(); ++k) {
            out << i << ',' << pr.deltas[k] << ',' << pr.raw[k] << ',' << pr.normalized[k] << ',' << pr.value << '\n';
        }
    }
    out.precision(prec);
}

} // namespace pbd
