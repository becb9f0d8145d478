#include "pbd/forward.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/SparseCholesky>
#include <json.hpp>

namespace pbd {

// ---------------------------------------------------------------------------
// Conductivity

Conductivity Conductivity::constant(double value) {
    if (!(value > 0.0)) throw UsageError("constant conductivity must be positive");
    Conductivity c;
    c.name = "constant";
    c.gamma = [value](const Vec2&) { return value; };
    c.grad = [](const Vec2&) { return Vec2(0.0, 0.0); };
    c.gamma0 = value;
    return c;
}

Conductivity Conductivity::affine(double c0, const Vec2& g) {
    Conductivity c;
    c.name = "affine";
    c.gamma = [c0, g](const Vec2& x) { return c0 + g.dot(x); };
    c.grad = [g](const Vec2&) { return g; };
    c.gamma0 = c0 - g.norm();
    if (!(c.gamma0 > 0.0)) throw UsageError("affine conductivity is not bounded below on the unit disk");
    return c;
}

Conductivity Conductivity::exponential(double k) {
    Conductivity c;
    c.name = "exponential";
    c.gamma = [k](const Vec2& x) { return std::exp(k * x.x()); };
    c.grad = [k](const Vec2& x) { return Vec2(k * std::exp(k * x.x()), 0.0); };
    c.gamma0 = std::exp(-std::abs(k));
    return c;
}

std::vector<std::string> conductivity_preset_names() {
    return {"constant", "affine", "affine_plus", "affine_minus", "manufactured"};
}

Conductivity conductivity_preset(const std::string& name, double p) {
    Conductivity c;
    if (name == "constant") {
        c = Conductivity::constant(1.0);
    } else if (name == "affine") {
        c = Conductivity::affine(1.0, Vec2(0.3, 0.2));
    } else if (name == "affine_plus") {
        c = Conductivity::affine(1.0, Vec2(0.3, 0.0));
    } else if (name == "affine_minus") {
        c = Conductivity::affine(1.0, Vec2(-0.3, 0.0));
    } else if (name == "manufactured") {
        c = Conductivity::exponential(p - 1.0);
    } else {
        throw UsageError("unknown conductivity preset '" + name + "'");
    }
    c.name = name;
    return c;
}

void validate_conductivity(const Conductivity& gamma, const Domain& domain, int samples, std::uint64_t seed) {
    if (!gamma.gamma || !gamma.grad) throw UsageError("conductivity needs gamma and its gradient");
    if (!(gamma.gamma0 > 0.0)) throw UsageError("conductivity lower bound must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(domain.box.lower.x(), domain.box.upper.x());
    std::uniform_real_distribution<double> uy(domain.box.lower.y(), domain.box.upper.y());
    const double s = 1e-5;
    for (int found = 0; found < samples;) {
        const Vec2 x(ux(rng), uy(rng));
        if (!domain.contains(x)) continue;
        ++found;
        if (gamma(x) < gamma.gamma0 - 1e-12) throw UsageError("conductivity drops below its lower bound");
        const Vec2 fd((gamma(x + Vec2(s, 0)) - gamma(x - Vec2(s, 0))) / (2 * s),
                      (gamma(x + Vec2(0, s)) - gamma(x - Vec2(0, s))) / (2 * s));
        const Vec2 g = gamma.grad(x);
        if ((fd - g).norm() > 1e-6 * std::max(1.0, g.norm())) {
            throw UsageError("conductivity gradient disagrees with finite differences");
        }
    }
}

void SolverConfig::validate() const {
    if (!(p > 1.0) || !std::isfinite(p)) throw UsageError("p must satisfy 1 < p < infinity");
    if (eps_schedule.empty()) throw UsageError("epsilon schedule is empty");
    for (std::size_t i = 0; i < eps_schedule.size(); ++i) {
        if (!(eps_schedule[i] > 0.0)) throw UsageError("epsilon schedule entries must be positive");
        if (i > 0 && !(eps_schedule[i] < eps_schedule[i - 1])) {
            throw UsageError("epsilon schedule must be strictly decreasing");
        }
    }
    if (!(residual_tol > 0.0)) throw UsageError("residual tolerance must be positive");
    if (max_newton < 1) throw UsageError("max_newton must be >= 1");
    if (!(backtrack > 0.0 && backtrack < 1.0)) throw UsageError("backtracking factor must lie in (0, 1)");
    if (!(armijo > 0.0 && armijo < 0.5)) throw UsageError("sufficient-decrease constant must lie in (0, 1/2)");
    if (!(linear_tol > 0.0)) throw UsageError("linear-solver tolerance must be positive");
}

// ---------------------------------------------------------------------------
// P1Space

P1Space::P1Space(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma) : mesh_(std::move(mesh)) {
    if (!mesh_) throw UsageError("P1Space needs a mesh");
    const Mesh& m = *mesh_;
    const std::size_t nt = m.num_triangles();
    area_.resize(nt);
    dphi_.resize(nt);
    gamma_.resize(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        const auto& tri = m.triangle(t);
        const Vec2& a = m.vertex(tri[0]);
        const Vec2& b = m.vertex(tri[1]);
        const Vec2& c = m.vertex(tri[2]);
        const double twice = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
        if (!(twice > 0.0)) throw SingularSystem("degenerate or inverted triangle");
        area_[t] = 0.5 * twice;
        const std::array<const Vec2*, 3> v{&a, &b, &c};
        for (int i = 0; i < 3; ++i) {
            const Vec2& pj = *v[(i + 1) % 3];
            const Vec2& pk = *v[(i + 2) % 3];
            dphi_[t][i] = Vec2(pj.y() - pk.y(), pk.x() - pj.x()) / twice;
        }
        gamma_[t] = gamma(m.centroid(t));
        if (!(gamma_[t] > 0.0)) throw UsageError("conductivity must be positive at element centroids");
    }

    free_.assign(m.num_vertices(), -1);
    for (std::size_t i = 0; i < m.num_vertices(); ++i) {
        if (!m.is_boundary_vertex(i)) free_[i] = num_free_++;
    }

    std::vector<std::pair<int, int>> pairs; // (col, row) with row >= col
    pairs.reserve(6 * nt);
    for (std::size_t t = 0; t < nt; ++t) {
        const auto& tri = m.triangle(t);
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
                const int fa = free_[tri[a]];
                const int fb = free_[tri[b]];
                if (fa < 0 || fb < 0 || fa < fb) continue;
                pairs.emplace_back(fb, fa);
            }
        }
    }
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    outer_.assign(num_free_ + 1, 0);
    inner_.resize(pairs.size());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        ++outer_[pairs[k].first + 1];
        inner_[k] = pairs[k].second;
    }
    std::partial_sum(outer_.begin(), outer_.end(), outer_.begin());

    slots_.resize(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        const auto& tri = m.triangle(t);
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
                const int fa = free_[tri[a]];
                const int fb = free_[tri[b]];
                int slot = -1;
                if (fa >= 0 && fb >= 0) {
                    const int row = std::max(fa, fb);
                    const int col = std::min(fa, fb);
                    const auto first = inner_.begin() + outer_[col];
                    const auto last = inner_.begin() + outer_[col + 1];
                    slot = static_cast<int>(std::lower_bound(first, last, row) - inner_.begin());
                }
                slots_[t][a * 3 + b] = slot;
            }
        }
    }
}

Vec2 P1Space::element_gradient(std::size_t t, const Eigen::VectorXd& u) const {
    const auto& tri = mesh_->triangle(t);
    return u[tri[0]] * dphi_[t][0] + u[tri[1]] * dphi_[t][1] + u[tri[2]] * dphi_[t][2];
}

// ---------------------------------------------------------------------------
// Energy, gradient and Hessian

namespace {

struct Evaluation {
    double energy = 0.0;
    Eigen::VectorXd gradient;     // free numbering
    Eigen::VectorXd gradient_abs; // sum of |terms| per free node, for the round-off floor
};

Evaluation evaluate(const P1Space& space, double p, double eps, const Eigen::VectorXd& u, bool with_gradient,
                    double* hessian_values = nullptr) {
    Evaluation ev;
    const Mesh& m = space.mesh();
    const auto& free = space.free_index();
    if (with_gradient) {
        ev.gradient = Eigen::VectorXd::Zero(space.num_free());
        ev.gradient_abs = Eigen::VectorXd::Zero(space.num_free());
    }
    if (hessian_values) std::fill(hessian_values, hessian_values + space.inner().size(), 0.0);
    for (std::size_t t = 0; t < space.num_elements(); ++t) {
        const auto& tri = m.triangle(t);
        const auto& dphi = space.basis_gradients(t);
        const Vec2 g = u[tri[0]] * dphi[0] + u[tri[1]] * dphi[1] + u[tri[2]] * dphi[2];
        const double s = g.squaredNorm() + eps;
        const double w = space.area(t) * space.gamma_at_centroid(t);
        const double sp = std::pow(s, 0.5 * p - 1.0); // s^((p-2)/2)
        ev.energy += w * sp * s;
        if (!with_gradient && !hessian_values) continue;
        std::array<double, 3> gd{};
        for (int a = 0; a < 3; ++a) {
            gd[a] = g.dot(dphi[a]);
            const int fa = free[tri[a]];
            if (fa < 0 || !with_gradient) continue;
            const double term = w * p * sp * gd[a];
            ev.gradient[fa] += term;
            ev.gradient_abs[fa] += std::abs(term);
        }
        if (!hessian_values) continue;
        const double c1 = w * p * sp;
        const double c2 = (p == 2.0 || s == 0.0) ? 0.0 : w * p * (p - 2.0) * sp / s;
        const auto& slots = space.slots()[t];
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b <= a; ++b) {
                const int slot = slots[a * 3 + b];
                if (slot < 0) continue;
                hessian_values[slot] += c1 * dphi[a].dot(dphi[b]) + c2 * gd[a] * gd[b];
            }
        }
    }
    return ev;
}

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;

SparseMatrix make_pattern_matrix(const P1Space& space) {
    SparseMatrix H(space.num_free(), space.num_free());
    H.resizeNonZeros(static_cast<Eigen::Index>(space.inner().size()));
    std::copy(space.outer().begin(), space.outer().end(), H.outerIndexPtr());
    std::copy(space.inner().begin(), space.inner().end(), H.innerIndexPtr());
    return H;
}

void scatter_free(const P1Space& space, const Eigen::VectorXd& free_values, Eigen::VectorXd& full, double scale) {
    const auto& free = space.free_index();
    for (std::size_t i = 0; i < free.size(); ++i) {
        if (free[i] >= 0) full[i] += scale * free_values[free[i]];
    }
}

std::vector<Vec2> element_gradients(const P1Space& space, const Eigen::VectorXd& u) {
    std::vector<Vec2> g(space.num_elements());
    for (std::size_t t = 0; t < g.size(); ++t) g[t] = space.element_gradient(t, u);
    return g;
}

bool is_constant_data(const Mesh& mesh, const Eigen::VectorXd& bv, double* value) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < mesh.num_vertices(); ++i) {
        if (!mesh.is_boundary_vertex(i)) continue;
        lo = std::min(lo, bv[i]);
        hi = std::max(hi, bv[i]);
    }
    *value = lo;
    return hi - lo <= 1e-14 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

} // namespace

double assemble_energy(const P1Space& space, double p, double eps, const Eigen::VectorXd& u) {
    if (static_cast<std::size_t>(u.size()) != space.mesh().num_vertices()) {
        throw UsageError("nodal vector size does not match the mesh");
    }
    if (!(eps >= 0.0)) throw UsageError("eps must be nonnegative");
    return evaluate(space, p, eps, u, false).energy;
}

double assemble_energy(const Mesh& mesh, const Conductivity& gamma, double p, double eps, const Eigen::VectorXd& u) {
    // non-owning view; the space does not outlive this call
    const std::shared_ptr<const Mesh> view(&mesh, [](const Mesh*) {});
    return assemble_energy(P1Space(view, gamma), p, eps, u);
}

Eigen::VectorXd boundary_vector(const Mesh& mesh, const BoundaryData& v) {
    Eigen::VectorXd bv = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.num_vertices()));
    for (std::size_t i = 0; i < mesh.num_vertices(); ++i) {
        if (mesh.is_boundary_vertex(i)) bv[i] = v(mesh.vertex(i));
    }
    return bv;
}

void check_boundary_resolution(const Mesh& mesh, const Domain* domain, const BoundaryData& v) {
    constexpr int kSamples = 9;
    for (const auto& e : mesh.boundary_edges()) {
        const Vec2& a = mesh.vertex(e.vertices[0]);
        const Vec2& b = mesh.vertex(e.vertices[1]);
        int changes = 0;
        int last = 0;
        for (int k = 0; k < kSamples; ++k) {
            Vec2 x = a + (b - a) * (static_cast<double>(k) / (kSamples - 1));
            if (domain && k > 0 && k + 1 < kSamples) x = domain->project_to_boundary(x);
            const double val = v(x);
            const int sign = val > 0.0 ? 1 : (val < 0.0 ? -1 : 0);
            if (sign == 0) continue;
            if (last != 0 && sign != last) ++changes;
            last = sign;
        }
        if (changes >= 3) {
            std::ostringstream msg;
            msg << "boundary data changes sign " << changes << " times along one edge of length " << e.length;
            throw MeshTooCoarse(msg.str());
        }
    }
}

// ---------------------------------------------------------------------------
// Solvers

ForwardSolution linear_solve_p2(const P1Space& space, const Eigen::VectorXd& boundary_values) {
    const Mesh& m = space.mesh();
    if (static_cast<std::size_t>(boundary_values.size()) != m.num_vertices()) {
        throw UsageError("boundary vector size does not match the mesh");
    }
    const auto start = Clock::now();
    ForwardSolution sol;
    sol.mesh = space.mesh_ptr();
    sol.p = 2.0;
    sol.eps = 0.0;
    sol.u = boundary_values;
    const auto& free = space.free_index();
    for (std::size_t i = 0; i < free.size(); ++i) {
        if (free[i] >= 0) sol.u[i] = 0.0;
    }
    if (space.num_free() > 0) {
        SparseMatrix H = make_pattern_matrix(space);
        const Evaluation ev = evaluate(space, 2.0, 0.0, sol.u, true, H.valuePtr());
        Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> ldlt(H);
        if (ldlt.info() != Eigen::Success) throw SingularSystem("stiffness factorization failed");
        const Eigen::VectorXd d = ldlt.solve(-ev.gradient);
        if (!d.allFinite()) throw SingularSystem("stiffness solve produced non-finite values");
        scatter_free(space, d, sol.u, 1.0);
        const Evaluation after = evaluate(space, 2.0, 0.0, sol.u, true);
        sol.report.final_residual = after.gradient.norm();
        sol.report.reference_residual = ev.gradient.norm();
    }
    sol.report.converged = true;
    sol.gradients = element_gradients(space, sol.u);
    sol.report.seconds = seconds_since(start);
    return sol;
}

ForwardSolution linear_solve_p2(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma, const BoundaryData& v) {
    const P1Space space(mesh, gamma);
    return linear_solve_p2(space, boundary_vector(*mesh, v));
}

ForwardSolution solve_dirichlet(const P1Space& space, const BoundaryData& v, const SolverConfig& config,
                                const Domain* domain, const StageObserver& observer) {
    config.validate();
    const auto start = Clock::now();
    const Mesh& m = space.mesh();
    const double p = config.p;
    check_boundary_resolution(m, domain, v);
    const Eigen::VectorXd bv = boundary_vector(m, v);

    ForwardSolution sol;
    sol.mesh = space.mesh_ptr();
    sol.p = p;
    sol.eps = config.eps_schedule.back();

    double constant = 0.0;
    if (is_constant_data(m, bv, &constant)) {
        sol.u = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(m.num_vertices()), constant);
        sol.gradients.assign(space.num_elements(), Vec2::Zero());
        sol.report.constant_data = true;
        sol.report.converged = true;
        for (double eps : config.eps_schedule) {
            StageReport st;
            st.eps = eps;
            st.converged = true;
            st.energy.push_back(assemble_energy(space, p, eps, sol.u));
            st.residual.push_back(0.0);
            sol.report.stages.push_back(std::move(st));
            if (observer) observer(eps, sol.u);
        }
        sol.report.seconds = seconds_since(start);
        return sol;
    }

    Eigen::VectorXd u = linear_solve_p2(space, bv).u;
    if (space.num_free() == 0) {
        sol.u = u;
        sol.gradients = element_gradients(space, u);
        sol.report.converged = true;
        sol.report.seconds = seconds_since(start);
        return sol;
    }

    SparseMatrix H = make_pattern_matrix(space);
    Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> ldlt;
    ldlt.analyzePattern(H);

    double reference = -1.0;
    Eigen::VectorXd trial(u.size());
    for (double eps : config.eps_schedule) {
        StageReport st;
        st.eps = eps;
        Evaluation ev = evaluate(space, p, eps, u, true);
        double r = ev.gradient.norm();
        if (reference < 0.0) reference = r;
        st.energy.push_back(ev.energy);
        st.residual.push_back(r);
        for (int it = 0;; ++it) {
            const double target = std::max(config.residual_tol * reference, 1e-13 * ev.gradient_abs.norm());
            if (r <= target) {
                st.converged = true;
                break;
            }
            if (it >= config.max_newton) break;
            evaluate(space, p, eps, u, false, H.valuePtr());
            ldlt.factorize(H);
            if (ldlt.info() != Eigen::Success) throw SingularSystem("Newton matrix factorization failed");
            const Eigen::VectorXd d = ldlt.solve(-ev.gradient);
            const double slope = ev.gradient.dot(d);
            if (!d.allFinite() || !(slope < 0.0)) {
                throw SingularSystem("Newton direction is not a descent direction");
            }
            // Armijo backtracking with a round-off slack on the energy comparison
            const double slack = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(ev.energy);
            double step = 1.0;
            bool accepted = false;
            Evaluation next;
            while (step > 1e-12) {
                trial = u;
                scatter_free(space, d, trial, step);
                next = evaluate(space, p, eps, trial, false);
                if (next.energy <= ev.energy + config.armijo * step * slope + slack) {
                    accepted = true;
                    break;
                }
                step *= config.backtrack;
            }
            if (!accepted) break; // stagnation; reported below against the target
            u.swap(trial);
            ev = evaluate(space, p, eps, u, true);
            r = ev.gradient.norm();
            st.energy.push_back(ev.energy);
            st.residual.push_back(r);
            st.step.push_back(step);
            st.iterations = it + 1;
        }
        sol.report.stages.push_back(st);
        if (!st.converged) {
            sol.report.reference_residual = reference;
            sol.report.final_residual = r;
            sol.report.seconds = seconds_since(start);
            std::ostringstream msg;
            msg << "stage eps=" << eps << " stopped after " << st.iterations << " iterations with residual " << r
                << " (reference " << reference << ")";
            throw NonConvergence(msg.str(), u, r, sol.report);
        }
        if (observer) observer(eps, u);
    }
    sol.report.reference_residual = reference;
    sol.report.final_residual = sol.report.stages.back().residual.back();
    sol.report.converged = true;
    sol.u = std::move(u);
    sol.gradients = element_gradients(space, sol.u);
    sol.report.seconds = seconds_since(start);
    return sol;
}

ForwardSolution solve_dirichlet(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma, const BoundaryData& v,
                                const SolverConfig& config, const Domain* domain) {
    const P1Space space(mesh, gamma);
    return solve_dirichlet(space, v, config, domain);
}

// ---------------------------------------------------------------------------
// Point evaluation

namespace {

struct Location {
    int triangle = -1;
    std::array<double, 3> bary{};
};

// Triangle containing x or, for points in the sliver between a boundary edge
// and the curved boundary, the element of the nearest boundary edge with the
// barycentric coordinates of the projection onto that edge.
Location locate_with_sliver(const Mesh& mesh, const Vec2& x) {
    Location loc;
    loc.triangle = mesh.locate(x, &loc.bary);
    if (loc.triangle >= 0) return loc;
    double best = std::numeric_limits<double>::infinity();
    const BoundaryEdge* edge = nullptr;
    double best_s = 0.0;
    for (const auto& e : mesh.boundary_edges()) {
        const Vec2& a = mesh.vertex(e.vertices[0]);
        const Vec2& b = mesh.vertex(e.vertices[1]);
        const Vec2 ab = b - a;
        const double s = std::clamp((x - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
        const double dist = (a + s * ab - x).norm();
        if (dist < best) {
            best = dist;
            edge = &e;
            best_s = s;
        }
    }
    if (!edge || best > 0.25 * edge->length) throw PointOutsideMesh("point is not covered by the mesh");
    loc.triangle = edge->triangle;
    const auto& tri = mesh.triangle(edge->triangle);
    for (int k = 0; k < 3; ++k) {
        if (tri[k] == edge->vertices[0]) loc.bary[k] = 1.0 - best_s;
        else if (tri[k] == edge->vertices[1]) loc.bary[k] = best_s;
        else loc.bary[k] = 0.0;
    }
    return loc;
}

} // namespace

Vec2 gradient_at(const ForwardSolution& solution, const Vec2& x) {
    const Mesh& m = *solution.mesh;
    const Location loc = locate_with_sliver(m, x);
    const auto& tri = m.triangle(loc.triangle);
    constexpr double kOnEdge = 1e-9;
    std::vector<int> zero;
    for (int k = 0; k < 3; ++k) {
        if (std::abs(loc.bary[k]) <= kOnEdge) zero.push_back(k);
    }
    std::vector<int> elements;
    if (zero.size() >= 2) {
        int vtx = 0;
        for (int k = 0; k < 3; ++k) {
            if (std::find(zero.begin(), zero.end(), k) == zero.end()) vtx = tri[k];
        }
        elements = m.vertex_triangles(vtx);
    } else if (zero.size() == 1) {
        const int i = tri[(zero[0] + 1) % 3];
        const int j = tri[(zero[0] + 2) % 3];
        for (int t : m.vertex_triangles(i)) {
            const auto& o = m.triangle(t);
            if (o[0] == j || o[1] == j || o[2] == j) elements.push_back(t);
        }
    } else {
        return solution.gradients[loc.triangle];
    }
    Vec2 acc = Vec2::Zero();
    double area = 0.0;
    for (int t : elements) {
        acc += m.area(t) * solution.gradients[t];
        area += m.area(t);
    }
    return acc / area;
}

double value_at(const ForwardSolution& solution, const Vec2& x) {
    const Mesh& m = *solution.mesh;
    const Location loc = locate_with_sliver(m, x);
    const auto& tri = m.triangle(loc.triangle);
    return loc.bary[0] * solution.u[tri[0]] + loc.bary[1] * solution.u[tri[1]] + loc.bary[2] * solution.u[tri[2]];
}

std::vector<EpsilonRow> epsilon_convergence_report(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma,
                                                   double p, const BoundaryData& v,
                                                   const std::vector<double>& schedule) {
    if (schedule.size() < 3) throw UsageError("epsilon convergence report needs at least 3 entries");
    SolverConfig config;
    config.p = p;
    config.eps_schedule = schedule;
    const P1Space space(mesh, gamma);
    std::vector<std::vector<Vec2>> grads;
    solve_dirichlet(space, v, config, nullptr,
                    [&](double, const Eigen::VectorXd& u) { grads.push_back(element_gradients(space, u)); });
    std::vector<EpsilonRow> rows;
    for (std::size_t k = 0; k < schedule.size(); ++k) {
        double worst = 0.0;
        for (std::size_t t = 0; t < grads[k].size(); ++t) {
            worst = std::max(worst, (grads[k][t] - grads.back()[t]).norm());
        }
        rows.push_back({schedule[k], worst});
    }
    return rows;
}

double relative_l2_error(const ForwardSolution& solution, const std::function<double(const Vec2&)>& exact) {
    const Mesh& m = *solution.mesh;
    double err = 0.0, norm = 0.0;
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        const auto& tri = m.triangle(t);
        const double w = m.area(t) / 3.0;
        for (int k = 0; k < 3; ++k) {
            const int i = tri[k];
            const int j = tri[(k + 1) % 3];
            const Vec2 mid = 0.5 * (m.vertex(i) + m.vertex(j));
            const double uh = 0.5 * (solution.u[i] + solution.u[j]);
            const double ue = exact(mid);
            err += w * (uh - ue) * (uh - ue);
            norm += w * ue * ue;
        }
    }
    if (norm == 0.0) return std::sqrt(err);
    return std::sqrt(err / norm);
}

void write_solution_csv(std::ostream& out, const ForwardSolution& solution) {
    const auto prec = out.precision(17);
    out << "vertex,x,y,u\n";
    const Mesh& m = *solution.mesh;
    for (std::size_t i = 0; i < m.num_vertices(); ++i) {
        out << i << ',' << m.vertex(i).x() << ',' << m.vertex(i).y() << ',' << solution.u[i] << '\n';
    }
    out.precision(prec);
}

void write_convergence_json(std::ostream& out, const ConvergenceReport& report) {
    nlohmann::ordered_json j;
    j["converged"] = report.converged;
    j["constant_data"] = report.constant_data;
    j["reference_residual"] = report.reference_residual;
    j["final_residual"] = report.final_residual;
    j["seconds"] = report.seconds;
    nlohmann::ordered_json ladder = nlohmann::ordered_json::array();
    for (const auto& st : report.stages) {
        nlohmann::ordered_json s;
        s["eps"] = st.eps;
        s["iterations"] = st.iterations;
        s["converged"] = st.converged;
        s["energy"] = st.energy;
        s["residual"] = st.residual;
        s["step"] = st.step;
        ladder.push_back(std::move(s));
    }
    j["stages"] = std::move(ladder);
    out << j.dump(2) << '\n';
}

} // namespace pbd
