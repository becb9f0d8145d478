#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pbd/errors.hpp"
#include "pbd/geometry.hpp"

namespace pbd {

/// Positive weight gamma together with its exact gradient (ground truth for
/// validation) and a lower bound gamma0.
struct Conductivity {
    std::string name;
    std::function<double(const Vec2&)> gamma;
    std::function<Vec2(const Vec2&)> grad;
    double gamma0 = 0.0;

    double operator()(const Vec2& x) const { return gamma(x); }

    static Conductivity constant(double value);
    /// c0 + g . x; gamma0 is its minimum over the closed unit disk.
    static Conductivity affine(double c0, const Vec2& g);
    /// exp(k x_1) (the manufactured family uses k = p - 1).
    static Conductivity exponential(double k);
};

/// Named conductivity presets: "constant", "affine" (1 + 0.3x1 + 0.2x2),
/// "affine_plus" (1 + 0.3x1), "affine_minus" (1 - 0.3x1), "manufactured"
/// (exp((p-1)x1)).
Conductivity conductivity_preset(const std::string& name, double p);
std::vector<std::string> conductivity_preset_names();

/// Checks gamma >= gamma0 > 0 and that `grad` matches central differences of
/// gamma within 1e-6 at `samples` random points of the domain. Throws UsageError.
void validate_conductivity(const Conductivity& gamma, const Domain& domain, int samples = 100,
                           std::uint64_t seed = 7);

struct SolverConfig {
    double p = 2.0;
    std::vector<double> eps_schedule{1e-2, 1e-4, 1e-6, 1e-8};
    /// Newton stops when |residual| <= residual_tol * (first residual of the first stage).
    double residual_tol = 1e-10;
    int max_newton = 200;
    double backtrack = 0.5;
    double armijo = 1e-4;
    /// Relative residual accepted from the sparse factorization.
    double linear_tol = 1e-10;

    void validate() const; // throws UsageError
};

using BoundaryData = std::function<double(const Vec2&)>;

struct StageReport {
    double eps = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> energy;   // one entry per accepted iterate, starting with the stage start
    std::vector<double> residual; // Euclidean norm of the free-node energy gradient
    std::vector<double> step;     // accepted line-search step lengths
};

struct ConvergenceReport {
    std::vector<StageReport> stages;
    double reference_residual = 0.0; // residual of the initial guess in the first stage
    double final_residual = 0.0;
    bool converged = false;
    bool constant_data = false;
    double seconds = 0.0;
};

/// Raised when a stage hits the iteration cap. Carries the best iterate.
class NonConvergence : public Error {
public:
    NonConvergence(const std::string& what, Eigen::VectorXd best, double residual, ConvergenceReport report)
        : Error("NonConvergence: " + what), best_iterate(std::move(best)), best_residual(residual),
          report(std::move(report)) {}
    Eigen::VectorXd best_iterate;
    double best_residual;
    ConvergenceReport report;
};

/// Per-element data of the P1 discretization: areas, basis gradients and
/// gamma at centroids, plus the sparsity pattern of the free-node system.
/// Immutable; shared between solves on the same mesh and conductivity.
class P1Space {
public:
    P1Space(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma);

    const Mesh& mesh() const { return *mesh_; }
    const std::shared_ptr<const Mesh>& mesh_ptr() const { return mesh_; }
    std::size_t num_elements() const { return area_.size(); }
    double area(std::size_t t) const { return area_[t]; }
    const std::array<Vec2, 3>& basis_gradients(std::size_t t) const { return dphi_[t]; }
    double gamma_at_centroid(std::size_t t) const { return gamma_[t]; }

    Vec2 element_gradient(std::size_t t, const Eigen::VectorXd& u) const;

    /// Free (interior) numbering: -1 for boundary vertices.
    const std::vector<int>& free_index() const { return free_; }
    int num_free() const { return num_free_; }

    /// Lower-triangular CSC pattern of the free-free block and, per element,
    /// the value slot of each local pair (i >= j in free numbering), -1 when
    /// a vertex is fixed.
    const std::vector<int>& outer() const { return outer_; }
    const std::vector<int>& inner() const { return inner_; }
    const std::vector<std::array<int, 9>>& slots() const { return slots_; }

private:
    std::shared_ptr<const Mesh> mesh_;
    std::vector<double> area_;
    std::vector<std::array<Vec2, 3>> dphi_;
    std::vector<double> gamma_;
    std::vector<int> free_;
    int num_free_ = 0;
    std::vector<int> outer_;
    std::vector<int> inner_;
    std::vector<std::array<int, 9>> slots_;
};

struct ForwardSolution {
    std::shared_ptr<const Mesh> mesh;
    Eigen::VectorXd u;
    double p = 2.0;
    double eps = 0.0;
    std::vector<Vec2> gradients; // per element
    ConvergenceReport report;
};

/// Sum over elements of |T| gamma(centroid) (|grad u|^2 + eps)^(p/2).
double assemble_energy(const Mesh& mesh, const Conductivity& gamma, double p, double eps, const Eigen::VectorXd& u);
double assemble_energy(const P1Space& space, double p, double eps, const Eigen::VectorXd& u);

/// Nodal values of `v` at the boundary vertices (interior entries are zero).
Eigen::VectorXd boundary_vector(const Mesh& mesh, const BoundaryData& v);

/// Throws MeshTooCoarse when v has >= 3 sign changes along a boundary edge.
void check_boundary_resolution(const Mesh& mesh, const Domain* domain, const BoundaryData& v);

/// Observer called with (eps, iterate) after each completed stage.
using StageObserver = std::function<void(double, const Eigen::VectorXd&)>;

ForwardSolution solve_dirichlet(const P1Space& space, const BoundaryData& v, const SolverConfig& config,
                                const Domain* domain = nullptr, const StageObserver& observer = {});
ForwardSolution solve_dirichlet(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma, const BoundaryData& v,
                                const SolverConfig& config, const Domain* domain = nullptr);

/// Weighted linear (p = 2) Dirichlet solve with nodal boundary values.
ForwardSolution linear_solve_p2(const P1Space& space, const Eigen::VectorXd& boundary_values);
ForwardSolution linear_solve_p2(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma, const BoundaryData& v);

/// Element gradient of the containing triangle; area-weighted average of the
/// adjacent elements on edges and vertices. Points on the exact boundary that
/// fall in the sliver between an edge and the curve are attributed to the
/// nearest boundary element. Throws PointOutsideMesh.
Vec2 gradient_at(const ForwardSolution& solution, const Vec2& x);

/// Value of the P1 interpolant at x (same location rules as gradient_at).
double value_at(const ForwardSolution& solution, const Vec2& x);

struct EpsilonRow {
    double eps;
    double max_gradient_difference; // sup over elements of |grad u_eps - grad u_last|
};

/// Solves with the given schedule (>= 3 entries) and compares each stage's
/// element gradients with those of the last stage.
std::vector<EpsilonRow> epsilon_convergence_report(std::shared_ptr<const Mesh> mesh, const Conductivity& gamma,
                                                   double p, const BoundaryData& v,
                                                   const std::vector<double>& schedule);

/// Relative L2 distance between the P1 solution and `exact`, using the
/// edge-midpoint rule on each element.
double relative_l2_error(const ForwardSolution& solution, const std::function<double(const Vec2&)>& exact);

void write_solution_csv(std::ostream& out, const ForwardSolution& solution);
void write_convergence_json(std::ostream& out, const ConvergenceReport& report);

} // namespace pbd
