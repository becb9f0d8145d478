#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pbd/dnmap.hpp"
#include "pbd/forward.hpp"
#include "pbd/geometry.hpp"
#include "pbd/wolff.hpp"

namespace pbd {

/// Composite Gauss-Legendre rule on the exact boundary curve, parametrized by
/// the angle around Domain::center.
struct CurveQuadrature {
    std::vector<Vec2> points;
    std::vector<Vec2> normals;
    std::vector<double> weights;

    std::size_t size() const { return points.size(); }
};

/// Whole boundary, panels of arc length at most `panel`.
CurveQuadrature curve_quadrature(const Domain& domain, double panel, int order = 3);

/// Boundary arc { |x - x0| <= radius } around the boundary point x0.
CurveQuadrature arc_quadrature(const Domain& domain, const Vec2& x0, double radius, double panel, int order = 3);

struct SampledScalar {
    std::vector<Vec2> points;
    std::vector<double> values;
};

struct SampledVector {
    std::vector<Vec2> points;
    std::vector<Vec2> values;
};

struct RellichTerms {
    double flux_term = 0.0;      // integral of gamma (alpha . nu) |grad u|^p
    double transport_term = 0.0; // integral of (alpha . grad u) Lambda^s
    double value = 0.0;          // flux_term - p * transport_term
    std::size_t critical_points = 0;
};

/// Samples with |Lambda^s| <= critical_tol contribute nothing to the transport term.
RellichTerms rellich_rhs_terms(const SampledScalar& gamma_on_boundary, const SampledScalar& strong_dn,
                               const SampledVector& boundary_grad_u, const Vec2& alpha, const CurveQuadrature& quad,
                               double p, double critical_tol = 0.0);

double rellich_rhs(const SampledScalar& gamma_on_boundary, const SampledScalar& strong_dn,
                   const SampledVector& boundary_grad_u, const Vec2& alpha, const CurveQuadrature& quad, double p,
                   double critical_tol = 0.0);

/// Sum over elements of |T| (alpha . grad gamma(centroid)) |grad u_T|^p. Uses the hidden truth.
double rellich_lhs_direct(const Mesh& mesh, const ForwardSolution& solution,
                          const std::function<Vec2(const Vec2&)>& grad_gamma, const Vec2& alpha);

/// M^(d-1) N^(1-p) value.
double energy_scaling(double value, double M, double N, int d, double p);

/// Boundary gradient of the solution recovered from measurements.
struct BoundaryGradientField {
    SampledScalar strong;   // extrapolated strong DN values
    SampledVector gradient; // grad_T u + (d_nu u) nu
    std::vector<double> tangential; // d_t u along the unit tangent (-nu_y, nu_x)
    std::vector<double> normal;     // d_nu u
    std::vector<bool> critical;
    double max_extrapolation_residual = 0.0;
    double max_root_residual = 0.0;
    std::size_t unconverged_probes = 0;
};

struct GradientFieldOptions {
    ProbeOptions probe;
    double tangent_step = 1e-5;
    double critical_tol = 0.0; // absolute, on the strong DN value
    int threads = 1;
};

/// Reconstruction defaults: probe divergence is recorded per sample instead of
/// aborting, and probes go down to twice the local mesh size, which oscillating
/// data needs to reach the asymptotic regime in delta.
inline GradientFieldOptions reconstruction_field_defaults() {
    GradientFieldOptions f;
    f.probe.throw_on_divergence = false;
    f.probe.floor_factor = 2.0;
    return f;
}

BoundaryGradientField boundary_gradient_field(const DNMeasurement& meas, const BoundaryDatum& v,
                                              const std::function<double(const Vec2&)>& gamma_boundary,
                                              const std::vector<Vec2>& sample_points,
                                              const GradientFieldOptions& options = {});

/// Both sides of the Rellich identity for smooth data on the whole boundary.
/// The RHS comes from measurements; gamma on the boundary and the LHS use the
/// hidden model.
struct RellichCheck {
    double lhs = 0.0;
    RellichTerms rhs;
    double residual = 0.0; // |lhs - rhs| / max(|lhs|, 0.1)
    std::size_t quadrature_points = 0;
    std::size_t unconverged_probes = 0;
    double max_extrapolation_residual = 0.0;
};

RellichCheck rellich_identity_check(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& alpha,
                                    double panel, const GradientFieldOptions& options = {});

struct OscillationOptions {
    CutoffSpec cutoff;
    double points_per_period = 60.0;
};

struct GammaEstimate {
    double M = 0.0;
    double N = 0.0;
    double energy = 0.0; // <Lambda(v_M), v_M>
    double cp = 0.0;
    double gamma_hat = 0.0;
};

std::vector<GammaEstimate> recover_gamma_at(const DNMeasurement& meas, const Domain& domain, const Vec2& x0,
                                            std::shared_ptr<const WolffProfile> profile,
                                            const std::vector<double>& M_list, const OscillationOptions& osc = {});

/// Periodic cubic spline through values at equally spaced angles around the domain centre.
class PeriodicBoundarySpline {
public:
    PeriodicBoundarySpline(Vec2 center, std::vector<double> values);
    double operator()(const Vec2& x) const;
    double at_angle(double angle) const;
    const std::vector<double>& nodes() const { return values_; }

private:
    Vec2 center_;
    std::vector<double> values_;
    std::vector<double> second_; // spline second derivatives in the node parameter
};

enum class GammaBoundaryMode { oracle, recovered };

std::string to_string(GammaBoundaryMode mode);
GammaBoundaryMode gamma_mode_from_string(const std::string& s);

/// Truth used for error reporting and for the oracle boundary mode.
struct GroundTruth {
    std::function<double(const Vec2&)> gamma;
    std::function<Vec2(const Vec2&)> grad;

    static GroundTruth of(const Conductivity& c);
};

struct ReconstructionOptions {
    GammaBoundaryMode mode = GammaBoundaryMode::oracle;
    OscillationOptions oscillation;
    /// Quadrature arc radius in units of 1/M; v_M vanishes beyond 1/M.
    double arc_factor = 1.25;
    /// Quadrature panels per wavelength lambda / N of the datum.
    double panels_per_wavelength = 20.0;
    int quadrature_order = 3;
    GradientFieldOptions field = reconstruction_field_defaults();
    /// Probe abs_floor in units of N^(p-1), the flux scale of v_M.
    double probe_floor = 0.05;
    /// Recovered mode: boundary grid size and the M used at every grid point.
    int gamma_grid = 16;
    double gamma_grid_M = 8.0;
    int threads = 1;
};

struct ReconstructionRow {
    double M = 0.0;
    double N = 0.0;
    double cp = 0.0;
    double energy = 0.0;
    double gamma_hat = 0.0;
    RellichTerms rhs;
    double dgamma_hat = 0.0;
    std::size_t quadrature_points = 0;
    double max_extrapolation_residual = 0.0;
    double max_root_residual = 0.0;
    std::size_t unconverged_probes = 0;
    std::size_t mesh_triangles = 0;
    double seconds = 0.0;
    bool ok = true;
    std::string error;
    double err_gamma = 0.0;  // relative to gamma(x0); set when truth is known
    double err_dgamma = 0.0; // relative to |grad gamma(x0)| (gamma(x0) when that vanishes)
};

struct ReconstructionResult {
    Vec2 x0 = Vec2::Zero();
    Vec2 alpha = Vec2::UnitX();
    double p = 2.0;
    GammaBoundaryMode mode = GammaBoundaryMode::oracle;
    std::vector<ReconstructionRow> rows; // sorted by M
    std::vector<double> gamma_grid;      // recovered mode only
    double final_gamma = 0.0;            // last successful M
    double final_dgamma = 0.0;
    bool has_truth = false;
    double true_gamma = 0.0;
    double true_dgamma = 0.0;
    double true_grad_norm = 0.0;

    std::size_t successful_rows() const;
    const ReconstructionRow* last_ok() const;
};

/// Reconstruction from measurements. `truth`, when given, is used for the
/// oracle mode and for the error columns only.
ReconstructionResult recover_grad_gamma(const DNMeasurement& meas, const Domain& domain, const Vec2& x0,
                                        const Vec2& alpha, std::shared_ptr<const WolffProfile> profile,
                                        const std::vector<double>& M_list, const ReconstructionOptions& options = {},
                                        const std::optional<GroundTruth>& truth = std::nullopt);

void write_reconstruction_json(std::ostream& out, const ReconstructionResult& result);
/// Columns M, N, gamma_hat, dgamma_hat, err_gamma, err_dgamma.
void write_reconstruction_csv(std::ostream& out, const ReconstructionResult& result);

} // namespace pbd
