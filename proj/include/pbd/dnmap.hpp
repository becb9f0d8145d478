#pragma once

#include <atomic>
#include <future>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pbd/forward.hpp"
#include "pbd/geometry.hpp"
#include "pbd/wolff.hpp"

namespace pbd {

/// Dirichlet data handed to the measurement device. `key` identifies the
/// data for caching; `focus` asks the device to resolve it with a locally
/// refined mesh.
struct BoundaryDatum {
    std::string key;
    BoundaryData value;
    std::optional<MeshFocus> focus;

    static BoundaryDatum smooth(std::string key, BoundaryData v);
    /// t * v, with its own cache key.
    BoundaryDatum scaled(double t) const;
};

/// v_M with mesh hint: local size lambda / (points_per_period * N) inside a
/// ball of radius 2/M around the datum's base point.
BoundaryDatum oscillating_boundary_datum(const OscillatingDatum& datum, const Domain& domain,
                                         double points_per_period);

/// A test function on the closed domain, optionally with a known support ball.
struct TestFunction {
    std::function<double(const Vec2&)> g;
    std::optional<Vec2> center;
    double radius = 0.0;

    static TestFunction everywhere(std::function<double(const Vec2&)> g);
    static TestFunction in_ball(std::function<double(const Vec2&)> g, const Vec2& center, double radius);
};

struct MeasurementOptions {
    double h = 0.05; // mesh size away from any focus
    MeshOptions mesh;
};

/// Simulated measurement device for the weak DN map of a hidden model
/// (domain, conductivity, solver settings). Reconstruction code only calls the
/// public measurement methods; the oracle_* accessors exist for tests and
/// diagnostics. Meshes and forward solutions are cached; all methods are
/// thread-safe.
class DNMeasurement {
public:
    DNMeasurement(Domain domain, Conductivity gamma, SolverConfig config, MeasurementOptions options = {});

    double p() const { return config_.p; }
    const Domain& domain() const { return domain_; }
    double eps_floor() const { return config_.eps_schedule.back(); }

    /// Sum over elements of |T| gamma (|grad u|^2 + eps)^((p-2)/2) grad u . grad g_h, with u the
    /// discrete solution for v and g_h the P1 interpolant of g.
    double weak_pairing(const BoundaryDatum& v, const TestFunction& g) const;

    /// Integral over the polygonal boundary of the P1 trace of g on the mesh used for v.
    double trace_integral(const BoundaryDatum& v, const TestFunction& g) const;

    /// Longest boundary edge within `radius` of x on the mesh used for v.
    double local_resolution(const BoundaryDatum& v, const Vec2& x, double radius) const;

    std::size_t solves_performed() const { return solves_.load(); }
    void clear_cache();

    // hidden-model access for tests and diagnostics
    std::shared_ptr<const ForwardSolution> oracle_solution(const BoundaryDatum& v) const;
    std::shared_ptr<const P1Space> oracle_space(const BoundaryDatum& v) const;
    const Conductivity& oracle_conductivity() const { return gamma_; }

private:
    std::shared_ptr<const P1Space> space_for(const BoundaryDatum& v) const;
    std::shared_ptr<const ForwardSolution> solution_for(const BoundaryDatum& v) const;

    Domain domain_;
    Conductivity gamma_;
    SolverConfig config_;
    MeasurementOptions options_;

    mutable std::mutex mutex_;
    mutable std::map<std::string, std::shared_future<std::shared_ptr<const P1Space>>> spaces_;
    mutable std::map<std::string, std::shared_future<std::shared_ptr<const ForwardSolution>>> solutions_;
    mutable std::atomic<std::size_t> solves_{0};
};

/// Tent mollifier (delta - |x - x0|)_+ normalized by its boundary integral.
struct MollifierProbe {
    Vec2 x0;
    double delta = 0.0;
    double integral = 0.0; // boundary integral of the unnormalized tent

    double normalization() const { return 1.0 / integral; }
    double operator()(const Vec2& x) const { return std::max(0.0, delta - (x - x0).norm()); }
    TestFunction test_function() const;
};

MollifierProbe make_probe(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0, double delta);

struct ProbeOptions {
    double delta0 = 0.2;
    /// Each delta must be at least floor_factor times the local boundary mesh size.
    double floor_factor = 5.0;
    /// Number of (smallest admissible) deltas kept from the halving schedule.
    int levels = 3;
    /// Assumed convergence order in delta for the Richardson step.
    double richardson_order = 2.0;
    /// Relative change allowed between the two smallest deltas.
    double divergence_tol = 0.1;
    /// Absolute floor used in that relative comparison.
    double abs_floor = 0.0;
    bool throw_on_divergence = true;
};

/// delta_j = delta0 * 2^-j while delta_j >= floor_factor * local size; the
/// last `levels` entries, largest first. Throws ProbeUnresolved when fewer
/// than two levels are admissible.
std::vector<double> probe_schedule(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                                   const ProbeOptions& options);

struct StrongDnResult {
    Vec2 x0;
    std::vector<double> deltas; // decreasing
    std::vector<double> raw;    // <Lambda(v), eta_delta>
    std::vector<double> normalized;
    double value = 0.0; // extrapolated
    double observed_rate = 0.0; // NaN with fewer than three levels
    double extrapolation_residual = 0.0;
    bool converged = true;
};

StrongDnResult strong_dn_at(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                            const std::vector<double>& deltas, const ProbeOptions& options = {});
StrongDnResult strong_dn_at(const DNMeasurement& meas, const BoundaryDatum& v, const Vec2& x0,
                            const ProbeOptions& options = {});

/// Unique t >= 0 with (tau^2 + t^2)^((p-2)/2) t = rhs.
double monotone_root(double tangential_norm, double p, double rhs);

/// Normal derivative from a strong DN value: sign(strong) * t with
/// (|grad_T u|^2 + t^2)^((p-2)/2) t = |strong| / gamma.
double recover_normal_derivative(double strong_value, double gamma_at_x0, const Vec2& tangential_grad, double p);

inline bool detect_critical(double strong_value, double tol) { return std::abs(strong_value) <= tol; }

/// Columns x0_index, delta, raw_pairing, normalized_value, extrapolated_value.
void write_probe_csv(std::ostream& out, const std::vector<StrongDnResult>& probes);

} // namespace pbd
