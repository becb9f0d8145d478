#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pbd/geometry.hpp"

namespace pbd {

/// V(a, a') = ((2p-3) a'^2 + (p-1) a^2) / ((p-1) a'^2 + a^2).
double potential_V(double a, double ap, double p);

/// One period of the periodic solution of a'' + V(a, a') a = 0 started from
/// (a, a')(0) = (amplitude, 0), sampled at the accepted steps of an adaptive
/// Dormand-Prince integration. Values between samples come from cubic Hermite
/// interpolation using the ODE right-hand side as the derivative.
class WolffProfile {
public:
    double p() const { return p_; }
    double period() const { return period_; }
    /// K = (1/lambda) * integral over one period of (a^2 + a'^2)^(p/2).
    double K() const { return K_; }
    double amplitude() const { return a_.front(); }
    double closure_defect() const { return closure_defect_; }
    /// |integral of a over one period|.
    double mean_defect() const { return mean_defect_; }
    /// Largest observed gap between the Hermite interpolant and a direct
    /// integration at step midpoints.
    double interpolation_error() const { return interpolation_error_; }
    double max_abs_a() const { return max_abs_a_; }

    const std::vector<double>& times() const { return t_; }
    const std::vector<double>& a_samples() const { return a_; }
    const std::vector<double>& ap_samples() const { return ap_; }

    /// (a, a') at t, periodically extended.
    std::pair<double, double> eval(double t) const;
    double a(double t) const { return eval(t).first; }

    /// (a, a') at t by integrating from a fixed stored sample with a fixed
    /// number of Runge-Kutta substeps. Smooth in t for a fixed anchor, which
    /// finite-difference stencils rely on.
    std::pair<double, double> eval_anchored(std::size_t anchor, double t) const;
    std::size_t anchor_for(double t) const;

    /// Wrap t into [0, period).
    double wrap(double t) const;

    friend WolffProfile integrate_wolff_orbit(double p, double amplitude, double tol);

private:
    double p_ = 2.0;
    double period_ = 0.0;
    double K_ = 0.0;
    double closure_defect_ = 0.0;
    double mean_defect_ = 0.0;
    double interpolation_error_ = 0.0;
    double max_abs_a_ = 0.0;
    std::vector<double> t_;
    std::vector<double> a_;
    std::vector<double> ap_;
};

/// Integrates one period from (amplitude, 0). Throws PeriodNotFound when no
/// return to {a' = 0, a > 0} happens before t = 100, ToleranceNotMet when the
/// closure defect exceeds 1e-8 * amplitude.
WolffProfile integrate_wolff_orbit(double p, double amplitude, double tol);

/// Normalized profile, (a, a')(0) = (1, 0). Requires 1 < p and 0 < tol <= 1e-6.
WolffProfile solve_profile(double p, double tol = 1e-12);

/// Radial cutoff: 1 on [0, 1/2], a C^3 (degree-7 Hermite) smoothstep down to 0
/// on [1/2, 1], and 0 beyond. The indicator variant (1 on [0, 1]) only exists
/// for sanity checks of the c_p integral.
struct CutoffSpec {
    enum class Kind { Smoothstep7, Indicator };
    Kind kind = Kind::Smoothstep7;

    double operator()(double r) const { return derivative(r, 0); }
    /// k-th derivative in r, k = 0..3 (one-sided from the right at kinks).
    double derivative(double r, int k) const;
    std::string id() const;
    static CutoffSpec from_id(const std::string& id);
};

/// c_p = (K/p) * integral over R of zeta(|x_1|)^p, evaluated by adaptive
/// Gauss-Kronrod quadrature. The eta of the scaling-limit formula is read as
/// the boundary cutoff zeta. Only d = 2 is supported.
double constant_cp(const WolffProfile& profile, const CutoffSpec& cutoff, int d);

/// Wolff's p-harmonic function h(y) = exp(-y_2) a(y_1) on the upper half plane.
double eval_h(const WolffProfile& profile, const Vec2& y);

/// Oscillating Dirichlet datum v_M(x) = h(N f(x)) zeta(M |R(x - x0)|) localized
/// at the frame's base point.
struct OscillatingDatum {
    BoundaryFrame frame;
    double M = 1.0;
    double N = 1.0;
    CutoffSpec cutoff;
    std::shared_ptr<const WolffProfile> profile;

    /// N = M^2 unless given; rejects N < M^2 and M < 1.
    static OscillatingDatum make(const BoundaryFrame& frame, double M, std::shared_ptr<const WolffProfile> profile,
                                 CutoffSpec cutoff = {}, double N = 0.0);

    /// Stable identity of the datum, usable as a cache key.
    std::string key() const;
};

double eval_vM(const OscillatingDatum& datum, const Domain& domain, const Vec2& x);

/// Centered finite-difference value of div(|grad h|^(p-2) grad h) at y (test oracle).
double residual_p_laplace_h(const WolffProfile& profile, const Vec2& y, double step);

/// CSV with columns t,a,ap; leading '#' lines carry p, lambda, K and c_p.
void write_profile_csv(std::ostream& out, const WolffProfile& profile, const CutoffSpec& cutoff, double cp);

} // namespace pbd
