#include "pbd/wolff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <ostream>
#include <sstream>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "pbd/errors.hpp"

namespace pbd {

double potential_V(double a, double ap, double p) {
    const double a2 = a * a;
    const double ap2 = ap * ap;
    if (a2 + ap2 < 1e-300) throw DegeneratePhasePoint("V is undefined at (a, a') = (0, 0)");
    return ((2.0 * p - 3.0) * ap2 + (p - 1.0) * a2) / ((p - 1.0) * ap2 + a2);
}

namespace {

using State = std::array<double, 2>;

State rhs(const State& y, double p) { return {y[1], -potential_V(y[0], y[1], p) * y[0]}; }

// Dormand-Prince 5(4) step; returns the 5th-order solution and writes the
// embedded error estimate.
State dopri_step(const State& y, double h, double p, State* err = nullptr) {
    static constexpr double c21 = 1.0 / 5.0;
    static constexpr double c31 = 3.0 / 40.0, c32 = 9.0 / 40.0;
    static constexpr double c41 = 44.0 / 45.0, c42 = -56.0 / 15.0, c43 = 32.0 / 9.0;
    static constexpr double c51 = 19372.0 / 6561.0, c52 = -25360.0 / 2187.0, c53 = 64448.0 / 6561.0,
                            c54 = -212.0 / 729.0;
    static constexpr double c61 = 9017.0 / 3168.0, c62 = -355.0 / 33.0, c63 = 46732.0 / 5247.0, c64 = 49.0 / 176.0,
                            c65 = -5103.0 / 18656.0;
    static constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0, b5 = -2187.0 / 6784.0,
                            b6 = 11.0 / 84.0;
    static constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0, e5 = -17253.0 / 339200.0,
                            e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;

    auto axpy = [&](std::initializer_list<std::pair<double, const State*>> terms) {
        State out = y;
        for (const auto& [c, k] : terms) {
            out[0] += h * c * (*k)[0];
            out[1] += h * c * (*k)[1];
        }
        return out;
    };
    const State k1 = rhs(y, p);
    const State k2 = rhs(axpy({{c21, &k1}}), p);
    const State k3 = rhs(axpy({{c31, &k1}, {c32, &k2}}), p);
    const State k4 = rhs(axpy({{c41, &k1}, {c42, &k2}, {c43, &k3}}), p);
    const State k5 = rhs(axpy({{c51, &k1}, {c52, &k2}, {c53, &k3}, {c54, &k4}}), p);
    const State k6 = rhs(axpy({{c61, &k1}, {c62, &k2}, {c63, &k3}, {c64, &k4}, {c65, &k5}}), p);
    const State y5 = axpy({{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
    if (err) {
        const State k7 = rhs(y5, p);
        for (int i = 0; i < 2; ++i) {
            (*err)[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
        }
    }
    return y5;
}

constexpr double kMaxStep = 0.02;
constexpr double kMaxTime = 100.0;
constexpr int kAnchoredSubsteps = 4;

double hermite(double s, double h, double y0, double m0, double y1, double m1) {
    const double s2 = s * s;
    const double s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * m0 + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * m1;
}

} // namespace

double WolffProfile::wrap(double t) const {
    double w = t - period_ * std::floor(t / period_);
    if (w >= period_) w -= period_;
    if (w < 0.0) w = 0.0;
    return w;
}

std::size_t WolffProfile::anchor_for(double t) const {
    const double w = wrap(t);
    const auto it = std::upper_bound(t_.begin(), t_.end(), w);
    const std::size_t idx = it == t_.begin() ? 0 : static_cast<std::size_t>(it - t_.begin()) - 1;
    return std::min(idx, t_.size() - 2);
}

std::pair<double, double> WolffProfile::eval(double t) const {
    const double w = wrap(t);
    const std::size_t k = anchor_for(w);
    const double h = t_[k + 1] - t_[k];
    const double s = (w - t_[k]) / h;
    const double da0 = ap_[k];
    const double da1 = ap_[k + 1];
    const double dap0 = -potential_V(a_[k], ap_[k], p_) * a_[k];
    const double dap1 = -potential_V(a_[k + 1], ap_[k + 1], p_) * a_[k + 1];
    return {hermite(s, h, a_[k], da0, a_[k + 1], da1), hermite(s, h, ap_[k], dap0, ap_[k + 1], dap1)};
}

std::pair<double, double> WolffProfile::eval_anchored(std::size_t anchor, double t) const {
    State y{a_[anchor], ap_[anchor]};
    const double dt = (t - t_[anchor]) / kAnchoredSubsteps;
    if (dt == 0.0) return {y[0], y[1]};
    for (int i = 0; i < kAnchoredSubsteps; ++i) y = dopri_step(y, dt, p_);
    return {y[0], y[1]};
}

WolffProfile integrate_wolff_orbit(double p, double amplitude, double tol) {
    if (!(p > 1.0) || !std::isfinite(p)) throw UsageError("exponent p must satisfy 1 < p < infinity");
    if (!(amplitude > 0.0)) throw UsageError("initial amplitude must be positive");
    if (!(tol > 0.0)) throw UsageError("tolerance must be positive");

    WolffProfile prof;
    prof.p_ = p;
    State y{amplitude, 0.0};
    double t = 0.0;
    double h = 1e-3;
    prof.t_.push_back(0.0);
    prof.a_.push_back(y[0]);
    prof.ap_.push_back(y[1]);
    bool found = false;
    const double atol = tol * amplitude;
    while (t < kMaxTime) {
        h = std::min(h, kMaxStep);
        State err{};
        const State yn = dopri_step(y, h, p, &err);
        double en = 0.0;
        for (int i = 0; i < 2; ++i) {
            en = std::max(en, std::abs(err[i]) / (atol + tol * std::max(std::abs(y[i]), std::abs(yn[i]))));
        }
        if (en > 1.0) {
            h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
            continue;
        }
        if (y[1] > 0.0 && yn[1] <= 0.0 && yn[0] > 0.0) {
            // first return to {a' = 0, a > 0}: bisect the crossing inside this step
            double lo = 0.0, hi = h;
            for (int it = 0; it < 200 && hi - lo > 1e-15 * (t + h); ++it) {
                const double mid = 0.5 * (lo + hi);
                (dopri_step(y, mid, p)[1] > 0.0 ? lo : hi) = mid;
            }
            const double tau = 0.5 * (lo + hi);
            const State ye = dopri_step(y, tau, p);
            prof.t_.push_back(t + tau);
            prof.a_.push_back(ye[0]);
            prof.ap_.push_back(ye[1]);
            found = true;
            break;
        }
        t += h;
        y = yn;
        prof.t_.push_back(t);
        prof.a_.push_back(y[0]);
        prof.ap_.push_back(y[1]);
        h *= std::min(5.0, std::max(0.2, en > 0.0 ? 0.9 * std::pow(en, -0.2) : 5.0));
    }
    if (!found) throw PeriodNotFound("no return to a' = 0 with a > 0 before t = 100");

    prof.period_ = prof.t_.back();
    prof.closure_defect_ = std::abs(prof.a_.back() - amplitude) + std::abs(prof.ap_.back());

    std::vector<double> gx, gw;
    gauss_legendre(5, gx, gw);
    double k_int = 0.0, mean = 0.0, max_a = 0.0, interp = 0.0;
    for (std::size_t k = 0; k + 1 < prof.t_.size(); ++k) {
        const double t0 = prof.t_[k];
        const double dt = prof.t_[k + 1] - t0;
        for (std::size_t q = 0; q < gx.size(); ++q) {
            const auto [a, ap] = prof.eval(t0 + 0.5 * dt * (1.0 + gx[q]));
            k_int += 0.5 * dt * gw[q] * std::pow(a * a + ap * ap, 0.5 * p);
            mean += 0.5 * dt * gw[q] * a;
        }
        for (int s = 0; s <= 8; ++s) max_a = std::max(max_a, std::abs(prof.eval(t0 + dt * s / 8.0).first));
        const auto mid = prof.eval(t0 + 0.5 * dt);
        const State direct = dopri_step({prof.a_[k], prof.ap_[k]}, 0.5 * dt, p);
        interp = std::max({interp, std::abs(mid.first - direct[0]), std::abs(mid.second - direct[1])});
    }
    prof.K_ = k_int / prof.period_;
    prof.mean_defect_ = std::abs(mean);
    prof.max_abs_a_ = max_a;
    prof.interpolation_error_ = interp;

    if (prof.closure_defect_ > 1e-8 * amplitude) {
        std::ostringstream msg;
        msg << "closure defect " << prof.closure_defect_ << " exceeds 1e-8 at tol " << tol;
        throw ToleranceNotMet(msg.str());
    }
    return prof;
}

WolffProfile solve_profile(double p, double tol) {
    if (!(tol > 0.0 && tol <= 1e-6)) throw UsageError("tolerance must satisfy 0 < tol <= 1e-6");
    return integrate_wolff_orbit(p, 1.0, tol);
}

// ---------------------------------------------------------------------------
// Cutoff and c_p

double CutoffSpec::derivative(double r, int k) const {
    r = std::abs(r);
    if (k < 0 || k > 3) throw UsageError("cutoff derivatives are available for orders 0..3");
    if (kind == Kind::Indicator) return (k == 0 && r <= 1.0) ? 1.0 : 0.0;
    if (r < 0.5) return k == 0 ? 1.0 : 0.0;
    if (r >= 1.0) return 0.0;
    const double s = 2.0 * (r - 0.5);
    const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s, s6 = s5 * s, s7 = s6 * s;
    switch (k) {
    case 0:
        return 1.0 - (35 * s4 - 84 * s5 + 70 * s6 - 20 * s7);
    case 1:
        return -2.0 * (140 * s3 - 420 * s4 + 420 * s5 - 140 * s6);
    case 2:
        return -4.0 * (420 * s2 - 1680 * s3 + 2100 * s4 - 840 * s5);
    default:
        return -8.0 * (840 * s - 5040 * s2 + 8400 * s3 - 4200 * s4);
    }
}

std::string CutoffSpec::id() const { return kind == Kind::Indicator ? "indicator" : "smoothstep7"; }

CutoffSpec CutoffSpec::from_id(const std::string& id) {
    if (id == "smoothstep7") return {Kind::Smoothstep7};
    if (id == "indicator") return {Kind::Indicator};
    throw UsageError("unknown cutoff '" + id + "'");
}

double constant_cp(const WolffProfile& profile, const CutoffSpec& cutoff, int d) {
    if (d != 2) throw UsageError("c_p is only implemented for d = 2");
    const double p = profile.p();
    double integral = 0.0;
    if (cutoff.kind == CutoffSpec::Kind::Indicator) {
        integral = 2.0;
    } else {
        using boost::math::quadrature::gauss_kronrod;
        const auto f = [&](double r) { return std::pow(cutoff(r), p); };
        const double tail = gauss_kronrod<double, 31>::integrate(f, 0.5, 1.0, 15, 1e-13);
        integral = 2.0 * (0.5 + tail);
    }
    return profile.K() / p * integral;
}

// ---------------------------------------------------------------------------
// h and v_M

double eval_h(const WolffProfile& profile, const Vec2& y) { return std::exp(-y.y()) * profile.a(y.x()); }

OscillatingDatum OscillatingDatum::make(const BoundaryFrame& frame, double M, std::shared_ptr<const WolffProfile> profile,
                                        CutoffSpec cutoff, double N) {
    if (!profile) throw UsageError("oscillating datum needs a profile");
    if (!(M >= 1.0)) throw UsageError("M must be >= 1");
    if (N == 0.0) N = M * M;
    if (N < M * M * (1.0 - 1e-12)) throw UsageError("N must satisfy N >= M^2");
    OscillatingDatum d;
    d.frame = frame;
    d.M = M;
    d.N = N;
    d.cutoff = cutoff;
    d.profile = std::move(profile);
    return d;
}

std::string OscillatingDatum::key() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "vM|x0=%.17g,%.17g|M=%.17g|N=%.17g|p=%.17g|amp=%.17g|lambda=%.17g|%s",
                  frame.base.x(), frame.base.y(), M, N, profile->p(), profile->amplitude(), profile->period(),
                  cutoff.id().c_str());
    return buf;
}

double eval_vM(const OscillatingDatum& datum, const Domain& domain, const Vec2& x) {
    const Vec2 y = datum.frame.to_frame(x);
    const double r = datum.M * y.norm();
    if (r >= 1.0) return 0.0;
    const double depth = domain.rho(x);
    return std::exp(-datum.N * depth) * datum.profile->a(datum.N * y.x()) * datum.cutoff(r);
}

double residual_p_laplace_h(const WolffProfile& profile, const Vec2& y, double step) {
    if (!(step > 0.0) || !(y.y() > 2.0 * step)) throw UsageError("residual stencil needs y_2 > 2 * step > 0");
    const std::size_t anchor = profile.anchor_for(y.x());
    const double t_center = profile.wrap(y.x());
    const double p = profile.p();
    const auto h = [&](const Vec2& z) {
        return std::exp(-z.y()) * profile.eval_anchored(anchor, t_center + (z.x() - y.x())).first;
    };
    const Vec2 e1(step, 0.0), e2(0.0, step);
    const auto grad = [&](const Vec2& z) -> Vec2 {
        return {(h(z + e1) - h(z - e1)) / (2 * step), (h(z + e2) - h(z - e2)) / (2 * step)};
    };
    const auto flux = [&](const Vec2& z) -> Vec2 {
        const Vec2 g = grad(z);
        return std::pow(g.norm(), p - 2.0) * g;
    };
    if (grad(y).norm() < 1e-12) throw DegenerateGradient("|grad h| vanishes at the stencil center");
    return (flux(y + e1).x() - flux(y - e1).x()) / (2 * step) + (flux(y + e2).y() - flux(y - e2).y()) / (2 * step);
}

void write_profile_csv(std::ostream& out, const WolffProfile& profile, const CutoffSpec& cutoff, double cp) {
    const auto prec = out.precision(17);
    out << "# p = " << profile.p() << '\n';
    out << "# lambda = " << profile.period() << '\n';
    out << "# K = " << profile.K() << '\n';
    out << "# c_p = " << cp << " (cutoff " << cutoff.id() << ")\n";
    out << "t,a,ap\n";
    for (std::size_t k = 0; k < profile.times().size(); ++k) {
        out << profile.times()[k] << ',' << profile.a_samples()[k] << ',' << profile.ap_samples()[k] << '\n';
    }
    out.precision(prec);
}

} // namespace pbd
