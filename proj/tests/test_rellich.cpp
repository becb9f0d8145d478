#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pbd/errors.hpp"
#include "pbd/rellich.hpp"

using namespace pbd;

namespace {

// integral of exp(-x1) over the unit disk: 2 pi I_1(1)
const double kDiskExpIntegral = 2.0 * M_PI * std::cyl_bessel_i(1.0, 1.0);

struct PipelineRun {
    double rhs_e1 = 0.0;
    double rhs_e2 = 0.0;
    double lhs_e1 = 0.0;
    double lhs_e2 = 0.0;
};

PipelineRun rellich_pipeline(const Conductivity& gamma, const BoundaryDatum& v, double p, double h) {
    SolverConfig cfg;
    cfg.p = p;
    MeasurementOptions mo;
    mo.h = h;
    const DNMeasurement meas(build_disk_domain(), gamma, cfg, mo);
    GradientFieldOptions fo;
    fo.probe.throw_on_divergence = false;
    const RellichCheck e1 = rellich_identity_check(meas, v, Vec2::UnitX(), h, fo);
    const RellichCheck e2 = rellich_identity_check(meas, v, Vec2::UnitY(), h, fo);
    PipelineRun r;
    r.rhs_e1 = e1.rhs.value;
    r.rhs_e2 = e2.rhs.value;
    r.lhs_e1 = e1.lhs;
    r.lhs_e2 = e2.lhs;
    EXPECT_NEAR(e1.residual, std::abs(e1.lhs - e1.rhs.value) / std::max(std::abs(e1.lhs), 0.1), 1e-15);
    return r;
}

double residual(double lhs, double rhs) { return std::abs(lhs - rhs) / std::max(std::abs(lhs), 0.1); }

const BoundaryDatum kManufactured = BoundaryDatum::smooth("exp", [](const Vec2& x) { return std::exp(-x.x()); });

// Closed-form boundary fields of the manufactured pair on the unit circle.
struct ManufacturedFields {
    SampledScalar gamma, strong;
    SampledVector grad;
};

ManufacturedFields manufactured_fields(const CurveQuadrature& q, double p) {
    ManufacturedFields f;
    f.gamma.points = f.strong.points = f.grad.points = q.points;
    for (const Vec2& x : q.points) {
        f.gamma.values.push_back(std::exp((p - 1.0) * x.x()));
        f.grad.values.push_back(Vec2(-std::exp(-x.x()), 0.0));
        f.strong.values.push_back(-x.x());
    }
    return f;
}

} // namespace

TEST(Quadrature, WholeCircle) {
    const Domain disk = build_disk_domain();
    const CurveQuadrature q = curve_quadrature(disk, 0.05, 3);
    double len = 0.0, x2 = 0.0;
    Vec2 nu = Vec2::Zero();
    for (std::size_t k = 0; k < q.size(); ++k) {
        len += q.weights[k];
        x2 += q.weights[k] * q.points[k].x() * q.points[k].x();
        nu += q.weights[k] * q.normals[k];
        EXPECT_NEAR(q.points[k].norm(), 1.0, 1e-12);
    }
    EXPECT_NEAR(len, 2.0 * M_PI, 1e-12);
    EXPECT_NEAR(x2, M_PI, 1e-10);
    EXPECT_LE(nu.norm(), 1e-12);
}

TEST(Quadrature, Arc) {
    const Domain disk = build_disk_domain();
    const Vec2 x0(0.0, -1.0);
    const double r = 0.3;
    const CurveQuadrature q = arc_quadrature(disk, x0, r, 0.01, 3);
    double len = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        len += q.weights[k];
        EXPECT_LE((q.points[k] - x0).norm(), r + 1e-12);
    }
    EXPECT_NEAR(len, 4.0 * std::asin(0.5 * r), 1e-12);
    EXPECT_GE(q.size(), 3u * 30u);
    double whole = 0.0;
    for (double w : arc_quadrature(disk, x0, 5.0, 0.05).weights) whole += w;
    EXPECT_NEAR(whole, 2.0 * M_PI, 1e-12);
    EXPECT_THROW(arc_quadrature(disk, Vec2(0.0, 0.0), 0.3, 0.01), NotOnBoundary);
}

TEST(EnergyScaling, Examples) {
    EXPECT_DOUBLE_EQ(energy_scaling(5.0, 10.0, 100.0, 2, 2.0), 0.5);
    EXPECT_DOUBLE_EQ(energy_scaling(5.0, 1.0, 1.0, 2, 3.0), 5.0);
    EXPECT_DOUBLE_EQ(energy_scaling(64.0, 4.0, 16.0, 2, 3.0), 1.0);
    EXPECT_DOUBLE_EQ(energy_scaling(3.0 * 7.0, 4.0, 16.0, 2, 3.0), 3.0 * energy_scaling(7.0, 4.0, 16.0, 2, 3.0));
    EXPECT_THROW(energy_scaling(1.0, 0.5, 1.0, 2, 3.0), UsageError);
}

TEST(RellichRhs, LinearSolutionGivesZero) {
    const Domain disk = build_disk_domain();
    const CurveQuadrature q = curve_quadrature(disk, 0.05, 3);
    const Vec2 beta(0.7, -0.4);
    for (double p : {2.0, 3.0}) {
        SampledScalar gam{q.points, std::vector<double>(q.size(), 1.0)};
        SampledScalar strong{q.points, {}};
        SampledVector grad{q.points, std::vector<Vec2>(q.size(), beta)};
        for (const Vec2& nu : q.normals) strong.values.push_back(std::pow(beta.norm(), p - 2.0) * beta.dot(nu));
        EXPECT_LE(std::abs(rellich_rhs(gam, strong, grad, Vec2(std::cos(0.3), std::sin(0.3)), q, p)), 1e-12);
    }
}

TEST(RellichRhs, ManufacturedClosedFormFields) {
    const Domain disk = build_disk_domain();
    const CurveQuadrature q = curve_quadrature(disk, 0.05, 3);
    for (double p : {2.0, 3.0}) {
        const auto f = manufactured_fields(q, p);
        EXPECT_NEAR(rellich_rhs(f.gamma, f.strong, f.grad, Vec2::UnitX(), q, p), (p - 1.0) * kDiskExpIntegral, 1e-10);
        EXPECT_NEAR(rellich_rhs(f.gamma, f.strong, f.grad, Vec2::UnitY(), q, p), 0.0, 1e-12);
    }
}

TEST(RellichRhs, LinearInAlpha) {
    const Domain disk = build_disk_domain();
    const CurveQuadrature q = curve_quadrature(disk, 0.05, 3);
    const auto f = manufactured_fields(q, 3.0);
    const Vec2 a1(std::cos(0.4), std::sin(0.4)), a2(std::cos(2.1), std::sin(2.1));
    const double r1 = rellich_rhs(f.gamma, f.strong, f.grad, a1, q, 3.0);
    const double r2 = rellich_rhs(f.gamma, f.strong, f.grad, a2, q, 3.0);
    const Vec2 s = a1 + a2;
    const double r12 = rellich_rhs(f.gamma, f.strong, f.grad, s.normalized(), q, 3.0) * s.norm();
    EXPECT_NEAR(r12, r1 + r2, 1e-10);
    EXPECT_EQ(rellich_rhs(f.gamma, f.strong, f.grad, -a1, q, 3.0), -r1);
}

TEST(RellichRhs, CriticalSamplesAndMismatch) {
    const Domain disk = build_disk_domain();
    const CurveQuadrature q = curve_quadrature(disk, 0.05, 3);
    auto f = manufactured_fields(q, 2.0);
    const RellichTerms all = rellich_rhs_terms(f.gamma, f.strong, f.grad, Vec2::UnitX(), q, 2.0);
    EXPECT_EQ(all.critical_points, 0u);
    const RellichTerms cut = rellich_rhs_terms(f.gamma, f.strong, f.grad, Vec2::UnitX(), q, 2.0, 0.1);
    double dropped = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < q.size(); ++k) {
        if (std::abs(f.strong.values[k]) <= 0.1) {
            dropped += q.weights[k] * f.grad.values[k].x() * f.strong.values[k];
            ++n;
        }
    }
    EXPECT_EQ(cut.critical_points, n);
    EXPECT_GT(n, 0u);
    EXPECT_NEAR(cut.transport_term, all.transport_term - dropped, 1e-12);
    EXPECT_DOUBLE_EQ(cut.flux_term, all.flux_term);

    auto shifted = f;
    shifted.strong.points[3] += Vec2(1e-6, 0.0);
    EXPECT_THROW(rellich_rhs(shifted.gamma, shifted.strong, shifted.grad, Vec2::UnitX(), q, 2.0), SamplingMismatch);
    shifted = f;
    shifted.gamma.values.pop_back();
    EXPECT_THROW(rellich_rhs(shifted.gamma, shifted.strong, shifted.grad, Vec2::UnitX(), q, 2.0), SamplingMismatch);
    EXPECT_THROW(rellich_rhs(f.gamma, f.strong, f.grad, Vec2(1.0, 1.0), q, 2.0), UsageError);
}

TEST(RellichLhs, Examples) {
    const Domain disk = build_disk_domain();
    const auto mesh = std::make_shared<const Mesh>(generate_mesh(disk, 0.02));
    const double p = 3.0;
    const auto gam = conductivity_preset("manufactured", p);
    SolverConfig cfg;
    cfg.p = p;
    const ForwardSolution sol = solve_dirichlet(mesh, gam, kManufactured.value, cfg, &disk);
    EXPECT_NEAR(rellich_lhs_direct(*mesh, sol, gam.grad, Vec2::UnitX()) / (2.0 * kDiskExpIntegral), 1.0, 0.01);
    EXPECT_LE(std::abs(rellich_lhs_direct(*mesh, sol, gam.grad, Vec2::UnitY())), 1e-12);
    const auto c = Conductivity::constant(2.0);
    EXPECT_EQ(rellich_lhs_direct(*mesh, sol, c.grad, Vec2::UnitX()), 0.0);
}

TEST(RellichIdentity, ManufacturedPipeline) {
    for (double p : {2.0, 3.0}) {
        const auto gam = conductivity_preset("manufactured", p);
        const PipelineRun coarse = rellich_pipeline(gam, kManufactured, p, 0.02);
        EXPECT_NEAR(coarse.rhs_e1 / ((p - 1.0) * kDiskExpIntegral), 1.0, 0.02) << p;
        EXPECT_LE(residual(coarse.lhs_e1, coarse.rhs_e1), 0.05) << p;
        EXPECT_LE(residual(coarse.lhs_e2, coarse.rhs_e2), 0.05) << p;
    }
}

TEST(RellichIdentity, ResidualDecreasesUnderRefinement) {
    const double p = 3.0;
    const auto gam = conductivity_preset("manufactured", p);
    const PipelineRun coarse = rellich_pipeline(gam, kManufactured, p, 0.02);
    const PipelineRun fine = rellich_pipeline(gam, kManufactured, p, 0.01);
    EXPECT_LT(residual(fine.lhs_e1, fine.rhs_e1), residual(coarse.lhs_e1, coarse.rhs_e1));
}

TEST(RellichIdentity, RandomSmoothPairs) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> coef(-1.0, 1.0), base(1.0, 1.5), slope(-0.3, 0.3);
    const double ps[] = {1.5, 3.0, 4.0};
    for (int trial = 0; trial < 3; ++trial) {
        const double p = ps[trial];
        const Conductivity gam = trial == 1 ? Conductivity::exponential(slope(rng))
                                            : Conductivity::affine(base(rng), Vec2(slope(rng), slope(rng)));
        const double a = coef(rng), b = coef(rng), c = coef(rng), d = coef(rng);
        const auto v = BoundaryDatum::smooth("random" + std::to_string(trial), [=](const Vec2& x) {
            return a * x.x() + b * x.y() + c * x.x() * x.y() + d * (x.x() * x.x() - x.y() * x.y());
        });
        const PipelineRun r = rellich_pipeline(gam, v, p, 0.02);
        EXPECT_LE(residual(r.lhs_e1, r.rhs_e1), 0.05) << trial;
        EXPECT_LE(residual(r.lhs_e2, r.rhs_e2), 0.05) << trial;
    }
}

TEST(BoundaryGradient, ManufacturedAndTangential) {
    SolverConfig cfg;
    cfg.p = 3.0;
    MeasurementOptions mo;
    mo.h = 0.02;
    const auto gam = conductivity_preset("manufactured", 3.0);
    const DNMeasurement meas(build_disk_domain(), gam, cfg, mo);
    const auto g = [&](const Vec2& x) { return gam(x); };
    GradientFieldOptions fo;
    fo.probe.abs_floor = 0.1; // the flux -x1 vanishes at (0, 1)
    const auto f = boundary_gradient_field(meas, kManufactured, g, {Vec2(1.0, 0.0), Vec2(0.0, 1.0)}, fo);
    const double e = std::exp(-1.0);
    EXPECT_NEAR(f.gradient.values[0].x() / -e, 1.0, 0.03);
    EXPECT_LE(std::abs(f.gradient.values[0].y()), 0.03 * e);
    EXPECT_LE(std::abs(f.tangential[0]), 1e-9);
    EXPECT_NEAR(std::abs(f.tangential[1]), 1.0, 1e-3);
    EXPECT_NEAR(f.gradient.values[1].x(), -1.0, 1e-3);
    EXPECT_FALSE(f.critical[0]);
    EXPECT_LE(f.max_root_residual, 1e-10);

    const auto c = BoundaryDatum::smooth("c", [](const Vec2&) { return 0.3; });
    const auto z = boundary_gradient_field(meas, c, g, {Vec2(1.0, 0.0), Vec2(0.0, -1.0)});
    for (const Vec2& gv : z.gradient.values) EXPECT_EQ(gv.norm(), 0.0);
}

TEST(PeriodicSpline, InterpolatesTrigonometricTrace) {
    std::vector<double> nodes;
    const int n = 16;
    for (int k = 0; k < n; ++k) nodes.push_back(1.0 + 0.3 * std::cos(2.0 * M_PI * k / n));
    const PeriodicBoundarySpline s(Vec2::Zero(), nodes);
    for (int k = 0; k < n; ++k) EXPECT_NEAR(s.at_angle(2.0 * M_PI * k / n), nodes[k], 1e-14);
    for (double t = -4.0; t < 4.0; t += 0.173) {
        EXPECT_NEAR(s.at_angle(t), 1.0 + 0.3 * std::cos(t), 1e-4);
        EXPECT_NEAR(s.at_angle(t), s.at_angle(t + 2.0 * M_PI), 1e-12);
    }
    EXPECT_NEAR(s(Vec2(0.0, -2.0)), 1.0, 1e-4);
    EXPECT_THROW(PeriodicBoundarySpline(Vec2::Zero(), {1.0, 2.0}), UsageError);
}

// Desk-scale oscillating data: pp = 40 keeps these solves at a few seconds.
class Oscillating : public ::testing::Test {
protected:
    static void SetUpTestSuite() { profile_ = std::make_shared<const WolffProfile>(solve_profile(3.0)); }
    static std::shared_ptr<const WolffProfile> profile_;

    static DNMeasurement measurement(const std::string& preset) {
        SolverConfig cfg;
        cfg.p = 3.0;
        return DNMeasurement(build_disk_domain(), conductivity_preset(preset, 3.0), cfg, {});
    }
    static ReconstructionOptions options() {
        ReconstructionOptions o;
        o.oscillation.points_per_period = 40.0;
        return o;
    }
};
std::shared_ptr<const WolffProfile> Oscillating::profile_;

TEST_F(Oscillating, RecoverGammaConstantConductivity) {
    const auto meas = measurement("constant");
    const Domain disk = build_disk_domain();
    const auto est = recover_gamma_at(meas, disk, Vec2(0.0, -1.0), profile_, {3.0, 4.0, 6.0, 8.0}, options().oscillation);
    ASSERT_EQ(est.size(), 4u);
    const double first = std::abs(est.front().gamma_hat - 1.0);
    const double last = std::abs(est.back().gamma_hat - 1.0);
    EXPECT_LE(last, 0.1);
    EXPECT_LE(last, first);
    for (const auto& e : est) {
        EXPECT_EQ(e.N, e.M * e.M);
        EXPECT_NEAR(e.cp, constant_cp(*profile_, {}, 2), 1e-15);
    }
    EXPECT_THROW(recover_gamma_at(meas, disk, Vec2(0.0, -1.0), profile_, {4.0, 3.0}), UsageError);
}

TEST_F(Oscillating, RecoverGammaAffine) {
    const auto meas = measurement("affine_plus");
    const auto est = recover_gamma_at(meas, build_disk_domain(), Vec2(0.0, -1.0), profile_, {8.0}, options().oscillation);
    EXPECT_NEAR(est.back().gamma_hat, 1.0, 0.1);
}

TEST_F(Oscillating, GradientReconstructionSignsAndExport) {
    const auto meas = measurement("affine");
    const Domain disk = build_disk_domain();
    const auto truth = GroundTruth::of(meas.oracle_conductivity());
    const auto plus = recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), Vec2::UnitX(), profile_, {3.0}, options(), truth);
    const auto minus = recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), -Vec2::UnitX(), profile_, {3.0}, options(), truth);
    ASSERT_TRUE(plus.rows[0].ok) << plus.rows[0].error;
    EXPECT_EQ(minus.rows[0].dgamma_hat, -plus.rows[0].dgamma_hat);
    EXPECT_EQ(minus.rows[0].gamma_hat, plus.rows[0].gamma_hat);
    EXPECT_NEAR(plus.true_dgamma, 0.3, 1e-15);
    EXPECT_NEAR(plus.true_gamma, 0.8, 1e-15);
    EXPECT_NEAR(plus.rows[0].err_dgamma,
                std::abs(plus.rows[0].dgamma_hat - 0.3) / std::hypot(0.3, 0.2), 1e-15);

    std::ostringstream js, cs;
    write_reconstruction_json(js, plus);
    const auto j = nlohmann::json::parse(js.str());
    EXPECT_EQ(j["gamma_boundary_mode"], "oracle");
    EXPECT_EQ(j["rows"].size(), 1u);
    EXPECT_DOUBLE_EQ(j["rows"][0]["dgamma_hat"].get<double>(), plus.rows[0].dgamma_hat);
    EXPECT_DOUBLE_EQ(j["rows"][0]["N"].get<double>(), 9.0);
    write_reconstruction_csv(cs, plus);
    EXPECT_EQ(cs.str().rfind("M,N,gamma_hat,dgamma_hat,err_gamma,err_dgamma\n3,9,", 0), 0u);

    EXPECT_THROW(recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), Vec2::UnitX(), profile_, {3.0}, options()), UsageError);
    EXPECT_THROW(recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), Vec2(1.0, 1.0), profile_, {3.0}, options(), truth),
                 UsageError);
    EXPECT_THROW(recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), Vec2::UnitX(), profile_, {}, options(), truth),
                 UsageError);
}

TEST_F(Oscillating, ConstantConductivityHasNoGradient) {
    const auto meas = measurement("constant");
    const auto r = recover_grad_gamma(meas, build_disk_domain(), Vec2(0.0, -1.0), Vec2::UnitX(), profile_, {8.0},
                                      options(), GroundTruth::of(meas.oracle_conductivity()));
    ASSERT_TRUE(r.rows[0].ok) << r.rows[0].error;
    EXPECT_LE(std::abs(r.final_dgamma), 0.1);
}

TEST_F(Oscillating, TangentialConsistencyRecoveredMode) {
    // two routes to the tangential derivative at x0 = (0, -1), tangent e1
    const auto meas = measurement("affine_plus");
    const Domain disk = build_disk_domain();
    ReconstructionOptions o = options();
    o.mode = GammaBoundaryMode::recovered;
    o.gamma_grid_M = 4.0;
    const auto r = recover_grad_gamma(meas, disk, Vec2(0.0, -1.0), Vec2::UnitX(), profile_, {8.0}, o);
    ASSERT_TRUE(r.rows[0].ok) << r.rows[0].error;
    ASSERT_EQ(r.gamma_grid.size(), 16u);
    const PeriodicBoundarySpline trace(disk.center, r.gamma_grid);
    // d/ds along the unit circle at angle -pi/2 in the direction of e1
    const double step = 1e-4;
    const double dtrace = (trace.at_angle(-0.5 * M_PI + step) - trace.at_angle(-0.5 * M_PI - step)) / (2.0 * step);
    EXPECT_NEAR(r.final_dgamma / dtrace, 1.0, 0.25);
}
