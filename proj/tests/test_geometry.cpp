#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "pbd/errors.hpp"
#include "pbd/geometry.hpp"

using namespace pbd;

namespace {

// Exact area of the polygon spanned by the (circle) boundary vertices.
double inscribed_polygon_area(const Mesh& mesh) {
    double s = 0.0;
    for (const auto& e : mesh.boundary_edges()) {
        const Vec2& a = mesh.vertex(e.vertices[0]);
        const Vec2& b = mesh.vertex(e.vertices[1]);
        s += 0.5 * (a.x() * b.y() - a.y() * b.x());
    }
    return s;
}

} // namespace

TEST(Disk, DefiningFunctionValues) {
    const Domain disk = build_disk_domain();
    EXPECT_DOUBLE_EQ(disk.rho(Vec2(0.0, 0.0)), 0.5);
    EXPECT_DOUBLE_EQ(disk.rho(Vec2(1.0, 0.0)), 0.0);
    EXPECT_TRUE((disk.outward_normal(Vec2(1.0, 0.0)) - Vec2(1.0, 0.0)).norm() < 1e-15);
    EXPECT_DOUBLE_EQ(disk.grad_rho(Vec2(0.0, 1.0)).norm(), 1.0);
    EXPECT_NEAR(disk.boundary_point_at_angle(0.3).norm(), 1.0, 1e-14);
}

TEST(Frame, BottomPointIsIdentity) {
    const Domain disk = build_disk_domain();
    const BoundaryFrame f = boundary_frame(disk, Vec2(0.0, -1.0));
    EXPECT_TRUE((f.normal - Vec2(0.0, -1.0)).norm() < 1e-15);
    EXPECT_TRUE((f.rotation - Mat2::Identity()).norm() < 1e-15);
}

TEST(Frame, RightPointRotatesNormalDown) {
    const Domain disk = build_disk_domain();
    const BoundaryFrame f = boundary_frame(disk, Vec2(1.0, 0.0));
    EXPECT_TRUE((f.normal - Vec2(1.0, 0.0)).norm() < 1e-15);
    EXPECT_TRUE((f.rotation * Vec2(1.0, 0.0) - Vec2(0.0, -1.0)).norm() < 1e-15);
    EXPECT_NEAR(f.rotation.determinant(), 1.0, 1e-15);
}

TEST(Frame, TopPointNormalPushesToMinusE2) {
    const Domain disk = build_disk_domain();
    const BoundaryFrame f = boundary_frame(disk, Vec2(0.0, 1.0));
    EXPECT_LE((f.rotation * f.normal - Vec2(0.0, -1.0)).norm(), 1e-12);
}

TEST(Frame, RejectsInteriorPoint) {
    const Domain disk = build_disk_domain();
    EXPECT_THROW(boundary_frame(disk, Vec2(0.0, -0.9)), NotOnBoundary);
}

TEST(Frame, RejectsDegenerateGradient) {
    Domain flat = build_disk_domain();
    flat.rho = [](const Vec2& x) { return 0.05 * (1.0 - x.squaredNorm()); };
    flat.grad_rho = [](const Vec2& x) -> Vec2 { return -0.1 * x; };
    EXPECT_THROW(boundary_frame(flat, Vec2(1.0, 0.0)), DegenerateNormal);
}

TEST(Frame, RoundTripAndInvariantsOnRandomBoundaryPoints) {
    const Domain disk = build_disk_domain();
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> coord(-2.0, 2.0);
    for (int i = 0; i < 200; ++i) {
        const Vec2 x0 = disk.boundary_point_at_angle(angle(rng));
        const BoundaryFrame f = boundary_frame(disk, x0);
        EXPECT_NEAR(f.normal.norm(), 1.0, 1e-12);
        EXPECT_LE((f.rotation.transpose() * f.rotation - Mat2::Identity()).norm(), 1e-12);
        EXPECT_LE(f.to_frame(x0).norm(), 1e-12);
        EXPECT_LE((f.rotation * f.normal - Vec2(0.0, -1.0)).norm(), 1e-12);
        const Vec2 x(coord(rng), coord(rng));
        EXPECT_LE((f.from_frame(f.to_frame(x)) - x).norm(), 1e-12);
    }
}

TEST(Flatten, BasePointAndInteriorPoint) {
    const Domain disk = build_disk_domain();
    const BoundaryFrame f = boundary_frame(disk, Vec2(0.0, -1.0));
    EXPECT_LE(flatten_map(disk, f, Vec2(0.0, -1.0)).norm(), 1e-15);
    const Vec2 y = flatten_map(disk, f, Vec2(0.0, -0.9));
    EXPECT_NEAR(y.x(), 0.0, 1e-15);
    EXPECT_NEAR(y.y(), 0.095, 1e-15);
}

TEST(Flatten, BoundaryPointsHaveZeroDepth) {
    const Domain disk = build_disk_domain();
    const Vec2 x0 = disk.boundary_point_at_angle(1.1);
    const BoundaryFrame f = boundary_frame(disk, x0);
    for (double da : {-0.1, -0.01, 0.02, 0.1}) {
        const Vec2 x = disk.boundary_point_at_angle(1.1 + da);
        EXPECT_LE(std::abs(flatten_map(disk, f, x).y()), 1e-10);
    }
}

TEST(Flatten, JacobianAtBaseIsIdentity) {
    const Domain disk = build_disk_domain();
    for (double theta : {0.0, 0.7, 2.0, 4.5}) {
        const Vec2 x0 = disk.boundary_point_at_angle(theta);
        const BoundaryFrame f = boundary_frame(disk, x0);
        const double s = 1e-6;
        Mat2 jac;
        const Vec2 t = f.tangent();
        const Vec2 inward = -f.normal;
        // derivatives in frame coordinates: columns along R^T e_1 and R^T e_2
        jac.col(0) = (flatten_map(disk, f, x0 + s * t) - flatten_map(disk, f, x0 - s * t)) / (2 * s);
        jac.col(1) = (flatten_map(disk, f, x0 + s * inward) - flatten_map(disk, f, x0 - s * inward)) / (2 * s);
        EXPECT_LE((jac - Mat2::Identity()).cwiseAbs().maxCoeff(), 5e-6) << "theta = " << theta;
    }
}

TEST(MeshGen, BoundaryVerticesOnCircle) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.2);
    int nb = 0;
    for (std::size_t v = 0; v < m.num_vertices(); ++v) {
        if (!m.is_boundary_vertex(v)) continue;
        ++nb;
        EXPECT_LE(std::abs(m.vertex(v).norm() - 1.0), 1e-10);
        EXPECT_LE(std::abs(disk.rho(m.vertex(v))), 1e-10);
    }
    EXPECT_GT(nb, 20);
    EXPECT_LE(m.max_edge_length(), 0.2 * (1 + 1e-12));
}

TEST(MeshGen, FocusRefinesLocally) {
    const Domain disk = build_disk_domain();
    const Vec2 focus(1.0, 0.0);
    const Mesh m = generate_mesh(disk, 0.2, MeshFocus{focus, 0.02, 0.3});
    double local_max = 0.0;
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        const auto& tri = m.triangle(t);
        for (int k = 0; k < 3; ++k) {
            const Vec2& a = m.vertex(tri[k]);
            const Vec2& b = m.vertex(tri[(k + 1) % 3]);
            if ((a - focus).norm() <= 0.3 || (b - focus).norm() <= 0.3) local_max = std::max(local_max, (a - b).norm());
        }
    }
    EXPECT_LE(local_max, 0.02 * (1 + 1e-12));
    EXPECT_LE(m.max_edge_length(), 0.2 * (1 + 1e-12));
}

TEST(MeshGen, AreaMatchesInscribedPolygonAndApproachesPi) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.1);
    const double polygon = inscribed_polygon_area(m);
    EXPECT_NEAR(m.total_area(), polygon, 1e-12);
    EXPECT_LE(std::abs(m.total_area() - M_PI) / M_PI, 0.02);
}

TEST(MeshGen, ConformingPositiveAndGraded) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.1, MeshFocus{Vec2(0.0, -1.0), 0.01, 0.25});
    std::map<std::pair<int, int>, int> edge_count;
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        EXPECT_GT(m.area(t), 0.0);
        const auto& tri = m.triangle(t);
        for (int k = 0; k < 3; ++k) {
            const int a = std::min(tri[k], tri[(k + 1) % 3]);
            const int b = std::max(tri[k], tri[(k + 1) % 3]);
            ++edge_count[{a, b}];
        }
    }
    std::size_t boundary = 0;
    for (const auto& [e, c] : edge_count) {
        EXPECT_TRUE(c == 1 || c == 2);
        if (c == 1) {
            ++boundary;
            EXPECT_TRUE(m.is_boundary_vertex(e.first) && m.is_boundary_vertex(e.second));
        }
    }
    EXPECT_EQ(boundary, m.boundary_edges().size());
    // Euler characteristic of a disk
    EXPECT_EQ(static_cast<long>(m.num_vertices()) - static_cast<long>(edge_count.size()) +
                  static_cast<long>(m.num_triangles()),
              1);

    // grading: longest-edge ratio across shared edges
    std::map<std::pair<int, int>, std::vector<int>> edge_tris;
    for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        const auto& tri = m.triangle(t);
        for (int k = 0; k < 3; ++k) {
            edge_tris[{std::min(tri[k], tri[(k + 1) % 3]), std::max(tri[k], tri[(k + 1) % 3])}].push_back(static_cast<int>(t));
        }
    }
    double worst = 1.0;
    for (const auto& [e, ts] : edge_tris) {
        if (ts.size() != 2) continue;
        const double a = m.longest_edge(ts[0]);
        const double b = m.longest_edge(ts[1]);
        worst = std::max(worst, std::max(a / b, b / a));
    }
    EXPECT_LE(worst, 2.0 * (1 + 1e-9));
}

TEST(MeshGen, BoundaryNormalsAgreeWithLevelSetNormals) {
    const Domain disk = build_disk_domain();
    const double h = 0.1;
    const Mesh m = generate_mesh(disk, h);
    for (const auto& e : m.boundary_edges()) {
        const Vec2 mid = 0.5 * (m.vertex(e.vertices[0]) + m.vertex(e.vertices[1]));
        const Vec2 exact = disk.outward_normal(disk.project_to_boundary(mid));
        const double angle = std::acos(std::clamp(exact.dot(e.normal), -1.0, 1.0));
        EXPECT_LE(angle, 2.0 * h);
    }
}

TEST(MeshGen, BudgetExceeded) {
    const Domain disk = build_disk_domain();
    MeshOptions opts;
    opts.max_vertices = 200;
    EXPECT_THROW(generate_mesh(disk, 0.02, std::nullopt, opts), MeshBudgetExceeded);
    EXPECT_THROW(generate_mesh(disk, 0.1, MeshFocus{Vec2(1, 0), 0.2, 0.1}), UsageError);
}

TEST(MeshGen, SecondOrderGeometricConvergence) {
    const Domain disk = build_disk_domain();
    std::vector<double> area_err, perim_err;
    for (double h : {0.2, 0.1, 0.05}) {
        const Mesh m = generate_mesh(disk, h);
        area_err.push_back(M_PI - m.total_area());
        perim_err.push_back(2.0 * M_PI - m.perimeter());
    }
    for (int k = 0; k + 1 < 3; ++k) {
        EXPECT_GE(area_err[k] / area_err[k + 1], 3.0);
        EXPECT_LE(area_err[k] / area_err[k + 1], 5.0);
        EXPECT_GE(perim_err[k] / perim_err[k + 1], 3.0);
        EXPECT_LE(perim_err[k] / perim_err[k + 1], 5.0);
    }
}

TEST(MeshIO, TextRoundTrip) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.25, MeshFocus{Vec2(0, 1), 0.1, 0.3});
    std::stringstream ss;
    m.write(ss);
    std::string header;
    std::getline(ss, header);
    std::ostringstream expected;
    expected << "2 " << m.num_vertices() << ' ' << m.num_triangles() << ' ' << m.boundary_edges().size();
    EXPECT_EQ(header, expected.str());
    ss.seekg(0);
    const Mesh r = Mesh::read(ss);
    ASSERT_EQ(r.num_vertices(), m.num_vertices());
    ASSERT_EQ(r.num_triangles(), m.num_triangles());
    for (std::size_t v = 0; v < m.num_vertices(); ++v) EXPECT_EQ(r.vertex(v), m.vertex(v));
    for (std::size_t t = 0; t < m.num_triangles(); ++t) EXPECT_EQ(r.triangle(t), m.triangle(t));
    std::stringstream bad("3 1 1 1");
    EXPECT_THROW(Mesh::read(bad), MeshFormatError);
}

TEST(MeshQueries, LocateAndBallQuery) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.1);
    std::array<double, 3> bc{};
    const int t = m.locate(Vec2(0.1234, -0.321), &bc);
    ASSERT_GE(t, 0);
    Vec2 rebuilt = Vec2::Zero();
    for (int k = 0; k < 3; ++k) rebuilt += bc[k] * m.vertex(m.triangle(t)[k]);
    EXPECT_LE((rebuilt - Vec2(0.1234, -0.321)).norm(), 1e-12);
    EXPECT_EQ(m.locate(Vec2(1.5, 0.0)), -1);

    const Vec2 c(0.5, 0.2);
    const auto near = m.triangles_touching_ball(c, 0.15);
    std::size_t brute = 0;
    for (std::size_t s = 0; s < m.num_triangles(); ++s) {
        bool touch = false;
        for (int k : m.triangle(s)) touch = touch || (m.vertex(k) - c).norm() <= 0.15;
        brute += touch ? 1 : 0;
    }
    EXPECT_EQ(near.size(), brute);
}

TEST(BoundaryQuadrature, WeightsSumToPerimeter) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.1);
    const BoundaryQuadrature q = boundary_quadrature(m, 3);
    double sum = 0.0;
    Vec2 flux = Vec2::Zero();
    for (std::size_t i = 0; i < q.size(); ++i) {
        sum += q.weights[i];
        flux += q.weights[i] * q.normals[i];
    }
    EXPECT_NEAR(sum, m.perimeter(), 1e-12);
    EXPECT_LE(std::abs(sum - 2 * M_PI), 0.1 * 0.1);
    EXPECT_LE(flux.norm(), 1e-12);
}

TEST(BoundaryQuadrature, OrdersAgreeOnPolynomialIntegrand) {
    const Domain disk = build_disk_domain();
    const Mesh m = generate_mesh(disk, 0.2);
    auto integrate = [&](int order) {
        const BoundaryQuadrature q = boundary_quadrature(m, order);
        double s = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            const Vec2& x = q.points[i];
            s += q.weights[i] * (x.x() * x.x() * x.y() + 3.0 * x.x() - x.y() * x.y());
        }
        return s;
    };
    // Gauss-Legendre with n points is exact for degree 2n-1 along each straight edge
    EXPECT_NEAR(integrate(2), integrate(5), 1e-12);
    EXPECT_NEAR(integrate(3), integrate(4), 1e-12);
}
