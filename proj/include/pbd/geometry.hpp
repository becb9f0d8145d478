#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pbd {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

struct BoundingBox {
    Vec2 lower;
    Vec2 upper;
};

/// Smooth bounded domain Omega = { rho > 0 } described by a boundary defining
/// function with nonvanishing gradient on the zero level set. The outward
/// normal is -grad(rho)/|grad(rho)|.
///
/// Mesh generation additionally needs the domain to be star-shaped with
/// respect to `center`.
struct Domain {
    std::string name;
    int dimension = 2;
    std::function<double(const Vec2&)> rho;
    std::function<Vec2(const Vec2&)> grad_rho;
    BoundingBox box;
    Vec2 center = Vec2::Zero();

    bool contains(const Vec2& x) const { return rho(x) > 0.0; }

    /// Newton projection onto the zero level set along grad(rho).
    Vec2 project_to_boundary(const Vec2& x) const;

    /// Outward unit normal at a boundary point (no projection performed).
    Vec2 outward_normal(const Vec2& x) const;

    /// Boundary point hit by the ray from `center` in direction (cos t, sin t).
    Vec2 boundary_point_at_angle(double angle) const;
};

/// Unit disk with rho(x) = (1 - |x|^2)/2, so grad(rho) = -x and nu = x on the circle.
Domain build_disk_domain();

/// Rigid frame at a boundary point: y = R (x - x0) sends x0 to 0 and the
/// outward normal to -e_2, so the domain lies locally in { y_2 > 0 }.
struct BoundaryFrame {
    Vec2 base;
    Vec2 normal;
    Mat2 rotation;
    Vec2 translation; // -x0, applied before the rotation

    Vec2 to_frame(const Vec2& x) const { return rotation * (x + translation); }
    Vec2 from_frame(const Vec2& y) const { return rotation.transpose() * y - translation; }
    /// Unit tangent t with (t, nu) positively oriented after the rotation, i.e. R t = e_1.
    Vec2 tangent() const { return rotation.transpose() * Vec2(1.0, 0.0); }
};

inline constexpr double kBoundaryTolerance = 1e-10;

BoundaryFrame boundary_frame(const Domain& domain, const Vec2& x0);

/// f(x) = (y_1, rho(x)) with y = R (x - x0).
Vec2 flatten_map(const Domain& domain, const BoundaryFrame& frame, const Vec2& x);

/// Derivative of f along the boundary curve at the boundary point x in the
/// direction of the unit tangent, by central differences between boundary
/// points obtained by projecting x +- step * tangent.
double boundary_derivative(const Domain& domain, const std::function<double(const Vec2&)>& f, const Vec2& x,
                           const Vec2& tangent, double step = 1e-5);

struct MeshFocus {
    Vec2 point;
    double local_h;
    double radius;
};

struct MeshOptions {
    std::size_t max_vertices = 1'500'000;
    /// Linear growth rate of the size field outside the focus ball.
    double growth = 0.3;
    /// Upper bound on the longest-edge ratio between neighbouring triangles.
    double grading_ratio = 2.0;
};

struct BoundaryEdge {
    std::array<int, 2> vertices; // oriented counter-clockwise along the boundary
    int triangle;
    Vec2 normal; // outward, of the straight edge
    double length;
};

/// Conforming triangulation of a polygonal approximation of a domain. All
/// boundary vertices lie on the zero level set of rho. Immutable after
/// construction; the spatial index is built eagerly so const queries are
/// thread-safe.
class Mesh {
public:
    Mesh() = default;
    Mesh(std::vector<Vec2> vertices, std::vector<std::array<int, 3>> triangles,
         double nominal_h = 0.0, double focus_h = 0.0);

    std::size_t num_vertices() const { return vertices_.size(); }
    std::size_t num_triangles() const { return triangles_.size(); }
    const std::vector<Vec2>& vertices() const { return vertices_; }
    const Vec2& vertex(std::size_t i) const { return vertices_[i]; }
    const std::vector<std::array<int, 3>>& triangles() const { return triangles_; }
    const std::array<int, 3>& triangle(std::size_t t) const { return triangles_[t]; }
    const std::vector<BoundaryEdge>& boundary_edges() const { return boundary_edges_; }
    bool is_boundary_vertex(std::size_t i) const { return boundary_flag_[i] != 0; }
    const std::vector<char>& boundary_flags() const { return boundary_flag_; }

    double nominal_h() const { return nominal_h_; }
    double focus_h() const { return focus_h_; }

    double area(std::size_t t) const;
    Vec2 centroid(std::size_t t) const;
    double longest_edge(std::size_t t) const;
    double total_area() const;
    double perimeter() const;
    double max_edge_length() const;

    /// Longest boundary-edge length among edges with an endpoint within
    /// `radius` of x (falls back to the nearest boundary edge).
    double local_boundary_size(const Vec2& x, double radius) const;

    /// Triangle containing x (with barycentric tolerance), or -1.
    int locate(const Vec2& x, std::array<double, 3>* barycentric = nullptr) const;

    /// Triangles having at least one vertex in the closed ball B(center, radius).
    std::vector<int> triangles_touching_ball(const Vec2& center, double radius) const;

    /// Triangles sharing the vertex v (precomputed adjacency).
    const std::vector<int>& vertex_triangles(std::size_t v) const { return vertex_triangles_[v]; }

    void write(std::ostream& out) const;
    static Mesh read(std::istream& in);

private:
    void build_topology();
    void build_index();
    std::vector<int> cells_overlapping(const Vec2& lo, const Vec2& hi) const;

    std::vector<Vec2> vertices_;
    std::vector<std::array<int, 3>> triangles_;
    std::vector<BoundaryEdge> boundary_edges_;
    std::vector<char> boundary_flag_;
    std::vector<std::vector<int>> vertex_triangles_;
    double nominal_h_ = 0.0;
    double focus_h_ = 0.0;

    // uniform bucket grid over triangle bounding boxes (CSR layout)
    Vec2 grid_origin_ = Vec2::Zero();
    double grid_cell_ = 1.0;
    int grid_nx_ = 0;
    int grid_ny_ = 0;
    std::vector<int> grid_offsets_;
    std::vector<int> grid_items_;
    // vertex buckets for ball queries
    std::vector<int> vgrid_offsets_;
    std::vector<int> vgrid_items_;
};

/// Graded longest-edge-bisection mesh of a star-shaped domain. Edge lengths are
/// at most h, at most focus.local_h within focus.radius of focus.point, and the
/// size field grows linearly at options.growth outside the focus ball.
Mesh generate_mesh(const Domain& domain, double h, const std::optional<MeshFocus>& focus = std::nullopt,
                   const MeshOptions& options = {});

struct BoundaryQuadrature {
    std::vector<Vec2> points;
    std::vector<double> weights;
    std::vector<Vec2> normals; // outward normal of the carrying edge
    std::vector<int> edges;    // index into Mesh::boundary_edges()

    std::size_t size() const { return points.size(); }
};

/// Gauss-Legendre rule with `order` points on every boundary edge.
BoundaryQuadrature boundary_quadrature(const Mesh& mesh, int order);

/// Gauss-Legendre nodes and weights on [-1, 1], n in 1..5.
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

} // namespace pbd
