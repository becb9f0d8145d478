#include "pbd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "pbd/errors.hpp"

namespace pbd {

// ---------------------------------------------------------------------------
// Domain

Vec2 Domain::project_to_boundary(const Vec2& x) const {
    Vec2 y = x;
    for (int it = 0; it < 60; ++it) {
        const double r = rho(y);
        if (std::abs(r) < 1e-15) break;
        const Vec2 g = grad_rho(y);
        const double g2 = g.squaredNorm();
        if (g2 < 1e-300) throw DegenerateNormal("vanishing gradient during boundary projection");
        y -= (r / g2) * g;
    }
    return y;
}

Vec2 Domain::outward_normal(const Vec2& x) const {
    const Vec2 g = grad_rho(x);
    const double n = g.norm();
    if (n < 1e-300) throw DegenerateNormal("vanishing gradient of rho");
    return -g / n;
}

Vec2 Domain::boundary_point_at_angle(double angle) const {
    const Vec2 dir(std::cos(angle), std::sin(angle));
    double lo = 0.0;
    double hi = 1e-3;
    const double reach = 4.0 * (box.upper - box.lower).norm() + 1.0;
    while (rho(center + hi * dir) > 0.0) {
        lo = hi;
        hi *= 2.0;
        if (hi > reach) throw NotOnBoundary("ray from the domain center never leaves the domain");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        (rho(center + mid * dir) > 0.0 ? lo : hi) = mid;
    }
    return project_to_boundary(center + 0.5 * (lo + hi) * dir);
}

Domain build_disk_domain() {
    Domain d;
    d.name = "unit_disk";
    d.dimension = 2;
    d.rho = [](const Vec2& x) { return 0.5 * (1.0 - x.squaredNorm()); };
    d.grad_rho = [](const Vec2& x) -> Vec2 { return -x; };
    d.box = {Vec2(-1.0, -1.0), Vec2(1.0, 1.0)};
    d.center = Vec2::Zero();
    return d;
}

BoundaryFrame boundary_frame(const Domain& domain, const Vec2& x0) {
    const double r = domain.rho(x0);
    if (std::abs(r) > kBoundaryTolerance) {
        std::ostringstream msg;
        msg << "|rho(x0)| = " << std::abs(r) << " exceeds " << kBoundaryTolerance;
        throw NotOnBoundary(msg.str());
    }
    const Vec2 g = domain.grad_rho(x0);
    const double gn = g.norm();
    if (gn < 0.5) {
        std::ostringstream msg;
        msg << "|grad rho(x0)| = " << gn << " < 0.5";
        throw DegenerateNormal(msg.str());
    }
    BoundaryFrame f;
    f.base = x0;
    f.normal = -g / gn;
    // rows: tangent (-nu_2, nu_1) and -nu; a proper rotation with R nu = -e_2
    f.rotation << -f.normal.y(), f.normal.x(), -f.normal.x(), -f.normal.y();
    f.translation = -x0;
    return f;
}

Vec2 flatten_map(const Domain& domain, const BoundaryFrame& frame, const Vec2& x) {
    const Vec2 y = frame.to_frame(x);
    return {y.x(), domain.rho(x)};
}

double boundary_derivative(const Domain& domain, const std::function<double(const Vec2&)>& f, const Vec2& x,
                           const Vec2& tangent, double step) {
    const Vec2 fwd = domain.project_to_boundary(x + step * tangent);
    const Vec2 bwd = domain.project_to_boundary(x - step * tangent);
    return (f(fwd) - f(bwd)) / (fwd - bwd).dot(tangent);
}

// ---------------------------------------------------------------------------
// Quadrature

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    switch (n) {
    case 1:
        nodes = {0.0};
        weights = {2.0};
        break;
    case 2: {
        const double a = 1.0 / std::sqrt(3.0);
        nodes = {-a, a};
        weights = {1.0, 1.0};
        break;
    }
    case 3: {
        const double a = std::sqrt(3.0 / 5.0);
        nodes = {-a, 0.0, a};
        weights = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
        break;
    }
    case 4: {
        const double a = std::sqrt(3.0 / 7.0 - 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
        const double b = std::sqrt(3.0 / 7.0 + 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
        const double wa = (18.0 + std::sqrt(30.0)) / 36.0;
        const double wb = (18.0 - std::sqrt(30.0)) / 36.0;
        nodes = {-b, -a, a, b};
        weights = {wb, wa, wa, wb};
        break;
    }
    case 5: {
        const double a = std::sqrt(5.0 - 2.0 * std::sqrt(10.0 / 7.0)) / 3.0;
        const double b = std::sqrt(5.0 + 2.0 * std::sqrt(10.0 / 7.0)) / 3.0;
        const double wa = (322.0 + 13.0 * std::sqrt(70.0)) / 900.0;
        const double wb = (322.0 - 13.0 * std::sqrt(70.0)) / 900.0;
        nodes = {-b, -a, 0.0, a, b};
        weights = {wb, wa, 128.0 / 225.0, wa, wb};
        break;
    }
    default:
        throw UsageError("Gauss-Legendre order must be in 1..5");
    }
}

BoundaryQuadrature boundary_quadrature(const Mesh& mesh, int order) {
    std::vector<double> xi, wi;
    gauss_legendre(order, xi, wi);
    BoundaryQuadrature q;
    const auto& edges = mesh.boundary_edges();
    q.points.reserve(edges.size() * xi.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
        const Vec2& a = mesh.vertex(edges[e].vertices[0]);
        const Vec2& b = mesh.vertex(edges[e].vertices[1]);
        for (std::size_t k = 0; k < xi.size(); ++k) {
            q.points.push_back(0.5 * (1.0 - xi[k]) * a + 0.5 * (1.0 + xi[k]) * b);
            q.weights.push_back(0.5 * edges[e].length * wi[k]);
            q.normals.push_back(edges[e].normal);
            q.edges.push_back(static_cast<int>(e));
        }
    }
    return q;
}

// ---------------------------------------------------------------------------
// Mesh

namespace {

std::uint64_t edge_key(int a, int b) {
    const auto lo = static_cast<std::uint64_t>(std::min(a, b));
    const auto hi = static_cast<std::uint64_t>(std::max(a, b));
    return (lo << 32) | hi;
}

double signed_area(const Vec2& a, const Vec2& b, const Vec2& c) {
    return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

} // namespace

Mesh::Mesh(std::vector<Vec2> vertices, std::vector<std::array<int, 3>> triangles, double nominal_h,
           double focus_h)
    : vertices_(std::move(vertices)), triangles_(std::move(triangles)), nominal_h_(nominal_h),
      focus_h_(focus_h > 0.0 ? focus_h : nominal_h) {
    build_topology();
    build_index();
}

void Mesh::build_topology() {
    const int nv = static_cast<int>(vertices_.size());
    for (auto& t : triangles_) {
        for (int k : t) {
            if (k < 0 || k >= nv) throw MeshFormatError("triangle references a missing vertex");
        }
        if (signed_area(vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]) < 0.0) std::swap(t[1], t[2]);
    }
    std::unordered_map<std::uint64_t, std::array<int, 3>> edges; // count, triangle, local edge
    edges.reserve(triangles_.size() * 2);
    for (std::size_t t = 0; t < triangles_.size(); ++t) {
        for (int k = 0; k < 3; ++k) {
            auto [it, inserted] = edges.try_emplace(edge_key(triangles_[t][k], triangles_[t][(k + 1) % 3]),
                                                    std::array<int, 3>{0, static_cast<int>(t), k});
            ++it->second[0];
            if (it->second[0] > 2) throw MeshFormatError("non-manifold edge shared by more than two triangles");
        }
    }
    boundary_flag_.assign(vertices_.size(), 0);
    boundary_edges_.clear();
    for (const auto& [key, info] : edges) {
        if (info[0] != 1) continue;
        const auto& tri = triangles_[info[1]];
        const int a = tri[info[2]];
        const int b = tri[(info[2] + 1) % 3];
        const Vec2 d = vertices_[b] - vertices_[a];
        const double len = d.norm();
        boundary_edges_.push_back({{a, b}, info[1], Vec2(d.y(), -d.x()) / len, len});
        boundary_flag_[a] = boundary_flag_[b] = 1;
    }
    // deterministic order independent of hashing
    std::sort(boundary_edges_.begin(), boundary_edges_.end(), [](const BoundaryEdge& l, const BoundaryEdge& r) {
        return l.vertices < r.vertices;
    });
    vertex_triangles_.assign(vertices_.size(), {});
    for (std::size_t t = 0; t < triangles_.size(); ++t) {
        for (int k : triangles_[t]) vertex_triangles_[k].push_back(static_cast<int>(t));
    }
}

void Mesh::build_index() {
    if (vertices_.empty()) return;
    Vec2 lo = vertices_.front(), hi = vertices_.front();
    for (const auto& v : vertices_) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    double min_edge = std::numeric_limits<double>::max();
    for (std::size_t t = 0; t < triangles_.size(); ++t) min_edge = std::min(min_edge, longest_edge(t));
    const double extent = std::max(hi.x() - lo.x(), hi.y() - lo.y());
    grid_cell_ = std::max({2.0 * min_edge, extent / 512.0, 1e-12});
    grid_origin_ = lo - Vec2::Constant(1e-9 * (extent + 1.0));
    grid_nx_ = static_cast<int>((hi.x() - grid_origin_.x()) / grid_cell_) + 1;
    grid_ny_ = static_cast<int>((hi.y() - grid_origin_.y()) / grid_cell_) + 1;
    const std::size_t ncell = static_cast<std::size_t>(grid_nx_) * static_cast<std::size_t>(grid_ny_);

    auto cell_range = [&](const Vec2& a, const Vec2& b, int& i0, int& i1, int& j0, int& j1) {
        i0 = std::clamp(static_cast<int>((a.x() - grid_origin_.x()) / grid_cell_), 0, grid_nx_ - 1);
        i1 = std::clamp(static_cast<int>((b.x() - grid_origin_.x()) / grid_cell_), 0, grid_nx_ - 1);
        j0 = std::clamp(static_cast<int>((a.y() - grid_origin_.y()) / grid_cell_), 0, grid_ny_ - 1);
        j1 = std::clamp(static_cast<int>((b.y() - grid_origin_.y()) / grid_cell_), 0, grid_ny_ - 1);
    };

    std::vector<int> counts(ncell + 1, 0);
    for (int pass = 0; pass < 2; ++pass) {
        if (pass == 1) {
            grid_offsets_.assign(ncell + 1, 0);
            for (std::size_t c = 0; c < ncell; ++c) grid_offsets_[c + 1] = grid_offsets_[c] + counts[c];
            grid_items_.assign(grid_offsets_[ncell], 0);
            std::fill(counts.begin(), counts.end(), 0);
        }
        for (std::size_t t = 0; t < triangles_.size(); ++t) {
            const auto& tri = triangles_[t];
            const Vec2 a = vertices_[tri[0]].cwiseMin(vertices_[tri[1]]).cwiseMin(vertices_[tri[2]]);
            const Vec2 b = vertices_[tri[0]].cwiseMax(vertices_[tri[1]]).cwiseMax(vertices_[tri[2]]);
            int i0, i1, j0, j1;
            cell_range(a, b, i0, i1, j0, j1);
            for (int j = j0; j <= j1; ++j) {
                for (int i = i0; i <= i1; ++i) {
                    const std::size_t c = static_cast<std::size_t>(j) * grid_nx_ + i;
                    if (pass == 1) grid_items_[grid_offsets_[c] + counts[c]] = static_cast<int>(t);
                    ++counts[c];
                }
            }
        }
    }
    counts.assign(ncell + 1, 0);
    std::vector<int> vcell(vertices_.size());
    for (std::size_t v = 0; v < vertices_.size(); ++v) {
        int i0, i1, j0, j1;
        cell_range(vertices_[v], vertices_[v], i0, i1, j0, j1);
        vcell[v] = j0 * grid_nx_ + i0;
        ++counts[vcell[v]];
    }
    vgrid_offsets_.assign(ncell + 1, 0);
    for (std::size_t c = 0; c < ncell; ++c) vgrid_offsets_[c + 1] = vgrid_offsets_[c] + counts[c];
    vgrid_items_.assign(vgrid_offsets_[ncell], 0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t v = 0; v < vertices_.size(); ++v) {
        vgrid_items_[vgrid_offsets_[vcell[v]] + counts[vcell[v]]++] = static_cast<int>(v);
    }
}

double Mesh::area(std::size_t t) const {
    const auto& tri = triangles_[t];
    return signed_area(vertices_[tri[0]], vertices_[tri[1]], vertices_[tri[2]]);
}

Vec2 Mesh::centroid(std::size_t t) const {
    const auto& tri = triangles_[t];
    return (vertices_[tri[0]] + vertices_[tri[1]] + vertices_[tri[2]]) / 3.0;
}

double Mesh::longest_edge(std::size_t t) const {
    const auto& tri = triangles_[t];
    return std::sqrt(std::max({(vertices_[tri[0]] - vertices_[tri[1]]).squaredNorm(),
                               (vertices_[tri[1]] - vertices_[tri[2]]).squaredNorm(),
                               (vertices_[tri[2]] - vertices_[tri[0]]).squaredNorm()}));
}

double Mesh::total_area() const {
    double s = 0.0;
    for (std::size_t t = 0; t < triangles_.size(); ++t) s += area(t);
    return s;
}

double Mesh::perimeter() const {
    double s = 0.0;
    for (const auto& e : boundary_edges_) s += e.length;
    return s;
}

double Mesh::max_edge_length() const {
    double m = 0.0;
    for (std::size_t t = 0; t < triangles_.size(); ++t) m = std::max(m, longest_edge(t));
    return m;
}

std::vector<int> Mesh::cells_overlapping(const Vec2& lo, const Vec2& hi) const {
    std::vector<int> cells;
    const int i0 = std::clamp(static_cast<int>(std::floor((lo.x() - grid_origin_.x()) / grid_cell_)), 0, grid_nx_ - 1);
    const int i1 = std::clamp(static_cast<int>(std::floor((hi.x() - grid_origin_.x()) / grid_cell_)), 0, grid_nx_ - 1);
    const int j0 = std::clamp(static_cast<int>(std::floor((lo.y() - grid_origin_.y()) / grid_cell_)), 0, grid_ny_ - 1);
    const int j1 = std::clamp(static_cast<int>(std::floor((hi.y() - grid_origin_.y()) / grid_cell_)), 0, grid_ny_ - 1);
    for (int j = j0; j <= j1; ++j) {
        for (int i = i0; i <= i1; ++i) cells.push_back(j * grid_nx_ + i);
    }
    return cells;
}

int Mesh::locate(const Vec2& x, std::array<double, 3>* barycentric) const {
    if (grid_nx_ == 0) return -1;
    for (int c : cells_overlapping(x, x)) {
        for (int k = grid_offsets_[c]; k < grid_offsets_[c + 1]; ++k) {
            const int t = grid_items_[k];
            const auto& tri = triangles_[t];
            const Vec2& a = vertices_[tri[0]];
            const Vec2& b = vertices_[tri[1]];
            const Vec2& cc = vertices_[tri[2]];
            const double area2 = 2.0 * signed_area(a, b, cc);
            const double l0 = 2.0 * signed_area(x, b, cc) / area2;
            const double l1 = 2.0 * signed_area(a, x, cc) / area2;
            const double l2 = 1.0 - l0 - l1;
            constexpr double tol = -1e-12;
            if (l0 >= tol && l1 >= tol && l2 >= tol) {
                if (barycentric) *barycentric = {l0, l1, l2};
                return t;
            }
        }
    }
    return -1;
}

std::vector<int> Mesh::triangles_touching_ball(const Vec2& center, double radius) const {
    std::vector<int> out;
    const double r2 = radius * radius;
    for (int c : cells_overlapping(center - Vec2::Constant(radius), center + Vec2::Constant(radius))) {
        for (int k = vgrid_offsets_[c]; k < vgrid_offsets_[c + 1]; ++k) {
            const int v = vgrid_items_[k];
            if ((vertices_[v] - center).squaredNorm() <= r2) {
                out.insert(out.end(), vertex_triangles_[v].begin(), vertex_triangles_[v].end());
            }
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double Mesh::local_boundary_size(const Vec2& x, double radius) const {
    double best = 0.0;
    double nearest = std::numeric_limits<double>::max();
    double nearest_len = 0.0;
    for (const auto& e : boundary_edges_) {
        const double d = std::min((vertices_[e.vertices[0]] - x).norm(), (vertices_[e.vertices[1]] - x).norm());
        if (d <= radius) best = std::max(best, e.length);
        if (d < nearest) {
            nearest = d;
            nearest_len = e.length;
        }
    }
    return best > 0.0 ? best : nearest_len;
}

void Mesh::write(std::ostream& out) const {
    const auto prec = out.precision(17);
    out << 2 << ' ' << vertices_.size() << ' ' << triangles_.size() << ' ' << boundary_edges_.size() << '\n';
    for (const auto& v : vertices_) out << v.x() << ' ' << v.y() << '\n';
    for (const auto& t : triangles_) out << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    for (const auto& e : boundary_edges_) out << e.vertices[0] << ' ' << e.vertices[1] << ' ' << e.triangle << '\n';
    out.precision(prec);
}

Mesh Mesh::read(std::istream& in) {
    long d = 0, nv = 0, nt = 0, nbe = 0;
    if (!(in >> d >> nv >> nt >> nbe) || d != 2 || nv < 3 || nt < 1 || nbe < 3) {
        throw MeshFormatError("bad header; expected 'd nv nt nbe' with d = 2");
    }
    std::vector<Vec2> vertices(static_cast<std::size_t>(nv));
    for (auto& v : vertices) {
        if (!(in >> v.x() >> v.y())) throw MeshFormatError("truncated vertex block");
    }
    std::vector<std::array<int, 3>> triangles(static_cast<std::size_t>(nt));
    for (auto& t : triangles) {
        if (!(in >> t[0] >> t[1] >> t[2])) throw MeshFormatError("truncated triangle block");
    }
    for (long e = 0; e < nbe; ++e) {
        int a, b, t;
        if (!(in >> a >> b >> t)) throw MeshFormatError("truncated boundary-edge block");
    }
    double hmax = 0.0;
    Mesh m(std::move(vertices), std::move(triangles));
    for (std::size_t t = 0; t < m.num_triangles(); ++t) hmax = std::max(hmax, m.longest_edge(t));
    if (static_cast<long>(m.boundary_edges().size()) != nbe) {
        throw MeshFormatError("boundary-edge count does not match the triangulation");
    }
    m.nominal_h_ = hmax;
    m.focus_h_ = hmax;
    return m;
}

// ---------------------------------------------------------------------------
// Mesh generation by longest-edge bisection

namespace {

class BisectionMesher {
public:
    BisectionMesher(const Domain& domain, std::size_t max_vertices) : domain_(domain), max_vertices_(max_vertices) {}

    void initial_diamond() {
        vertices_.push_back(domain_.center);
        boundary_.push_back(0);
        for (int k = 0; k < 4; ++k) {
            vertices_.push_back(domain_.boundary_point_at_angle(0.5 * M_PI * k));
            boundary_.push_back(1);
        }
        for (int k = 0; k < 4; ++k) add_triangle({0, 1 + k, 1 + (k + 1) % 4});
    }

    std::size_t num_triangles() const { return tris_.size(); }

    double longest(int t) const { return std::sqrt(longest_edge_of(t).first); }

    double min_vertex_size(int t, const std::function<double(const Vec2&)>& size) const {
        const auto& tri = tris_[t];
        const Vec2 c = (vertices_[tri[0]] + vertices_[tri[1]] + vertices_[tri[2]]) / 3.0;
        return std::min({size(vertices_[tri[0]]), size(vertices_[tri[1]]), size(vertices_[tri[2]]), size(c)});
    }

    /// Bisects t (refining along the longest-edge propagation path first).
    void refine(int t) {
        std::vector<int> stack{t};
        while (!stack.empty()) {
            const int cur = stack.back();
            const auto [len2, key] = longest_edge_of(cur);
            const int local = local_edge(cur, key);
            const int a = tris_[cur][local];
            const int b = tris_[cur][(local + 1) % 3];
            const int nb = neighbor(cur, a, b);
            if (nb < 0) {
                const Vec2 mid = domain_.project_to_boundary(0.5 * (vertices_[a] + vertices_[b]));
                const int m = add_vertex(mid, true);
                edge_map_.erase(key);
                split(cur, local, m);
                stack.pop_back();
            } else if (longest_edge_of(nb).second == key) {
                const int m = add_vertex(0.5 * (vertices_[a] + vertices_[b]), false);
                const int nlocal = local_edge(nb, key);
                edge_map_.erase(key);
                split(cur, local, m);
                split(nb, nlocal, m);
                stack.pop_back();
            } else {
                stack.push_back(nb);
            }
        }
    }

    std::vector<int> neighbors(int t) const {
        std::vector<int> out;
        for (int k = 0; k < 3; ++k) {
            const int n = neighbor(t, tris_[t][k], tris_[t][(k + 1) % 3]);
            if (n >= 0) out.push_back(n);
        }
        return out;
    }

    /// Lawson flips towards the Delaunay triangulation. A flip is only taken
    /// when it does not lengthen the edge, so size bounds are preserved.
    void delaunay_flips() {
        std::vector<std::uint64_t> stack;
        stack.reserve(edge_map_.size());
        for (const auto& [key, ts] : edge_map_) {
            if (ts[1] >= 0) stack.push_back(key);
        }
        std::sort(stack.begin(), stack.end());
        std::size_t guard = 0;
        const std::size_t guard_max = 50 * (edge_map_.size() + 16);
        while (!stack.empty() && guard++ < guard_max) {
            const std::uint64_t key = stack.back();
            stack.pop_back();
            auto it = edge_map_.find(key);
            if (it == edge_map_.end() || it->second[1] < 0) continue;
            const int t1 = it->second[0];
            const int t2 = it->second[1];
            const int l1 = local_edge(t1, key);
            const int a = tris_[t1][l1];
            const int b = tris_[t1][(l1 + 1) % 3];
            const int c = tris_[t1][(l1 + 2) % 3];
            const int l2 = local_edge(t2, key);
            const int d = tris_[t2][(l2 + 2) % 3];
            const Vec2 &A = vertices_[a], &B = vertices_[b], &C = vertices_[c], &D = vertices_[d];
            const double angle_c = std::acos(std::clamp((A - C).normalized().dot((B - C).normalized()), -1.0, 1.0));
            const double angle_d = std::acos(std::clamp((A - D).normalized().dot((B - D).normalized()), -1.0, 1.0));
            if (angle_c + angle_d <= M_PI + 1e-10) continue;
            if ((C - D).squaredNorm() > (A - B).squaredNorm()) continue;
            if (signed_area(C, A, D) <= 0.0 || signed_area(D, B, C) <= 0.0) continue;
            // t1 = (a,b,c), t2 = (b,a,d)  ->  t1 = (c,a,d), t2 = (d,b,c)
            edge_map_.erase(key);
            tris_[t1] = {c, a, d};
            tris_[t2] = {d, b, c};
            replace_in_edge(a, d, t2, t1);
            replace_in_edge(b, c, t1, t2);
            edge_map_[edge_key(c, d)] = {t1, t2};
            for (auto [p, q] : {std::pair{a, d}, std::pair{d, b}, std::pair{b, c}, std::pair{c, a}}) {
                stack.push_back(edge_key(p, q));
            }
        }
    }

    Mesh build(double nominal_h, double focus_h) && {
        return Mesh(std::move(vertices_), std::move(tris_), nominal_h, focus_h);
    }

private:
    std::pair<double, std::uint64_t> longest_edge_of(int t) const {
        const auto& tri = tris_[t];
        std::pair<double, std::uint64_t> best{-1.0, 0};
        for (int k = 0; k < 3; ++k) {
            const int a = std::min(tri[k], tri[(k + 1) % 3]);
            const int b = std::max(tri[k], tri[(k + 1) % 3]);
            const std::pair<double, std::uint64_t> cand{(vertices_[b] - vertices_[a]).squaredNorm(), edge_key(a, b)};
            if (cand > best) best = cand;
        }
        return best;
    }

    int local_edge(int t, std::uint64_t key) const {
        for (int k = 0; k < 3; ++k) {
            if (edge_key(tris_[t][k], tris_[t][(k + 1) % 3]) == key) return k;
        }
        return -1;
    }

    int neighbor(int t, int a, int b) const {
        const auto it = edge_map_.find(edge_key(a, b));
        if (it == edge_map_.end()) return -1;
        return it->second[0] == t ? it->second[1] : it->second[0];
    }

    int add_vertex(const Vec2& x, bool on_boundary) {
        if (vertices_.size() >= max_vertices_) {
            throw MeshBudgetExceeded("vertex cap of " + std::to_string(max_vertices_) + " reached");
        }
        vertices_.push_back(x);
        boundary_.push_back(on_boundary ? 1 : 0);
        return static_cast<int>(vertices_.size()) - 1;
    }

    void add_to_edge(int a, int b, int t) {
        auto [it, inserted] = edge_map_.try_emplace(edge_key(a, b), std::array<int, 2>{t, -1});
        if (!inserted) it->second[1] = t;
    }

    void replace_in_edge(int a, int b, int old_t, int new_t) {
        auto& ts = edge_map_.at(edge_key(a, b));
        if (ts[0] == old_t) {
            ts[0] = new_t;
        } else {
            ts[1] = new_t;
        }
        if (ts[0] < 0) std::swap(ts[0], ts[1]);
    }

    void add_triangle(const std::array<int, 3>& tri) {
        tris_.push_back(tri);
        const int t = static_cast<int>(tris_.size()) - 1;
        for (int k = 0; k < 3; ++k) add_to_edge(tri[k], tri[(k + 1) % 3], t);
    }

    // t = (a, b, c) with the split edge at local index `local`; the edge (a,b)
    // entry must already be erased from the edge map.
    void split(int t, int local, int m) {
        const int a = tris_[t][local];
        const int b = tris_[t][(local + 1) % 3];
        const int c = tris_[t][(local + 2) % 3];
        tris_[t] = {a, m, c};
        tris_.push_back({m, b, c});
        const int t2 = static_cast<int>(tris_.size()) - 1;
        replace_in_edge(b, c, t, t2);
        add_to_edge(a, m, t);
        add_to_edge(m, b, t2);
        add_to_edge(m, c, t);
        add_to_edge(m, c, t2);
    }

    const Domain& domain_;
    std::size_t max_vertices_;
    std::vector<Vec2> vertices_;
    std::vector<char> boundary_;
    std::vector<std::array<int, 3>> tris_;
    std::unordered_map<std::uint64_t, std::array<int, 2>> edge_map_;
};

} // namespace

Mesh generate_mesh(const Domain& domain, double h, const std::optional<MeshFocus>& focus, const MeshOptions& options) {
    if (!(h > 0.0)) throw UsageError("mesh size h must be positive");
    if (focus && !(focus->local_h > 0.0 && focus->local_h <= h)) {
        throw UsageError("focus size must satisfy 0 < local_h <= h");
    }
    const auto size = [&](const Vec2& x) {
        if (!focus) return h;
        const double d = (x - focus->point).norm();
        const double s = d <= focus->radius ? focus->local_h : focus->local_h + options.growth * (d - focus->radius);
        return std::min(h, s);
    };

    BisectionMesher mesher(domain, options.max_vertices);
    mesher.initial_diamond();

    constexpr double slack = 1.0 + 1e-12;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int t = 0; t < static_cast<int>(mesher.num_triangles()); ++t) {
            while (mesher.longest(t) > slack * mesher.min_vertex_size(t, size)) {
                mesher.refine(t);
                changed = true;
            }
        }
        for (int t = 0; t < static_cast<int>(mesher.num_triangles()); ++t) {
            for (int n : mesher.neighbors(t)) {
                while (mesher.longest(t) > options.grading_ratio * slack * mesher.longest(n)) {
                    mesher.refine(t);
                    changed = true;
                }
            }
        }
    }
    mesher.delaunay_flips();
    return std::move(mesher).build(h, focus ? focus->local_h : h);
}

} // namespace pbd
