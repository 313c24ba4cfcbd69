#pragma once

/// @file eafe.hpp
/// Edge-averaged (exponentially fitted) P1 finite elements for the
/// self-adjoint drift-diffusion model problem
///     -div(mu e^psi grad u) + c e^psi u = f
/// in Cartesian and axisymmetric (r,z) coordinates, with Dirichlet and
/// Robin/Neumann boundary data, plus the error norms used by the
/// convergence harness. On Delaunay-admissible meshes the assembled
/// operator is a column M-matrix (Cartesian mode), which is what the
/// positivity and conservation guarantees of the solvers rest on.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cleftsim/mesh.hpp"
#include "cleftsim/sparse.hpp"

namespace cleftsim {

/// Bernoulli function Be(x) = x/(e^x - 1), the exponential-fitting kernel.
/// Series branch keeps relative error < 1e-15 across the branch point;
/// the expm1 form is stable for all other finite x (Be -> 0 as x -> +inf,
/// Be -> -x as x -> -inf).
inline double bernoulli(double x) {
    if (std::abs(x) < 1e-4) {
        double x2 = x * x;
        return 1.0 - x / 2 + x2 / 12 - x2 * x2 / 720;
    }
    return x / std::expm1(x);
}

/// d/dx Be(x); negative for all x (Be is strictly decreasing).
inline double bernoulli_derivative(double x) {
    if (std::abs(x) < 1e-3) {
        double x2 = x * x;
        return -0.5 + x / 6 - x * x2 / 180;
    }
    if (x > 700.0) return -x * std::exp(-x);
    double em = std::expm1(x);
    return (em - x * (em + 1.0)) / (em * em);
}

enum class VariableKind { Primal, Slotboom };

/// Nodal scalar field aligned with a mesh.
struct Field {
    std::vector<double> values;
    VariableKind kind = VariableKind::Primal;
};

namespace detail {

struct TriangleGeometry {
    std::array<Point2, 3> p;
    std::array<Point2, 3> edge;  // edge[k] opposite vertex k, cyclic p[k+2]-p[k+1]
    double area;
    std::array<double, 3> omega;  // P1 edge weight of edge k: -S_ij >= 0 iff admissible
    std::array<double, 3> rbar;   // midpoint radius of edge opposite vertex k

    explicit TriangleGeometry(const std::array<Point2, 3>& pts) : p(pts) {
        for (int k = 0; k < 3; ++k) {
            const Point2& a = p[(k + 1) % 3];
            const Point2& b = p[(k + 2) % 3];
            edge[k] = {b.a - a.a, b.b - a.b};
            rbar[k] = 0.5 * (a.a + b.a);
        }
        area = 0.5 * (edge[2].a * (-edge[1].b) - edge[2].b * (-edge[1].a));
        if (!(area > 0.0)) throw std::invalid_argument("TriangleGeometry: non-positive area");
        for (int k = 0; k < 3; ++k) {
            const Point2& ei = edge[(k + 1) % 3];
            const Point2& ej = edge[(k + 2) % 3];
            omega[k] = -(ei.a * ej.a + ei.b * ej.b) / (4.0 * area);
        }
    }

    Point2 grad_lambda(int v) const {  // gradient of the P1 hat of vertex v
        return {-edge[v].b / (2.0 * area), edge[v].a / (2.0 * area)};
    }
};

}  // namespace detail

/// Local EAFE stiffness in the Slotboom variable: symmetric, constants
/// exactly in the kernel for any psi. Edge coefficients are the closed-form
/// harmonic average of mu e^psi along each edge (linearity of psi on the
/// edge gives Be factors; no quadrature). Axisymmetric mode folds the edge
/// midpoint radius into the edge coefficient, which keeps the matrix
/// symmetric with zero column sums, i.e. exactly conservative.
inline std::array<std::array<double, 3>, 3> local_stiffness(const std::array<Point2, 3>& pts,
                                                            const std::array<double, 3>& psi,
                                                            const std::array<double, 3>& mu_edge,
                                                            MeshMode mode) {
    detail::TriangleGeometry g(pts);
    std::array<std::array<double, 3>, 3> a{};
    for (int k = 0; k < 3; ++k) {
        int i = (k + 1) % 3, j = (k + 2) % 3;
        // harmonic average of mu e^psi: h = Be(psi_j - psi_i) e^{psi_j} (symmetric in i,j)
        double h = bernoulli(psi[j] - psi[i]) * std::exp(psi[j]);
        double w = g.omega[k] * mu_edge[k] * h;
        if (mode == MeshMode::Axisymmetric) w *= g.rbar[k];
        a[i][j] -= w;
        a[j][i] -= w;
    }
    for (int i = 0; i < 3; ++i) a[i][i] = -(a[i][(i + 1) % 3] + a[i][(i + 2) % 3]);
    return a;
}

/// Local stiffness acting on the primal variable u = (slotboom) e^{psi}:
/// the inverse Slotboom map applied column-wise, evaluated directly through
/// Bernoulli factors so no exponential of psi is ever formed. Axisymmetric
/// mode scales each edge by its midpoint radius: both rows of an edge carry
/// the same flux coefficient, so column sums vanish for any psi and closed
/// domains conserve mass exactly.
inline std::array<std::array<double, 3>, 3> local_stiffness_primal(
    const detail::TriangleGeometry& g, const std::array<double, 3>& psi,
    const std::array<double, 3>& mu_edge, MeshMode mode) {
    std::array<std::array<double, 3>, 3> a{};
    for (int k = 0; k < 3; ++k) {
        int i = (k + 1) % 3, j = (k + 2) % 3;
        double w = g.omega[k] * mu_edge[k];
        if (mode == MeshMode::Axisymmetric) w *= g.rbar[k];
        double bij = bernoulli(psi[i] - psi[j]);  // multiplies u_i
        double bji = bernoulli(psi[j] - psi[i]);  // multiplies u_j
        a[i][i] += w * bij;
        a[i][j] -= w * bji;
        a[j][j] += w * bji;
        a[j][i] -= w * bij;
    }
    return a;
}

/// Lumped (diagonal) mass for the reaction term and the nodal load, in the
/// Slotboom variable: diag(c_i e^{psi_i} w_i)|K|/3 and f_i w_i |K|/3 with
/// w_i the nodal radius (1 in Cartesian mode). Optional per-edge inward
/// normal fluxes add the trapezoidal boundary rule to the load.
inline std::pair<std::array<double, 3>, std::array<double, 3>> local_mass_and_load(
    const std::array<Point2, 3>& pts, const std::array<double, 3>& c_react,
    const std::array<double, 3>& psi, const std::array<double, 3>& f_src, MeshMode mode,
    const std::array<std::optional<double>, 3>& edge_inward_flux = {}) {
    detail::TriangleGeometry g(pts);
    std::array<double, 3> mass{}, load{};
    for (int v = 0; v < 3; ++v) {
        double w = (mode == MeshMode::Axisymmetric) ? pts[v].a : 1.0;
        mass[v] = c_react[v] * std::exp(psi[v]) * w * g.area / 3.0;
        load[v] = f_src[v] * w * g.area / 3.0;
    }
    for (int k = 0; k < 3; ++k) {
        if (!edge_inward_flux[k]) continue;
        int i = (k + 1) % 3, j = (k + 2) % 3;
        double len = std::hypot(g.edge[k].a, g.edge[k].b);
        double wi = (mode == MeshMode::Axisymmetric) ? pts[i].a : 1.0;
        double wj = (mode == MeshMode::Axisymmetric) ? pts[j].a : 1.0;
        load[i] += 0.5 * len * (*edge_inward_flux[k]) * wi;
        load[j] += 0.5 * len * (*edge_inward_flux[k]) * wj;
    }
    return {mass, load};
}

/// Robin data in the primal variable: conormal flux (mu e^psi du_slot/dn,
/// equal to the inward physical flux) = beta - alpha * u_trace, alpha >= 0.
/// alpha = 0 recovers a plain Neumann flux beta.
struct FluxBC {
    double alpha = 0.0;
    double beta = 0.0;
};

/// Self-adjoint model problem on a tagged mesh. All nodal arrays are sized
/// to the node count; boundary data is per-tag and nodal so membrane models
/// can vary along an interface. Dirichlet values and flux data refer to the
/// primal variable.
struct ModelProblem {
    const Mesh* mesh = nullptr;
    std::vector<double> psi;
    std::vector<double> mu;
    std::vector<double> c_react;
    std::vector<double> f_src;
    std::map<RegionTag, std::vector<double>> dirichlet;
    std::map<RegionTag, std::vector<FluxBC>> flux;

    explicit ModelProblem(const Mesh& m)
        : mesh(&m),
          psi(m.n_nodes(), 0.0),
          mu(m.n_nodes(), 1.0),
          c_react(m.n_nodes(), 0.0),
          f_src(m.n_nodes(), 0.0) {}

    void set_dirichlet(RegionTag tag, double value) {
        dirichlet[tag] = std::vector<double>(mesh->n_nodes(), value);
    }
    void set_dirichlet(RegionTag tag, std::vector<double> values) {
        require_size(values.size());
        dirichlet[tag] = std::move(values);
    }
    void set_flux(RegionTag tag, FluxBC bc) {
        flux[tag] = std::vector<FluxBC>(mesh->n_nodes(), bc);
    }
    void set_flux(RegionTag tag, std::vector<FluxBC> bcs) {
        require_size(bcs.size());
        flux[tag] = std::move(bcs);
    }

  private:
    void require_size(std::size_t n) const {
        if (int(n) != mesh->n_nodes())
            throw std::invalid_argument("ModelProblem: nodal array size mismatch");
    }
};

struct AssembledSystem {
    CsrMatrix matrix;
    std::vector<double> rhs;
    std::vector<char> is_dirichlet;  // per node
};

/// Assembles the global system acting on the primal variable: EAFE stiffness
/// plus lumped reaction mass, trapezoidal Robin terms on tagged boundary
/// edges (radially weighted in axisymmetric mode), then symmetric-consistent
/// Dirichlet elimination (row replacement with load adjustment, eliminated
/// columns zeroed) which preserves the column M-matrix structure.
inline AssembledSystem assemble_system(const ModelProblem& problem) {
    const Mesh& mesh = *problem.mesh;
    const int n = mesh.n_nodes();
    if (int(problem.psi.size()) != n || int(problem.mu.size()) != n ||
        int(problem.c_react.size()) != n || int(problem.f_src.size()) != n)
        throw std::invalid_argument("assemble_system: nodal array size mismatch");
    for (double m : problem.mu)
        if (!(m > 0.0)) throw std::invalid_argument("assemble_system: mu must be positive");
    for (double c : problem.c_react)
        if (c < 0.0) throw std::invalid_argument("assemble_system: c_react must be nonnegative");

    const MeshMode mode = mesh.mode();
    TripletBuffer trip(n, n);
    std::vector<double> rhs(n, 0.0);

    for (const auto& t : mesh.triangles()) {
        std::array<Point2, 3> pts{mesh.nodes()[t[0]], mesh.nodes()[t[1]], mesh.nodes()[t[2]]};
        detail::TriangleGeometry g(pts);
        std::array<double, 3> psi{problem.psi[t[0]], problem.psi[t[1]], problem.psi[t[2]]};
        std::array<double, 3> mu_edge{};
        for (int k = 0; k < 3; ++k)
            mu_edge[k] = 0.5 * (problem.mu[t[(k + 1) % 3]] + problem.mu[t[(k + 2) % 3]]);
        auto a = local_stiffness_primal(g, psi, mu_edge, mode);
        for (int i = 0; i < 3; ++i) {
            double w = (mode == MeshMode::Axisymmetric) ? pts[i].a : 1.0;
            trip.add(t[i], t[i], a[i][i] + problem.c_react[t[i]] * w * g.area / 3.0);
            for (int j = 0; j < 3; ++j)
                if (j != i) trip.add(t[i], t[j], a[i][j]);
            rhs[t[i]] += problem.f_src[t[i]] * w * g.area / 3.0;
        }
    }

    for (const auto& e : mesh.boundary_edges()) {
        auto it = problem.flux.find(e.tag);
        if (it == problem.flux.end()) continue;
        const auto& data = it->second;
        const Point2& p = mesh.nodes()[e.n0];
        const Point2& q = mesh.nodes()[e.n1];
        double len = std::hypot(q.a - p.a, q.b - p.b);
        for (int node : {e.n0, e.n1}) {
            double w = (mode == MeshMode::Axisymmetric) ? mesh.nodes()[node].a : 1.0;
            trip.add(node, node, 0.5 * len * data[node].alpha * w);
            rhs[node] += 0.5 * len * data[node].beta * w;
        }
    }

    AssembledSystem sys;
    sys.matrix = trip.assemble();
    sys.rhs = std::move(rhs);
    sys.is_dirichlet.assign(n, 0);

    std::vector<double> dval(n, 0.0);
    for (const auto& [tag, values] : problem.dirichlet)
        for (const auto& e : mesh.boundary_edges())
            if (e.tag == tag)
                for (int node : {e.n0, e.n1}) {
                    sys.is_dirichlet[node] = 1;
                    dval[node] = values[node];
                }

    CsrMatrix& A = sys.matrix;
    for (int i = 0; i < n; ++i) {
        if (sys.is_dirichlet[i]) {
            for (int k = A.row_ptr[i]; k < A.row_ptr[i + 1]; ++k)
                A.val[k] = (A.col[k] == i) ? 1.0 : 0.0;
            sys.rhs[i] = dval[i];
        } else {
            for (int k = A.row_ptr[i]; k < A.row_ptr[i + 1]; ++k)
                if (sys.is_dirichlet[A.col[k]]) {
                    sys.rhs[i] -= A.val[k] * dval[A.col[k]];
                    A.val[k] = 0.0;
                }
        }
    }
    return sys;
}

/// Nodal lumped measure: sum over triangles of w_i |K|/3 (w_i = nodal radius
/// in axisymmetric mode). Discrete masses/averages use this vector.
inline std::vector<double> lumped_mass_vector(const Mesh& mesh) {
    std::vector<double> m(mesh.n_nodes(), 0.0);
    for (const auto& t : mesh.triangles()) {
        std::array<Point2, 3> pts{mesh.nodes()[t[0]], mesh.nodes()[t[1]], mesh.nodes()[t[2]]};
        double area = Mesh::signed_area(pts[0], pts[1], pts[2]);
        for (int v = 0; v < 3; ++v) {
            double w = (mesh.mode() == MeshMode::Axisymmetric) ? pts[v].a : 1.0;
            m[t[v]] += w * area / 3.0;
        }
    }
    return m;
}

/// Nodewise change of variable between the primal and Slotboom fields.
inline std::vector<double> to_slotboom(const std::vector<double>& primal,
                                       const std::vector<double>& psi) {
    std::vector<double> out(primal.size());
    for (std::size_t i = 0; i < primal.size(); ++i) out[i] = primal[i] * std::exp(-psi[i]);
    return out;
}

inline std::vector<double> to_primal(const std::vector<double>& slotboom,
                                     const std::vector<double>& psi) {
    std::vector<double> out(slotboom.size());
    for (std::size_t i = 0; i < slotboom.size(); ++i) out[i] = slotboom[i] * std::exp(psi[i]);
    return out;
}

struct ErrorNorms {
    double linf = 0.0;
    double l2 = 0.0;
    double h1 = 0.0;
};

/// L-infinity over nodes; L2 and H1 by the 3-point edge-midpoint rule per
/// triangle (exact for quadratics) against the P1 interpolant and its
/// gradient. Plain area measure in both mesh modes.
inline ErrorNorms error_norms(const Mesh& mesh, const std::vector<double>& values,
                              const std::function<double(Point2)>& exact,
                              const std::function<Point2(Point2)>& exact_grad) {
    if (int(values.size()) != mesh.n_nodes())
        throw std::invalid_argument("error_norms: field size mismatch");
    ErrorNorms norms;
    for (int i = 0; i < mesh.n_nodes(); ++i)
        norms.linf = std::max(norms.linf, std::abs(values[i] - exact(mesh.nodes()[i])));
    double l2sq = 0.0, semisq = 0.0;
    for (const auto& t : mesh.triangles()) {
        std::array<Point2, 3> pts{mesh.nodes()[t[0]], mesh.nodes()[t[1]], mesh.nodes()[t[2]]};
        detail::TriangleGeometry g(pts);
        Point2 grad_h{0.0, 0.0};
        for (int v = 0; v < 3; ++v) {
            Point2 gl = g.grad_lambda(v);
            grad_h.a += values[t[v]] * gl.a;
            grad_h.b += values[t[v]] * gl.b;
        }
        for (int k = 0; k < 3; ++k) {
            int i = (k + 1) % 3, j = (k + 2) % 3;
            Point2 mid{0.5 * (pts[i].a + pts[j].a), 0.5 * (pts[i].b + pts[j].b)};
            double uh = 0.5 * (values[t[i]] + values[t[j]]);
            double dv = uh - exact(mid);
            l2sq += g.area / 3.0 * dv * dv;
            Point2 ge = exact_grad(mid);
            double dga = grad_h.a - ge.a, dgb = grad_h.b - ge.b;
            semisq += g.area / 3.0 * (dga * dga + dgb * dgb);
        }
    }
    norms.l2 = std::sqrt(l2sq);
    norms.h1 = std::sqrt(l2sq + semisq);
    return norms;
}

}  // namespace cleftsim
