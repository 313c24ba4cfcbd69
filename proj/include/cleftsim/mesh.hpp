#pragma once

/// @file mesh.hpp
/// Tagged 2D triangulations for the axisymmetric (r,z) and planar domains:
/// structured rectangle generator with geometric boundary-layer grading,
/// plain-text load/store, and the Delaunay-admissibility check that
/// certifies the M-matrix precondition of the exponentially fitted scheme.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleftsim/textio.hpp"

namespace cleftsim {

enum class MeshMode { Axisymmetric, Cartesian };

/// Boundary region tags. Cell/Sub/Ef/Lateral/Axis name the physical
/// interfaces of the cell-chip geometry; Dirichlet/Neumann are generic.
enum class RegionTag { Cell, Sub, Ef, Lateral, Axis, Dirichlet, Neumann };

inline std::string to_string(RegionTag t) {
    switch (t) {
        case RegionTag::Cell: return "CELL";
        case RegionTag::Sub: return "SUB";
        case RegionTag::Ef: return "EF";
        case RegionTag::Lateral: return "LATERAL";
        case RegionTag::Axis: return "AXIS";
        case RegionTag::Dirichlet: return "DIRICHLET";
        case RegionTag::Neumann: return "NEUMANN";
    }
    throw std::logic_error("to_string(RegionTag): invalid tag");
}

inline RegionTag region_tag_from_string(std::string_view s) {
    if (s == "CELL") return RegionTag::Cell;
    if (s == "SUB") return RegionTag::Sub;
    if (s == "EF") return RegionTag::Ef;
    if (s == "LATERAL") return RegionTag::Lateral;
    if (s == "AXIS") return RegionTag::Axis;
    if (s == "DIRICHLET") return RegionTag::Dirichlet;
    if (s == "NEUMANN") return RegionTag::Neumann;
    throw std::runtime_error("unknown region tag '" + std::string(s) + "'");
}

struct Point2 {
    double a = 0.0;  // r (axisymmetric) or x (cartesian)
    double b = 0.0;  // z or y
};

struct BoundaryEdge {
    int n0 = -1, n1 = -1;
    RegionTag tag = RegionTag::Neumann;
};

/// Immutable conforming triangulation with tagged boundary.
class Mesh {
  public:
    Mesh(std::vector<Point2> nodes, std::vector<std::array<int, 3>> triangles,
         std::vector<BoundaryEdge> boundary_edges, MeshMode mode)
        : nodes_(std::move(nodes)),
          tris_(std::move(triangles)),
          bedges_(std::move(boundary_edges)),
          mode_(mode) {
        validate();
    }

    int n_nodes() const { return int(nodes_.size()); }
    int n_triangles() const { return int(tris_.size()); }
    const std::vector<Point2>& nodes() const { return nodes_; }
    const std::vector<std::array<int, 3>>& triangles() const { return tris_; }
    const std::vector<BoundaryEdge>& boundary_edges() const { return bedges_; }
    MeshMode mode() const { return mode_; }

    double triangle_area(int k) const {
        const auto& t = tris_[k];
        return signed_area(nodes_[t[0]], nodes_[t[1]], nodes_[t[2]]);
    }

    double total_area() const {
        double s = 0.0;
        for (int k = 0; k < n_triangles(); ++k) s += triangle_area(k);
        return s;
    }

    /// Sorted unique node indices on boundary edges carrying the tag.
    std::vector<int> boundary_nodes(RegionTag tag) const {
        std::set<int> s;
        for (const auto& e : bedges_)
            if (e.tag == tag) {
                s.insert(e.n0);
                s.insert(e.n1);
            }
        return {s.begin(), s.end()};
    }

    bool has_tag(RegionTag tag) const {
        for (const auto& e : bedges_)
            if (e.tag == tag) return true;
        return false;
    }

    static double signed_area(const Point2& p, const Point2& q, const Point2& r) {
        return 0.5 * ((q.a - p.a) * (r.b - p.b) - (r.a - p.a) * (q.b - p.b));
    }

  private:
    void validate() const {
        if (nodes_.empty() || tris_.empty())
            throw std::runtime_error("Mesh: empty node or triangle list");
        std::vector<char> referenced(nodes_.size(), 0);
        for (const auto& t : tris_) {
            for (int v : t) {
                if (v < 0 || v >= n_nodes())
                    throw std::runtime_error("Mesh: triangle references missing node " + std::to_string(v));
                referenced[v] = 1;
            }
            if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
                throw std::runtime_error("Mesh: degenerate triangle (repeated vertex)");
            if (!(signed_area(nodes_[t[0]], nodes_[t[1]], nodes_[t[2]]) > 0.0))
                throw std::runtime_error("Mesh: triangle with non-positive area (orientation must be CCW)");
        }
        for (std::size_t i = 0; i < referenced.size(); ++i)
            if (!referenced[i])
                throw std::runtime_error("Mesh: node " + std::to_string(i) + " not referenced by any triangle");
        if (mode_ == MeshMode::Axisymmetric)
            for (const auto& p : nodes_)
                if (p.a < 0.0)
                    throw std::runtime_error("Mesh: negative radial coordinate in axisymmetric mode");

        // Exterior edges (in exactly one triangle) must each carry exactly one tag;
        // tagged edges must be exterior.
        std::map<std::pair<int, int>, int> edge_count;
        for (const auto& t : tris_)
            for (int e = 0; e < 3; ++e) {
                int u = t[e], v = t[(e + 1) % 3];
                edge_count[std::minmax(u, v)] += 1;
            }
        for (const auto& [edge, cnt] : edge_count)
            if (cnt > 2)
                throw std::runtime_error("Mesh: non-manifold edge");
        std::map<std::pair<int, int>, int> tag_count;
        for (const auto& e : bedges_) {
            auto key = std::minmax(e.n0, e.n1);
            auto it = edge_count.find(key);
            if (it == edge_count.end() || it->second != 1)
                throw std::runtime_error("Mesh: boundary edge list contains a non-exterior edge");
            tag_count[key] += 1;
        }
        for (const auto& [edge, cnt] : edge_count)
            if (cnt == 1) {
                auto it = tag_count.find(edge);
                if (it == tag_count.end())
                    throw std::runtime_error("Mesh: untagged exterior edge (" + std::to_string(edge.first) +
                                             "," + std::to_string(edge.second) + ")");
                if (it->second != 1)
                    throw std::runtime_error("Mesh: exterior edge tagged more than once");
            }
    }

    std::vector<Point2> nodes_;
    std::vector<std::array<int, 3>> tris_;
    std::vector<BoundaryEdge> bedges_;
    MeshMode mode_;
};

/// Geometric grading of one axis: cell sizes grow by the given ratio moving
/// away from a refined side. Ratios of 1 give uniform spacing; setting both
/// refines toward both ends (each half of the extent graded symmetrically).
struct GradingSpec {
    double ratio_start = 1.0;
    double ratio_end = 1.0;
};

namespace detail {

/// 1D node coordinates for n cells on [x0,x1] with one-sided geometric sizes.
inline std::vector<double> geometric_axis_one_sided(double x0, double x1, int n, double q,
                                                    bool refine_start) {
    std::vector<double> xs(n + 1);
    const double L = x1 - x0;
    double h0 = (std::abs(q - 1.0) < 1e-14) ? L / n : L * (q - 1.0) / (std::pow(q, n) - 1.0);
    xs[0] = 0.0;
    for (int i = 0; i < n; ++i) xs[i + 1] = xs[i] + h0 * std::pow(q, i);
    for (auto& x : xs) x /= xs.back();  // normalize out roundoff
    if (!refine_start) {
        for (auto& x : xs) x = 1.0 - x;
        std::reverse(xs.begin(), xs.end());
    }
    for (auto& x : xs) x = x0 + L * x;
    xs.front() = x0;
    xs.back() = x1;
    return xs;
}

inline std::vector<double> graded_axis(double x0, double x1, int n, const GradingSpec& g) {
    if (!(x1 > x0)) throw std::invalid_argument("graded_axis: degenerate extent");
    if (n < 1) throw std::invalid_argument("graded_axis: need at least one cell");
    if (!(g.ratio_start > 0.0) || !(g.ratio_end > 0.0))
        throw std::invalid_argument("graded_axis: grading ratios must be positive");
    const bool rs = g.ratio_start > 1.0 + 1e-14;
    const bool re = g.ratio_end > 1.0 + 1e-14;
    if (rs && re) {
        // Two-sided: split cells between the halves, mirror-graded.
        int n1 = n / 2, n2 = n - n1;
        if (n1 == 0) n1 = 1, n2 = n - 1;
        double xm = 0.5 * (x0 + x1);
        auto lo = geometric_axis_one_sided(x0, xm, n1, g.ratio_start, true);
        auto hi = geometric_axis_one_sided(xm, x1, n2, g.ratio_end, false);
        lo.insert(lo.end(), hi.begin() + 1, hi.end());
        return lo;
    }
    if (rs) return geometric_axis_one_sided(x0, x1, n, g.ratio_start, true);
    if (re) return geometric_axis_one_sided(x0, x1, n, g.ratio_end, false);
    std::vector<double> xs(n + 1);
    for (int i = 0; i <= n; ++i) xs[i] = x0 + (x1 - x0) * double(i) / n;
    // Exact endpoints so abutting blocks dedup bitwise when merged.
    xs.front() = x0;
    xs.back() = x1;
    return xs;
}

}  // namespace detail

/// Piecewise tagging of one rectangle side: the tag of an edge is taken from
/// the first break whose limit is >= the edge midpoint coordinate.
struct SideTags {
    struct Break {
        double limit;
        RegionTag tag;
    };
    std::vector<Break> breaks;

    SideTags() = default;
    SideTags(RegionTag t) { breaks.push_back({std::numeric_limits<double>::infinity(), t}); }
    SideTags(std::initializer_list<Break> b) : breaks(b) {}

    RegionTag at(double coord) const {
        for (const auto& b : breaks)
            if (coord <= b.limit) return b.tag;
        throw std::runtime_error("SideTags: coordinate beyond final break");
    }
};

struct RectangleSpec {
    double a0 = 0.0, a1 = 1.0;
    double b0 = 0.0, b1 = 1.0;
    int n_a = 1, n_b = 1;
    GradingSpec grade_a, grade_b;
    SideTags tag_a0{RegionTag::Dirichlet};  // side a = a0
    SideTags tag_a1{RegionTag::Dirichlet};  // side a = a1
    SideTags tag_b0{RegionTag::Dirichlet};  // side b = b0
    SideTags tag_b1{RegionTag::Dirichlet};  // side b = b1
    MeshMode mode = MeshMode::Cartesian;
};

/// Structured triangulation of a rectangle. Quads split into right triangles
/// with parity-alternating diagonals, so every angle is <= pi/2 and the mesh
/// is Delaunay-admissible for any grading and aspect ratio.
inline Mesh build_rectangle_mesh(const RectangleSpec& spec) {
    auto xa = detail::graded_axis(spec.a0, spec.a1, spec.n_a, spec.grade_a);
    auto xb = detail::graded_axis(spec.b0, spec.b1, spec.n_b, spec.grade_b);
    const int na = spec.n_a, nb = spec.n_b;
    auto id = [na](int i, int j) { return j * (na + 1) + i; };

    std::vector<Point2> nodes((na + 1) * (nb + 1));
    for (int j = 0; j <= nb; ++j)
        for (int i = 0; i <= na; ++i) nodes[id(i, j)] = {xa[i], xb[j]};

    std::vector<std::array<int, 3>> tris;
    tris.reserve(2 * std::size_t(na) * nb);
    for (int j = 0; j < nb; ++j)
        for (int i = 0; i < na; ++i) {
            int p00 = id(i, j), p10 = id(i + 1, j), p01 = id(i, j + 1), p11 = id(i + 1, j + 1);
            if ((i + j) % 2 == 0) {
                tris.push_back({p00, p10, p11});
                tris.push_back({p00, p11, p01});
            } else {
                tris.push_back({p00, p10, p01});
                tris.push_back({p10, p11, p01});
            }
        }

    std::vector<BoundaryEdge> bedges;
    for (int i = 0; i < na; ++i) {
        double mid = 0.5 * (xa[i] + xa[i + 1]);
        bedges.push_back({id(i, 0), id(i + 1, 0), spec.tag_b0.at(mid)});
        bedges.push_back({id(i, nb), id(i + 1, nb), spec.tag_b1.at(mid)});
    }
    for (int j = 0; j < nb; ++j) {
        double mid = 0.5 * (xb[j] + xb[j + 1]);
        bedges.push_back({id(0, j), id(0, j + 1), spec.tag_a0.at(mid)});
        bedges.push_back({id(na, j), id(na, j + 1), spec.tag_a1.at(mid)});
    }
    return Mesh(std::move(nodes), std::move(tris), std::move(bedges), spec.mode);
}

/// Conforming union of generator blocks that share axis discretizations:
/// nodes with bitwise-equal coordinates are identified, and block-boundary
/// edges that end up inside the union (shared by two triangles) are dropped.
inline Mesh merge_meshes(const std::vector<Mesh>& blocks) {
    if (blocks.empty()) throw std::invalid_argument("merge_meshes: no blocks");
    MeshMode mode = blocks.front().mode();
    for (const auto& b : blocks)
        if (b.mode() != mode) throw std::invalid_argument("merge_meshes: mixed mesh modes");

    std::map<std::pair<double, double>, int> index;
    std::vector<Point2> nodes;
    std::vector<std::array<int, 3>> tris;
    std::vector<BoundaryEdge> candidates;
    for (const auto& b : blocks) {
        std::vector<int> remap(b.n_nodes());
        for (int i = 0; i < b.n_nodes(); ++i) {
            const Point2& p = b.nodes()[i];
            auto [it, inserted] = index.try_emplace(std::pair(p.a, p.b), int(nodes.size()));
            if (inserted) nodes.push_back(p);
            remap[i] = it->second;
        }
        for (const auto& t : b.triangles())
            tris.push_back({remap[t[0]], remap[t[1]], remap[t[2]]});
        for (const auto& e : b.boundary_edges())
            candidates.push_back({remap[e.n0], remap[e.n1], e.tag});
    }

    std::map<std::pair<int, int>, int> edge_count;
    for (const auto& t : tris)
        for (int e = 0; e < 3; ++e) edge_count[std::minmax(t[e], t[(e + 1) % 3])] += 1;
    std::vector<BoundaryEdge> bedges;
    for (const auto& e : candidates)
        if (edge_count.at(std::minmax(e.n0, e.n1)) == 1) bedges.push_back(e);

    // A disconnected union means some interface failed the bitwise node
    // match; better to fail loudly than solve on a silently split domain.
    std::vector<std::vector<int>> adj(nodes.size());
    for (const auto& t : tris)
        for (int e = 0; e < 3; ++e) {
            adj[t[e]].push_back(t[(e + 1) % 3]);
            adj[t[(e + 1) % 3]].push_back(t[e]);
        }
    std::vector<char> seen(nodes.size(), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
        int v = stack.back();
        stack.pop_back();
        for (int w : adj[v])
            if (!seen[w]) {
                seen[w] = 1;
                ++reached;
                stack.push_back(w);
            }
    }
    if (reached != nodes.size())
        throw std::runtime_error("merge_meshes: blocks do not share interface nodes bitwise");
    return Mesh(std::move(nodes), std::move(tris), std::move(bedges), mode);
}

/// Axisymmetric cell-in-bath geometry: the electrolyte around a cylindrical
/// cell of radius R_cell whose bottom face sits delta_j above the substrate,
/// truncated at R_ef radially and Z_top axially. The membrane tag covers the
/// cell's bottom disc, lateral wall, and top disc; the substrate tag spans
/// the whole bottom; the far-field tag the truncation boundaries. Every wall
/// carries a geometric boundary-layer pack reaching sub-nanometre normal
/// spacing: unscreened interface charge otherwise biases the floating bath
/// level by tens of millivolts.
struct FullBathSpec {
    double R_cell = 10e-6;
    double R_ef = 40e-6;
    double delta_j = 100e-9;
    double Z_cell = 10e-6;       // height of the cell's top face
    double Z_top = 20e-6;
    double bl_width = 1e-6;      // extent of each wall-layer pack
    double layer_ratio = 2.2;    // geometric ratio inside the packs
    double cleft_wall_ratio = 2.25;
    int n_r_cell = 20;           // [0, R_cell]
    int n_r_wall = 10;           // radial pack at the lateral wall
    int n_r_out = 15;            // remaining radial extent to R_ef
    int n_z_cleft = 12;          // cleft gap, graded toward both walls
    int n_z_wall = 10;           // axial packs above the bottom/top faces
    int n_z_bulk = 5;            // each remaining axial stretch
};

/// Builds the cell-in-bath mesh as the product of radial and axial segments
/// (minus the cell's interior), one structured block per segment pair, merged
/// along the shared axes; interface sides carry a placeholder tag that the
/// merge drops.
inline Mesh build_full_bath_mesh(const FullBathSpec& s) {
    if (!(0.0 < s.delta_j && s.delta_j < s.Z_cell && s.Z_cell < s.Z_top))
        throw std::invalid_argument("build_full_bath_mesh: need 0 < delta_j < Z_cell < Z_top");
    if (!(0.0 < s.R_cell && s.R_cell < s.R_ef))
        throw std::invalid_argument("build_full_bath_mesh: need 0 < R_cell < R_ef");
    if (!(s.bl_width > 0.0) ||
        2.0 * s.bl_width >= std::min({s.Z_cell - s.delta_j, s.Z_top - s.Z_cell,
                                      s.R_ef - s.R_cell}))
        throw std::invalid_argument("build_full_bath_mesh: bl_width must fit inside every stretch");

    struct Segment {
        double x0, x1;
        int n;
        GradingSpec grade;
    };
    const GradingSpec uni{}, toward_start{s.layer_ratio, 1.0}, toward_end{1.0, s.layer_ratio},
        both{s.cleft_wall_ratio, s.cleft_wall_ratio};
    const std::vector<Segment> rseg = {
        {0.0, s.R_cell, s.n_r_cell, uni},
        {s.R_cell, s.R_cell + s.bl_width, s.n_r_wall, toward_start},
        {s.R_cell + s.bl_width, s.R_ef - s.bl_width, s.n_r_out, uni},
        {s.R_ef - s.bl_width, s.R_ef, s.n_r_wall, toward_end},
    };
    const std::vector<Segment> zseg = {
        {0.0, s.delta_j, s.n_z_cleft, both},
        {s.delta_j, s.delta_j + s.bl_width, s.n_z_wall, toward_start},
        {s.delta_j + s.bl_width, s.Z_cell, s.n_z_bulk, uni},
        {s.Z_cell, s.Z_cell + s.bl_width, s.n_z_wall, toward_start},
        {s.Z_cell + s.bl_width, s.Z_top - s.bl_width, s.n_z_bulk, uni},
        {s.Z_top - s.bl_width, s.Z_top, s.n_z_wall, toward_end},
    };
    // The cell body occupies r < R_cell, delta_j < z < Z_cell (z segments 1-2).
    auto inside_cell = [](int ri, int zj) { return ri == 0 && (zj == 1 || zj == 2); };
    const SideTags gap(RegionTag::Neumann);  // placeholder on block interfaces

    std::vector<Mesh> blocks;
    for (std::size_t ri = 0; ri < rseg.size(); ++ri)
        for (std::size_t zj = 0; zj < zseg.size(); ++zj) {
            if (inside_cell(int(ri), int(zj))) continue;
            RectangleSpec b;
            b.a0 = rseg[ri].x0; b.a1 = rseg[ri].x1;
            b.b0 = zseg[zj].x0; b.b1 = zseg[zj].x1;
            b.n_a = rseg[ri].n; b.n_b = zseg[zj].n;
            b.grade_a = rseg[ri].grade; b.grade_b = zseg[zj].grade;
            b.mode = MeshMode::Axisymmetric;
            b.tag_a0 = ri == 0                       ? SideTags(RegionTag::Axis)
                       : ri == 1 && (zj == 1 || zj == 2) ? SideTags(RegionTag::Cell)
                                                         : gap;  // lateral wall
            b.tag_a1 = ri + 1 == rseg.size() ? SideTags(RegionTag::Ef) : gap;
            b.tag_b0 = zj == 0            ? SideTags(RegionTag::Sub)
                       : ri == 0 && zj == 3 ? SideTags(RegionTag::Cell)
                                            : gap;  // top disc
            b.tag_b1 = zj + 1 == zseg.size() ? SideTags(RegionTag::Ef)
                       : ri == 0 && zj == 0    ? SideTags(RegionTag::Cell)
                                               : gap;  // bottom disc
            blocks.push_back(build_rectangle_mesh(b));
        }
    return merge_meshes(blocks);
}

/// Thin-sheet crosstalk geometry: the electrolyte film of thickness delta_j
/// over the substrate, covered by the cell membrane up to R_cell and by the
/// far-field closure beyond it; sensing electrodes are probe windows on the
/// substrate, not separate boundary tags.
struct TwoElectrodeSpec {
    double R_cell = 10e-6;
    double R_max = 36e-6;        // radial truncation past the last electrode
    double delta_j = 100e-9;
    double trans_width = 2e-6;   // radial refinement band past the cell edge
    double trans_ratio = 1.6;    // grading of the band toward the cell edge
    double cleft_wall_ratio = 2.25;
    int n_r_cell = 40;
    int n_r_trans = 12;
    int n_r_out = 48;
    int n_z = 12;
};

/// Builds the crosstalk strip from three blocks sharing the film's graded
/// vertical axis; the top side switches from membrane to far-field closure
/// at the cell edge.
inline Mesh build_two_electrode_mesh(const TwoElectrodeSpec& s) {
    if (!(0.0 < s.R_cell && s.R_cell + s.trans_width < s.R_max))
        throw std::invalid_argument("build_two_electrode_mesh: need R_cell + band < R_max");
    if (!(s.delta_j > 0.0))
        throw std::invalid_argument("build_two_electrode_mesh: need positive film thickness");

    const GradingSpec uni{}, toward_start{s.trans_ratio, 1.0},
        both{s.cleft_wall_ratio, s.cleft_wall_ratio};
    const SideTags gap(RegionTag::Neumann);
    struct Seg {
        double x0, x1;
        int n;
        GradingSpec grade;
        RegionTag top;
    };
    const std::vector<Seg> rseg = {
        {0.0, s.R_cell, s.n_r_cell, uni, RegionTag::Cell},
        {s.R_cell, s.R_cell + s.trans_width, s.n_r_trans, toward_start, RegionTag::Ef},
        {s.R_cell + s.trans_width, s.R_max, s.n_r_out, uni, RegionTag::Ef},
    };
    std::vector<Mesh> blocks;
    for (std::size_t i = 0; i < rseg.size(); ++i) {
        RectangleSpec b;
        b.a0 = rseg[i].x0; b.a1 = rseg[i].x1;
        b.b0 = 0.0; b.b1 = s.delta_j;
        b.n_a = rseg[i].n; b.n_b = s.n_z;
        b.grade_a = rseg[i].grade; b.grade_b = both;
        b.mode = MeshMode::Axisymmetric;
        b.tag_a0 = i == 0 ? SideTags(RegionTag::Axis) : gap;
        b.tag_a1 = i + 1 == rseg.size() ? SideTags(RegionTag::Ef) : gap;
        b.tag_b0 = SideTags(RegionTag::Sub);
        b.tag_b1 = SideTags(rseg[i].top);
        blocks.push_back(build_rectangle_mesh(b));
    }
    return merge_meshes(blocks);
}

/// Interior edge whose opposite-angle sum exceeds pi (Delaunay violation).
struct EdgeReport {
    int n0, n1;
    double angle_sum;  // radians
};

/// Certifies the M-matrix precondition: empty report means every interior
/// edge satisfies the Delaunay angle condition.
inline std::vector<EdgeReport> check_m_matrix_admissible(const Mesh& mesh) {
    auto angle_at = [&](int v, int w0, int w1) {
        const auto& nodes = mesh.nodes();
        double ux = nodes[w0].a - nodes[v].a, uy = nodes[w0].b - nodes[v].b;
        double wx = nodes[w1].a - nodes[v].a, wy = nodes[w1].b - nodes[v].b;
        double c = (ux * wx + uy * wy) / (std::hypot(ux, uy) * std::hypot(wx, wy));
        return std::acos(std::clamp(c, -1.0, 1.0));
    };
    std::map<std::pair<int, int>, std::vector<double>> opp;
    for (const auto& t : mesh.triangles())
        for (int e = 0; e < 3; ++e) {
            int u = t[e], v = t[(e + 1) % 3], w = t[(e + 2) % 3];
            opp[std::minmax(u, v)].push_back(angle_at(w, u, v));
        }
    std::vector<EdgeReport> report;
    const double pi = 3.14159265358979323846;
    for (const auto& [edge, angles] : opp)
        if (angles.size() == 2) {
            double s = angles[0] + angles[1];
            if (s > pi + 1e-12) report.push_back({edge.first, edge.second, s});
        }
    return report;
}

inline void save_mesh(const Mesh& mesh, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_mesh: cannot open " + path);
    out << "mesh2d " << (mesh.mode() == MeshMode::Axisymmetric ? "axisymmetric" : "cartesian")
        << ' ' << mesh.n_nodes() << ' ' << mesh.n_triangles() << ' '
        << mesh.boundary_edges().size() << '\n';
    for (const auto& p : mesh.nodes())
        out << format_double(p.a) << ' ' << format_double(p.b) << '\n';
    for (const auto& t : mesh.triangles()) out << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    for (const auto& e : mesh.boundary_edges())
        out << e.n0 << ' ' << e.n1 << ' ' << to_string(e.tag) << '\n';
    if (!out) throw std::runtime_error("save_mesh: write failed for " + path);
}

inline Mesh load_mesh(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_mesh: cannot open " + path);
    std::string line;
    auto next_tokens = [&](std::size_t expect) {
        while (std::getline(in, line)) {
            auto toks = split_ws(line);
            if (toks.empty()) continue;
            if (toks.size() != expect)
                throw std::runtime_error("load_mesh: malformed line '" + line + "'");
            return toks;
        }
        throw std::runtime_error("load_mesh: unexpected end of file");
    };
    auto header = next_tokens(5);
    if (header[0] != "mesh2d") throw std::runtime_error("load_mesh: missing mesh2d header");
    MeshMode mode;
    if (header[1] == "axisymmetric") mode = MeshMode::Axisymmetric;
    else if (header[1] == "cartesian") mode = MeshMode::Cartesian;
    else throw std::runtime_error("load_mesh: unknown mode '" + std::string(header[1]) + "'");
    long nn = parse_long(header[2]), nt = parse_long(header[3]), nbe = parse_long(header[4]);
    if (nn <= 0 || nt <= 0 || nbe < 0) throw std::runtime_error("load_mesh: invalid counts");

    std::vector<Point2> nodes(nn);
    for (long i = 0; i < nn; ++i) {
        auto t = next_tokens(2);
        nodes[i] = {parse_double(t[0]), parse_double(t[1])};
    }
    std::vector<std::array<int, 3>> tris(nt);
    for (long i = 0; i < nt; ++i) {
        auto t = next_tokens(3);
        tris[i] = {int(parse_long(t[0])), int(parse_long(t[1])), int(parse_long(t[2]))};
    }
    std::vector<BoundaryEdge> bedges(nbe);
    for (long i = 0; i < nbe; ++i) {
        auto t = next_tokens(3);
        bedges[i] = {int(parse_long(t[0])), int(parse_long(t[1])), region_tag_from_string(t[2])};
    }
    return Mesh(std::move(nodes), std::move(tris), std::move(bedges), mode);
}

}  // namespace cleftsim
