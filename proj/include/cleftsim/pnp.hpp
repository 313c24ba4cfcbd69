#pragma once

/// @file pnp.hpp
/// Tier-one solver: the full Poisson-Nernst-Planck system on a tagged 2D
/// mesh (axisymmetric or Cartesian), discretized with EAFE stiffness and
/// lumped mass. Stationary problems use Gummel decoupling between the
/// semilinear Poisson equation and the per-species continuity equations;
/// backward Euler steps solve the fully coupled system by damped Newton.
/// Membrane boundaries carry GHK or Hodgkin-Huxley channel fluxes plus the
/// capacitive displacement condition; substrate and far-field boundaries
/// carry capacitive and effective-leak Robin data; bath boundaries are
/// Dirichlet.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleftsim/core.hpp"
#include "cleftsim/eafe.hpp"
#include "cleftsim/membrane.hpp"
#include "cleftsim/mesh.hpp"
#include "cleftsim/sparse.hpp"

namespace cleftsim {

enum class MembraneKind { Ghk, Hh };

/// Role a tagged boundary plays in the PNP problem.
enum class BoundaryKind {
    None,       // symmetry axis / insulating wall: natural no-flux
    Membrane,   // cell membrane: channel flux + capacitance C_M to V_cell
    Substrate,  // chip surface: no species flux, capacitance C_S to V_G
    FarField,   // truncation boundary: effective C*, per-species leak v*
    Bath        // reservoir: Dirichlet bath concentrations and potential
};

struct GummelConfig {
    double tol_phi = 2.6e-8;    // V, about 1e-6 thermal voltages
    double tol_c = 1e-8;        // relative, per species
    int max_iter = 100;         // outer decoupled iterations (stationary solves)
    double damping = 1.0;       // mixing applied to the potential update
    int anderson_depth = 4;     // history length of the outer accelerator
    int newton_max_iter = 30;   // coupled Newton iterations (transient steps)
};

struct GummelReport {
    bool converged = false;
    int iterations = 0;
    std::vector<double> dphi_history;  // max-norm potential update per iteration
    double final_dc_rel = 0.0;
};

/// Backward Euler step sequence: each stimulus segment restarts a geometric
/// ramp dt0 * growth^k after n_hold steps at dt0, capped at dt_max and
/// clipped so every segment boundary is hit exactly.
struct TimeSchedule {
    std::vector<double> steps;

    static TimeSchedule build(const StimulusWaveform& wf, double dt0, int n_hold, double growth,
                              double dt_max) {
        if (!(dt0 > 0.0) || !(growth >= 1.0) || !(dt_max >= dt0))
            throw std::invalid_argument("TimeSchedule: need dt0 > 0, growth >= 1, dt_max >= dt0");
        wf.validate();
        TimeSchedule ts;
        for (const auto& seg : wf.segments) {
            double t = seg.t0;
            double dt = dt0;
            int k = 0;
            while (t < seg.t1 - 1e-12 * wf.t_final()) {
                if (k >= n_hold) dt = std::min(dt * growth, dt_max);
                double step = std::min(dt, seg.t1 - t);
                ts.steps.push_back(step);
                t += step;
                ++k;
            }
        }
        return ts;
    }

    double total() const {
        double s = 0.0;
        for (double d : steps) s += d;
        return s;
    }
};

/// Everything that defines one tier-one simulation.
struct PnpScenario {
    const Mesh* mesh = nullptr;
    BathComposition composition;
    PhysicalConstants constants{};
    CouplingParams coupling{};
    StimulusWaveform waveform{};
    MembraneKind membrane = MembraneKind::Ghk;
    HhChannelSet hh{};
    std::map<RegionTag, BoundaryKind> boundary = default_boundary();
    double bath_potential = 0.0;
    GummelConfig gummel{};
    double dt0 = 1e-8;
    int n_hold = 20;
    double dt_growth = 1.5;
    double dt_max = 5e-5;

    explicit PnpScenario(BathComposition comp) : composition(std::move(comp)) {}

    static std::map<RegionTag, BoundaryKind> default_boundary() {
        return {{RegionTag::Cell, BoundaryKind::Membrane},
                {RegionTag::Sub, BoundaryKind::Substrate},
                {RegionTag::Ef, BoundaryKind::FarField},
                {RegionTag::Lateral, BoundaryKind::Bath},
                {RegionTag::Axis, BoundaryKind::None},
                {RegionTag::Dirichlet, BoundaryKind::Bath},
                {RegionTag::Neumann, BoundaryKind::None}};
    }

    double thermal() const { return thermal_voltage(constants); }
};

struct PnpState {
    double time = 0.0;
    std::vector<double> phi;                 // nodal potential (V)
    std::vector<std::vector<double>> conc;   // [species][node] (mol/m^3)
    std::vector<GatingState> gating;         // nodal HH gates (membrane nodes)
};

namespace detail {

/// Damped Newton solve of the semilinear Poisson-Boltzmann system
///   A phi = b + w .* rho(phi),
/// where A carries the dielectric stiffness, Robin couplings, and Dirichlet
/// elimination, w is the nodal measure (zero on constrained rows), and the
/// charge density uses Slotboom-frozen densities anchored at phi_ref:
///   rho_i(phi) = F sum_k z_k c_k,i exp(-z_k (phi - phi_ref_i)/V_th).
/// This full screening response inside the potential update is what makes
/// the outer Gummel decoupling contract across large stimulus jumps.
inline std::vector<double> poisson_boltzmann_newton(
    const CsrMatrix& A, const std::vector<double>& b, const std::vector<double>& w,
    const std::vector<std::vector<double>>& conc, const std::vector<double>& phi_ref,
    const std::vector<int>& valence, double F, double V_th, double tol, int max_iter) {
    const int n = A.n_rows;
    std::vector<int> diag(n, -1);
    for (int i = 0; i < n; ++i)
        for (int k = A.row_ptr[i]; k < A.row_ptr[i + 1]; ++k)
            if (A.col[k] == i) diag[i] = k;

    auto boltzmann = [&](double phi_i, int node, double& rho, double& drho) {
        rho = 0.0;
        drho = 0.0;
        for (std::size_t s = 0; s < conc.size(); ++s) {
            double x = -valence[s] * (phi_i - phi_ref[node]) / V_th;
            double c = conc[s][node] * std::exp(std::clamp(x, -60.0, 60.0));
            rho += F * valence[s] * c;
            drho += F * double(valence[s]) * valence[s] * c / V_th;
        }
    };
    auto residual = [&](const std::vector<double>& phi, std::vector<double>& r) {
        r = A.multiply(phi);
        double norm = 0.0;
        for (int i = 0; i < n; ++i) {
            double rho, drho;
            boltzmann(phi[i], i, rho, drho);
            r[i] -= b[i] + w[i] * rho;
            norm += r[i] * r[i];
        }
        return std::sqrt(norm);
    };

    std::vector<double> phi = phi_ref, r;
    double rnorm = residual(phi, r);
    for (int it = 0; it < max_iter; ++it) {
        CsrMatrix J = A;
        std::vector<double> rhs = b;
        for (int i = 0; i < n; ++i) {
            double rho, drho;
            boltzmann(phi[i], i, rho, drho);
            J.val[diag[i]] += w[i] * drho;
            rhs[i] += w[i] * (rho + drho * phi[i]);
        }
        std::vector<double> next = solve_linear(J, rhs);
        double step = 1.0;
        for (int bt = 0; bt < 12; ++bt) {
            std::vector<double> trial(n);
            for (int i = 0; i < n; ++i) trial[i] = phi[i] + step * (next[i] - phi[i]);
            std::vector<double> rt;
            double tnorm = residual(trial, rt);
            if (tnorm <= rnorm || rnorm == 0.0) {
                double dmax = 0.0;
                for (int i = 0; i < n; ++i) dmax = std::max(dmax, std::abs(trial[i] - phi[i]));
                phi = std::move(trial);
                rnorm = tnorm;
                if (dmax <= tol) return phi;
                break;
            }
            step *= 0.5;
            if (bt == 11) {
                phi = std::move(trial);
                rnorm = tnorm;
            }
        }
    }
    throw std::runtime_error("poisson_boltzmann_newton: no convergence");
}

/// Damped Newton driver for a monolithic potential/concentration system with
/// unknowns [phi; c_1; ...; c_K]. residual(x) must return the stacked
/// residual and jacobian(x) the matching matrix for the state of the last
/// residual call. Steps are capped at a few thermal voltages in phi and kept
/// inside the positive cone in c, then Armijo-backtracked on the Jacobian-
/// scaled residual norm. Decoupled alternation is useless on this system
/// once the time step exceeds the dielectric relaxation time (error modes
/// smoother than the Debye length relax only through the charge/potential
/// feedback that a split reproduces one increment per sweep); the coupled
/// Jacobian contracts them all at Newton rate.
template <class ResidualFn, class JacobianFn>
inline GummelReport coupled_newton(PnpState& s, int n, int K, ResidualFn&& residual,
                                   JacobianFn&& jacobian, double V_th, double tol_phi,
                                   double tol_c, int max_iter, const char* what) {
    const int N = (K + 1) * n;
    GummelReport rep;
    std::vector<double> resid = residual(static_cast<const PnpState&>(s));

    for (int it = 0; it < max_iter; ++it) {
        CsrMatrix jac = jacobian(static_cast<const PnpState&>(s));
        std::vector<double> scale(N);
        for (int i = 0; i < N; ++i) scale[i] = std::max(std::abs(jac(i, i)), 1e-300);
        auto merit = [&](const std::vector<double>& r) {
            double sum = 0.0;
            for (int i = 0; i < N; ++i) {
                double v = r[i] / scale[i];
                sum += v * v;
            }
            return std::sqrt(sum);
        };
        double m0 = merit(resid);

        std::vector<double> rhs(N);
        for (int i = 0; i < N; ++i) rhs[i] = -resid[i];
        std::vector<double> delta = solve_linear(jac, rhs);

        double dphi_full = 0.0;
        for (int i = 0; i < n; ++i) dphi_full = std::max(dphi_full, std::abs(delta[i]));
        double t = std::min(1.0, 4.0 * V_th / std::max(dphi_full, 1e-300));
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < n; ++i) {
                double ci = s.conc[k][i], di = delta[(k + 1) * n + i];
                if (di < 0.0 && ci > 0.0) t = std::min(t, -0.95 * ci / di);
            }

        PnpState trial = s;
        std::vector<double> trial_resid;
        for (int halvings = 0;; ++halvings) {
            for (int i = 0; i < n; ++i) trial.phi[i] = s.phi[i] + t * delta[i];
            for (int k = 0; k < K; ++k)
                for (int i = 0; i < n; ++i)
                    trial.conc[k][i] = s.conc[k][i] + t * delta[(k + 1) * n + i];
            trial_resid = residual(static_cast<const PnpState&>(trial));
            if (merit(trial_resid) <= m0 * (1.0 - 1e-4 * t) || halvings >= 10) break;
            t *= 0.5;
        }

        double dphi = t * dphi_full;
        double dc_rel = 0.0;
        for (int k = 0; k < K; ++k) {
            double dmax = 0.0, cmax = 0.0;
            for (int i = 0; i < n; ++i) {
                dmax = std::max(dmax, std::abs(t * delta[(k + 1) * n + i]));
                cmax = std::max(cmax, std::abs(trial.conc[k][i]));
            }
            if (cmax > 0.0) dc_rel = std::max(dc_rel, dmax / cmax);
        }
        s = std::move(trial);
        resid = std::move(trial_resid);
        rep.dphi_history.push_back(dphi);
        rep.iterations = it + 1;
        rep.final_dc_rel = dc_rel;
#ifdef CLEFTSIM_GUMMEL_TRACE
        std::fprintf(stderr, "newton it %3d t=%.4f dphi=%.6e dc_rel=%.3e\n", it + 1, t, dphi,
                     dc_rel);
#endif
        if (dphi <= tol_phi && dc_rel <= tol_c) {
            rep.converged = true;
            break;
        }
    }
    if (!rep.converged) {
        char msg[160];
        std::snprintf(msg, sizeof msg, "%s: coupled Newton stalled after %d iterations (|dphi| = %.3e V)",
                      what, max_iter, rep.dphi_history.empty() ? 0.0 : rep.dphi_history.back());
        throw std::runtime_error(msg);
    }
    return rep;
}

}  // namespace detail

/// Length-weighted (and radius-weighted in axisymmetric mode) average of a
/// nodal field over the boundary edges of one tag, minus a reference value.
/// The optional window restricts to nodes whose first coordinate lies in
/// [window->first, window->second].
inline double probe_electrode_average(const Mesh& mesh, const std::vector<double>& values,
                                      RegionTag tag, double reference = 0.0,
                                      std::optional<std::pair<double, double>> window = {}) {
    double acc = 0.0, meas = 0.0;
    for (const auto& e : mesh.boundary_edges()) {
        if (e.tag != tag) continue;
        const Point2& p = mesh.nodes()[e.n0];
        const Point2& q = mesh.nodes()[e.n1];
        double len = std::hypot(q.a - p.a, q.b - p.b);
        for (int node : {e.n0, e.n1}) {
            const Point2& x = mesh.nodes()[node];
            if (window && (x.a < window->first || x.a > window->second)) continue;
            double w = 0.5 * len * (mesh.mode() == MeshMode::Axisymmetric ? x.a : 1.0);
            acc += w * values[node];
            meas += w;
        }
    }
    if (!(meas > 0.0)) throw std::runtime_error("probe_electrode_average: empty probe region");
    return acc / meas - reference;
}

/// Lumped-measure domain average of a nodal field.
inline double domain_average(const Mesh& mesh, const std::vector<double>& values) {
    std::vector<double> m = lumped_mass_vector(mesh);
    double acc = 0.0, meas = 0.0;
    for (int i = 0; i < mesh.n_nodes(); ++i) {
        acc += m[i] * values[i];
        meas += m[i];
    }
    return acc / meas;
}

class PnpSolver {
  public:
    explicit PnpSolver(const PnpScenario& sc)
        : sc_(sc), mesh_(*sc.mesh), V_th_(sc.thermal()) {
        if (!sc.mesh) throw std::invalid_argument("PnpSolver: scenario has no mesh");
        sc.waveform.validate();
        sc.coupling.validate();
    }

    const PnpScenario& scenario() const { return sc_; }

    /// Bath-valued state (phi = bath potential, c = c_bath, gates at the
    /// holding membrane voltage), then a stationary Gummel solve at the
    /// t = 0 stimulus. Species without any Dirichlet or Robin coupling are
    /// left uniform (a closed domain has no stationary anchor).
    PnpState initial_state() {
        PnpState s;
        s.time = 0.0;
        s.phi.assign(mesh_.n_nodes(), sc_.bath_potential);
        for (const auto& sp : sc_.composition.species())
            s.conc.push_back(std::vector<double>(mesh_.n_nodes(), sp.c_bath));
        const auto& seg = sc_.waveform.segments.front();
        s.gating.assign(mesh_.n_nodes(), steady_gating(seg.V_cell - sc_.bath_potential + sc_.hh.v_shift));
        stationary_solve(s, seg);
        return s;
    }

    /// Stationary solve at a frozen stimulus: Gummel sweeps carry the state
    /// into the Newton basin, then the coupled Newton without mass terms
    /// finishes. The decoupled sweeps alone stall near 1e-3 relative accuracy
    /// whenever the domain carries bulk current (their loop gain on smooth
    /// conductivity modes approaches one), so they are run with a loose
    /// target and the quadratic phase does the converging.
    GummelReport stationary_solve(PnpState& s, const StimulusWaveform::Segment& stim) {
        GummelReport warm = iterate(s, stim, 0.0, s, 1e-4, 1e-2, 40);
        if (warm.converged && warm.dphi_history.back() <= sc_.gummel.tol_phi &&
            warm.final_dc_rel <= sc_.gummel.tol_c)
            return warm;
        GummelReport rep = transient_newton(s, stim, 0.0, s, "stationary_solve");
        rep.iterations += warm.iterations;
        rep.dphi_history.insert(rep.dphi_history.begin(), warm.dphi_history.begin(),
                                warm.dphi_history.end());
        return rep;
    }

    /// One backward Euler step of length dt at the segment active over
    /// (time, time + dt); gates advance first at the lagged potential.
    GummelReport transient_step(PnpState& s, double dt) {
        if (!(dt > 0.0)) throw std::invalid_argument("transient_step: dt must be positive");
        const auto& seg = sc_.waveform.at(s.time + 0.5 * dt);
        if (sc_.membrane == MembraneKind::Hh)
            for (int i : membrane_nodes())
                s.gating[i] =
                    gating_step(s.gating[i], seg.V_cell - s.phi[i] + sc_.hh.v_shift, dt);
        PnpState old = s;
        GummelReport rep = transient_newton(s, seg, 1.0 / dt, old);
        s.time = old.time + dt;
        return rep;
    }

    /// Outward membrane current density (A/m^2) carried by one species at a
    /// membrane node, consistent with the Robin data used in assembly.
    double membrane_current_density(const PnpState& s, const StimulusWaveform::Segment& stim,
                                    std::size_t species, int node) const {
        const IonSpecies& sp = sc_.composition[species];
        FluxBC bc = species_membrane_bc(s, stim, species, node);
        double inward_molar = bc.beta - bc.alpha * s.conc[species][node];
        return sp.z * sc_.constants.faraday() * inward_molar;
    }

    /// Total membrane current (A in axisymmetric mode including the 2*pi
    /// factor, A/m in Cartesian mode) per species over all Membrane edges.
    std::vector<double> membrane_total_currents(const PnpState& s,
                                                const StimulusWaveform::Segment& stim) const {
        std::vector<double> totals(sc_.composition.size(), 0.0);
        for (const auto& e : mesh_.boundary_edges()) {
            if (kind_of(e.tag) != BoundaryKind::Membrane) continue;
            const Point2& p = mesh_.nodes()[e.n0];
            const Point2& q = mesh_.nodes()[e.n1];
            double len = std::hypot(q.a - p.a, q.b - p.b);
            for (std::size_t k = 0; k < totals.size(); ++k)
                for (int node : {e.n0, e.n1}) {
                    double w = 0.5 * len;
                    if (mesh_.mode() == MeshMode::Axisymmetric)
                        w *= 2.0 * pi * mesh_.nodes()[node].a;
                    totals[k] += w * membrane_current_density(s, stim, k, node);
                }
        }
        return totals;
    }

    std::vector<int> membrane_nodes() const {
        std::vector<char> mark(mesh_.n_nodes(), 0);
        for (const auto& e : mesh_.boundary_edges())
            if (kind_of(e.tag) == BoundaryKind::Membrane) mark[e.n0] = mark[e.n1] = 1;
        std::vector<int> out;
        for (int i = 0; i < mesh_.n_nodes(); ++i)
            if (mark[i]) out.push_back(i);
        return out;
    }

  private:
    const PnpScenario& sc_;
    const Mesh& mesh_;
    double V_th_;

    BoundaryKind kind_of(RegionTag tag) const {
        auto it = sc_.boundary.find(tag);
        return it == sc_.boundary.end() ? BoundaryKind::None : it->second;
    }

    bool tag_present(BoundaryKind kind) const {
        for (const auto& e : mesh_.boundary_edges())
            if (kind_of(e.tag) == kind) return true;
        return false;
    }

    /// Gated channel conductance of one species at one membrane node.
    double hh_node_conductance(const PnpState& s, std::size_t species, int node) const {
        const IonSpecies& sp = sc_.composition[species];
        const GatingState& gs = s.gating[node];
        if (sp.name == "K") {
            double n2 = gs.n * gs.n;
            return sc_.hh.g_K_max * n2 * n2;
        }
        if (sp.name == "Na") return sc_.hh.g_Na_max * gs.m * gs.m * gs.m * gs.h;
        if (sp.name == "Cl") return sc_.hh.g_Cl;
        return 0.0;
    }

    /// Robin data for one species at one membrane node: GHK split, or the
    /// HH ohmic current linearized in the local cleft concentration through
    /// the Nernst potential (keeps alpha >= 0, hence the M-matrix).
    FluxBC species_membrane_bc(const PnpState& s, const StimulusWaveform::Segment& stim,
                               std::size_t species, int node) const {
        const IonSpecies& sp = sc_.composition[species];
        double phi = s.phi[node];
        if (sc_.membrane == MembraneKind::Ghk) {
            if (!(sp.p > 0.0)) return {0.0, 0.0};
            return ghk_flux_split({sp.z, sp.p}, stim.V_cell, phi, sp.c_cell, V_th_);
        }
        double g = hh_node_conductance(s, species, node);
        if (!(g > 0.0)) return {0.0, 0.0};
        double c_old = std::max(s.conc[species][node], 1e-12);
        double F = sc_.constants.faraday();
        double E = nernst_potential(sp.z, sp.c_cell, c_old, V_th_);
        double j = g * (stim.V_cell - phi - E);  // outward, A/m^2
        double f_in = j / (sp.z * F);
        double alpha = g * V_th_ / (double(sp.z) * sp.z * F * c_old);
        return {alpha, f_in + alpha * c_old};
    }

    /// d(alpha c - beta)/d(phi) of the membrane Robin data at one node, i.e.
    /// the potential sensitivity of the outward channel flux.
    double membrane_bc_dphi(const PnpState& s, const StimulusWaveform::Segment& stim,
                            std::size_t species, int node) const {
        const IonSpecies& sp = sc_.composition[species];
        if (sc_.membrane == MembraneKind::Ghk) {
            if (!(sp.p > 0.0)) return 0.0;
            double x = sp.z * (stim.V_cell - s.phi[node]) / V_th_;
            double dx = -sp.z / V_th_;
            return sp.p * dx *
                   (bernoulli_derivative(x) * s.conc[species][node] +
                    bernoulli_derivative(-x) * sp.c_cell);
        }
        double g = hh_node_conductance(s, species, node);
        return g / (sp.z * sc_.constants.faraday());
    }

    /// Pins the potential gauge on closed domains.
    static void pin_node(AssembledSystem& sys, int node, double value) {
        sys.is_dirichlet[node] = 1;
        eliminate_row_col(sys.matrix, sys.rhs, node, value);
    }

    /// Assembles the linear part of the Gauss law (permittivity stiffness,
    /// capacitive Robin data, bath Dirichlet rows); the space charge is not
    /// included. Pins one node on otherwise unconstrained domains.
    AssembledSystem poisson_system(const StimulusWaveform::Segment& stim) const {
        ModelProblem prob(mesh_);
        std::fill(prob.mu.begin(), prob.mu.end(), sc_.constants.eps_water);
        bool constrained = false;
        for (const auto& [tag, kind] : sc_.boundary) {
            if (!mesh_.has_tag(tag)) continue;
            switch (kind) {
                case BoundaryKind::Bath:
                    prob.set_dirichlet(tag, sc_.bath_potential);
                    constrained = true;
                    break;
                case BoundaryKind::Membrane:
                    prob.set_flux(tag, {sc_.coupling.C_M, sc_.coupling.C_M * stim.V_cell});
                    constrained = true;
                    break;
                case BoundaryKind::Substrate:
                    prob.set_flux(tag, {sc_.coupling.C_S, sc_.coupling.C_S * stim.V_G});
                    constrained = true;
                    break;
                case BoundaryKind::FarField: {
                    double cs = sc_.coupling.effective_C_star();
                    prob.set_flux(tag, {cs, cs * sc_.bath_potential});
                    constrained = true;
                    break;
                }
                case BoundaryKind::None:
                    break;
            }
        }
        AssembledSystem sys = assemble_system(prob);
        if (!constrained) pin_node(sys, 0, sc_.bath_potential);
        return sys;
    }

    /// Charge weights for the lumped space-charge coupling: the nodal measure,
    /// zeroed on Dirichlet rows of the potential system.
    std::vector<double> charge_weights(const AssembledSystem& sys) const {
        std::vector<double> weight = lumped_mass_vector(mesh_);
        for (int i = 0; i < mesh_.n_nodes(); ++i)
            if (sys.is_dirichlet[i]) weight[i] = 0.0;
        return weight;
    }

    /// Potential update of the Gummel map: the nonlinear Poisson equation
    /// -div(eps grad phi) = rho(phi) with Slotboom-frozen densities and the
    /// capacitive Robin data, solved by damped Newton.
    std::vector<double> poisson_update(const PnpState& s, const StimulusWaveform::Segment& stim) {
        AssembledSystem sys = poisson_system(stim);
        std::vector<double> weight = charge_weights(sys);
        std::vector<int> valence(sc_.composition.size());
        for (std::size_t k = 0; k < sc_.composition.size(); ++k)
            valence[k] = sc_.composition[k].z;
        return detail::poisson_boltzmann_newton(sys.matrix, sys.rhs, weight, s.conc, s.phi,
                                                valence, sc_.constants.faraday(), V_th_,
                                                0.01 * sc_.gummel.tol_phi, 60);
    }

    /// Builds the continuity problem for one species at the potential held in
    /// s; inv_dt = 0 is the stationary equation. Returns false when the
    /// species has no boundary anchor and no mass term, i.e. the stationary
    /// equation is singular.
    bool species_problem(ModelProblem& prob, const PnpState& s, const PnpState& old,
                         const StimulusWaveform::Segment& stim, std::size_t species,
                         double inv_dt) const {
        const IonSpecies& sp = sc_.composition[species];
        for (int i = 0; i < mesh_.n_nodes(); ++i) {
            prob.psi[i] = -sp.z * s.phi[i] / V_th_;
            prob.mu[i] = sp.D;
            prob.c_react[i] = inv_dt;
            prob.f_src[i] = inv_dt * old.conc[species][i];
        }
        bool anchored = inv_dt > 0.0;
        for (const auto& [tag, kind] : sc_.boundary) {
            if (!mesh_.has_tag(tag)) continue;
            switch (kind) {
                case BoundaryKind::Bath:
                    prob.set_dirichlet(tag, sp.c_bath);
                    anchored = true;
                    break;
                case BoundaryKind::Membrane: {
                    std::vector<FluxBC> bcs(mesh_.n_nodes());
                    for (const auto& e : mesh_.boundary_edges())
                        if (e.tag == tag)
                            for (int node : {e.n0, e.n1})
                                bcs[node] = species_membrane_bc(s, stim, species, node);
                    prob.set_flux(tag, std::move(bcs));
                    anchored = true;
                    break;
                }
                case BoundaryKind::FarField: {
                    double v = sc_.coupling.effective_v_star(sp.p);
                    if (v > 0.0) {
                        prob.set_flux(tag, {v, v * sp.c_bath});
                        anchored = true;
                    }
                    break;
                }
                case BoundaryKind::Substrate:
                case BoundaryKind::None:
                    break;
            }
        }
        return anchored;
    }

    /// One continuity solve for a species at frozen potential; skipped (and
    /// false returned) when the species problem is singular.
    bool species_update(PnpState& s, const PnpState& old, const StimulusWaveform::Segment& stim,
                        std::size_t species, double inv_dt) {
        ModelProblem prob(mesh_);
        if (!species_problem(prob, s, old, stim, species, inv_dt)) return false;
        AssembledSystem sys = assemble_system(prob);
        s.conc[species] = solve_linear(sys.matrix, sys.rhs);
        return true;
    }

    struct CoupledParts {
        std::vector<AssembledSystem> species;
        std::vector<char> anchored;
    };

    /// Residual of the coupled system at state x: the Gauss law rows with the
    /// lumped space charge, then one continuity block per species assembled
    /// at the potential in x. parts receives those systems for reuse.
    std::vector<double> coupled_residual(const PnpState& x, const PnpState& old,
                                         const StimulusWaveform::Segment& stim, double inv_dt,
                                         const AssembledSystem& ap, const std::vector<double>& w,
                                         CoupledParts& parts) const {
        const int n = mesh_.n_nodes();
        const int K = int(sc_.composition.size());
        const double F = sc_.constants.faraday();
        std::vector<double> resid((K + 1) * n, 0.0);
        std::vector<double> r = ap.matrix.multiply(x.phi);
        for (int i = 0; i < n; ++i) {
            double rho = 0.0;
            for (int k = 0; k < K; ++k) rho += sc_.composition[k].z * x.conc[k][i];
            resid[i] = r[i] - ap.rhs[i] - w[i] * F * rho;
        }
        parts.species.assign(K, {});
        parts.anchored.assign(K, 0);
        for (int k = 0; k < K; ++k) {
            ModelProblem prob(mesh_);
            if (!species_problem(prob, x, old, stim, k, inv_dt)) continue;
            parts.anchored[k] = 1;
            parts.species[k] = assemble_system(prob);
            std::vector<double> rk = parts.species[k].matrix.multiply(x.conc[k]);
            for (int i = 0; i < n; ++i) resid[(k + 1) * n + i] = rk[i] - parts.species[k].rhs[i];
        }
        return resid;
    }

    /// d(species residual)/d(potential): the EAFE edge fluxes differentiated
    /// through psi = -z phi / V_th, plus the potential dependence of the
    /// channel Robin data. The edge blocks have exactly zero column sums, so
    /// the coupled update stays mass conservative on closed domains.
    void add_species_phi_block(TripletBuffer& trip, int row_offset, const PnpState& x,
                               const StimulusWaveform::Segment& stim, std::size_t species,
                               const std::vector<char>& skip_row) const {
        const IonSpecies& sp = sc_.composition[species];
        const double dpsi = -sp.z / V_th_;
        const bool axisym = mesh_.mode() == MeshMode::Axisymmetric;
        const std::vector<double>& c = x.conc[species];
        for (const auto& t : mesh_.triangles()) {
            std::array<Point2, 3> pts{mesh_.nodes()[t[0]], mesh_.nodes()[t[1]],
                                      mesh_.nodes()[t[2]]};
            detail::TriangleGeometry g(pts);
            std::array<double, 3> psi{dpsi * x.phi[t[0]], dpsi * x.phi[t[1]],
                                      dpsi * x.phi[t[2]]};
            for (int k = 0; k < 3; ++k) {
                int i = (k + 1) % 3, j = (k + 2) % 3;
                double w = g.omega[k] * sp.D * (axisym ? g.rbar[k] : 1.0);
                double der = w *
                             (bernoulli_derivative(psi[i] - psi[j]) * c[t[i]] +
                              bernoulli_derivative(psi[j] - psi[i]) * c[t[j]]) *
                             dpsi;
                if (der == 0.0) continue;
                if (!skip_row[t[i]]) {
                    trip.add(row_offset + t[i], t[i], der);
                    trip.add(row_offset + t[i], t[j], -der);
                }
                if (!skip_row[t[j]]) {
                    trip.add(row_offset + t[j], t[j], der);
                    trip.add(row_offset + t[j], t[i], -der);
                }
            }
        }
        for (const auto& e : mesh_.boundary_edges()) {
            if (kind_of(e.tag) != BoundaryKind::Membrane) continue;
            const Point2& p = mesh_.nodes()[e.n0];
            const Point2& q = mesh_.nodes()[e.n1];
            double len = std::hypot(q.a - p.a, q.b - p.b);
            for (int node : {e.n0, e.n1}) {
                if (skip_row[node]) continue;
                double wr = axisym ? mesh_.nodes()[node].a : 1.0;
                double d = membrane_bc_dphi(x, stim, species, node);
                if (d != 0.0) trip.add(row_offset + node, node, 0.5 * len * wr * d);
            }
        }
    }

    /// Jacobian of the coupled system: the potential block and the species
    /// blocks on the diagonal, the lumped charge coupling in the potential
    /// rows, and the drift sensitivity in the species rows.
    CsrMatrix coupled_jacobian(const PnpState& x, const StimulusWaveform::Segment& stim,
                               const AssembledSystem& ap, const std::vector<double>& w,
                               const CoupledParts& parts) const {
        const int n = mesh_.n_nodes();
        const int K = int(sc_.composition.size());
        const double F = sc_.constants.faraday();
        TripletBuffer trip((K + 1) * n, (K + 1) * n);
        add_csr_block(trip, ap.matrix, 0, 0);
        for (int i = 0; i < n; ++i)
            if (w[i] != 0.0)
                for (int k = 0; k < K; ++k)
                    trip.add(i, (k + 1) * n + i, -F * sc_.composition[k].z * w[i]);
        for (int k = 0; k < K; ++k) {
            const int off = (k + 1) * n;
            if (!parts.anchored[k]) {
                for (int i = 0; i < n; ++i) trip.add(off + i, off + i, 1.0);
                continue;
            }
            add_csr_block(trip, parts.species[k].matrix, off, off);
            add_species_phi_block(trip, off, x, stim, k, parts.species[k].is_dirichlet);
        }
        return trip.assemble();
    }

    /// One backward Euler step as a damped Newton solve of the coupled
    /// system; the linear potential block and charge weights are frozen per
    /// step, the species systems are rebuilt at every residual evaluation.
    GummelReport transient_newton(PnpState& s, const StimulusWaveform::Segment& stim,
                                  double inv_dt, const PnpState& old,
                                  const char* what = "transient_step") {
        AssembledSystem ap = poisson_system(stim);
        std::vector<double> w = charge_weights(ap);
        CoupledParts parts;
        auto residual = [&](const PnpState& x) {
            return coupled_residual(x, old, stim, inv_dt, ap, w, parts);
        };
        auto jacobian = [&](const PnpState& x) { return coupled_jacobian(x, stim, ap, w, parts); };
        return detail::coupled_newton(s, mesh_.n_nodes(), int(sc_.composition.size()), residual,
                                      jacobian, V_th_, sc_.gummel.tol_phi, sc_.gummel.tol_c,
                                      sc_.gummel.newton_max_iter, what);
    }

    /// Outer decoupling loop: species solves at the current potential, then a
    /// potential solve at the new densities, Anderson-accelerated. The pure
    /// alternation contracts error modes that vary across a few Debye lengths
    /// but barely moves smooth modes; the accelerator removes those. Runs to
    /// the given targets and reports without throwing (the caller decides how
    /// to finish).
    GummelReport iterate(PnpState& s, const StimulusWaveform::Segment& stim, double inv_dt,
                         const PnpState& old, double tol_phi, double tol_c, int max_iter) {
        GummelReport rep;
        AndersonAccelerator acc(sc_.gummel.anderson_depth);
        double best = std::numeric_limits<double>::infinity();
        for (int it = 0; it < max_iter; ++it) {
            double dc_rel = 0.0;
            for (std::size_t k = 0; k < sc_.composition.size(); ++k) {
                std::vector<double> prev = s.conc[k];
                if (!species_update(s, old, stim, k, inv_dt)) continue;
                double dmax = 0.0, scale = 0.0;
                for (int i = 0; i < mesh_.n_nodes(); ++i) {
                    dmax = std::max(dmax, std::abs(s.conc[k][i] - prev[i]));
                    scale = std::max(scale, std::abs(s.conc[k][i]));
                }
                if (scale > 0.0) dc_rel = std::max(dc_rel, dmax / scale);
            }

            std::vector<double> phi_new = poisson_update(s, stim);
            double dphi = 0.0;
            for (int i = 0; i < mesh_.n_nodes(); ++i)
                dphi = std::max(dphi, std::abs(phi_new[i] - s.phi[i]));
            rep.dphi_history.push_back(dphi);
            rep.iterations = it + 1;
            rep.final_dc_rel = dc_rel;
#ifdef CLEFTSIM_GUMMEL_TRACE
            std::fprintf(stderr, "gummel it %3d dphi=%.6e dc_rel=%.3e\n", it + 1, dphi, dc_rel);
#endif
            if (dphi <= tol_phi && dc_rel <= tol_c) {
                s.phi = phi_new;
                rep.converged = true;
                break;
            }
            if (dphi > 4.0 * best) {
                acc.reset();
                for (int i = 0; i < mesh_.n_nodes(); ++i)
                    s.phi[i] += 0.5 * (phi_new[i] - s.phi[i]);
            } else {
                s.phi = acc.next(s.phi, phi_new, sc_.gummel.damping);
            }
            best = std::min(best, dphi);
        }
        return rep;
    }
};

/// Spec-level convenience wrappers.
inline PnpState initial_state(const PnpScenario& sc) { return PnpSolver(sc).initial_state(); }

inline GummelReport gummel_solve(const PnpScenario& sc, PnpState& state,
                                 const StimulusWaveform::Segment& stim) {
    return PnpSolver(sc).stationary_solve(state, stim);
}

inline GummelReport transient_step(const PnpScenario& sc, PnpState& state, double dt) {
    return PnpSolver(sc).transient_step(state, dt);
}

/// Column-oriented time series of one voltage-clamp run.
struct ClampSeries {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw std::invalid_argument("ClampSeries: no column " + name);
    }
};

struct ClampResult {
    ClampSeries series;
    PnpState state;  // final state
    int total_gummel_iterations = 0;
};

/// Full driver: equilibrate at the first stimulus value, then march the
/// backward Euler schedule recording potential probes, per-species membrane
/// currents, and concentration extrema after every step.
inline ClampResult run_voltage_clamp(const PnpScenario& sc) {
    PnpSolver solver(sc);
    ClampResult out;
    out.state = solver.initial_state();

    out.series.columns = {"time", "V_cell", "V_G", "phi_max", "phi_min"};
    bool has_membrane = !solver.membrane_nodes().empty();
    if (has_membrane) out.series.columns.push_back("phi_membrane_avg");
    for (const auto& sp : sc.composition.species()) {
        out.series.columns.push_back("I_" + sp.name);
        out.series.columns.push_back("c_" + sp.name + "_min");
        out.series.columns.push_back("c_" + sp.name + "_max");
    }

    auto record = [&](const PnpState& s, const StimulusWaveform::Segment& stim) {
        std::vector<double> row{s.time, stim.V_cell, stim.V_G,
                                *std::max_element(s.phi.begin(), s.phi.end()),
                                *std::min_element(s.phi.begin(), s.phi.end())};
        if (has_membrane) {
            double acc = 0.0;
            int cnt = 0;
            for (int i : solver.membrane_nodes()) {
                acc += s.phi[i];
                ++cnt;
            }
            row.push_back(acc / cnt);
        }
        std::vector<double> currents = solver.membrane_total_currents(s, stim);
        for (std::size_t k = 0; k < sc.composition.size(); ++k) {
            row.push_back(currents[k]);
            row.push_back(*std::min_element(s.conc[k].begin(), s.conc[k].end()));
            row.push_back(*std::max_element(s.conc[k].begin(), s.conc[k].end()));
        }
        out.series.rows.push_back(std::move(row));
    };

    record(out.state, sc.waveform.at(0.0));
    TimeSchedule ts = TimeSchedule::build(sc.waveform, sc.dt0, sc.n_hold, sc.dt_growth, sc.dt_max);
    for (double dt : ts.steps) {
        GummelReport rep = solver.transient_step(out.state, dt);
        out.total_gummel_iterations += rep.iterations;
        record(out.state, sc.waveform.at(out.state.time - 0.5 * dt));
    }
    return out;
}

}  // namespace cleftsim
