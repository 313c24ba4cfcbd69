#pragma once

/// @file reduced.hpp
/// Reduced cleft models on a 1D radial grid:
///  - tier two, the z-averaged PNP system closed with Scharfetter-Gummel
///    boundary-layer fluxes through thin layers of width H at the membrane
///    and substrate (solve_25d, pabst_solve);
///  - tier three, the area-contact model: a parabolic equation for the
///    cleft potential with lumped capacitances, optionally coupled to
///    uniform cleft-concentration ODEs (area_contact_step).
/// Radial fluxes use the same Bernoulli two-point stencil as the 2D EAFE
/// elements, so lateral transport is exactly mass-conserving.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleftsim/core.hpp"
#include "cleftsim/membrane.hpp"
#include "cleftsim/pnp.hpp"
#include "cleftsim/sparse.hpp"

namespace cleftsim {

/// First zero of the Bessel function J0; sets the fundamental radial mode
/// of a disc with a clamped rim.
inline constexpr double bessel_j01 = 2.40482555769577;

/// Radial node set on [0, R]; node 0 sits on the axis.
struct RadialGrid {
    std::vector<double> r;

    static RadialGrid uniform(double R, int n_cells) {
        if (!(R > 0.0) || n_cells < 2)
            throw std::invalid_argument("RadialGrid: need R > 0 and at least 2 cells");
        RadialGrid g;
        g.r.resize(n_cells + 1);
        for (int i = 0; i <= n_cells; ++i) g.r[i] = R * double(i) / n_cells;
        g.r.back() = R;
        return g;
    }

    int n() const { return int(r.size()); }
    double R() const { return r.back(); }

    /// Trapezoidal lumped measure m_i = r_i (h_left + h_right) / 2; the
    /// axis node has measure zero and is slaved through the stiffness row.
    std::vector<double> lumped_mass() const {
        std::vector<double> m(r.size(), 0.0);
        for (std::size_t i = 0; i + 1 < r.size(); ++i) {
            double h = r[i + 1] - r[i];
            m[i] += 0.5 * h * r[i];
            m[i + 1] += 0.5 * h * r[i + 1];
        }
        return m;
    }
};

/// Adds the radial two-point Bernoulli (Scharfetter-Gummel) stiffness for
/// the primal variable: edge weight r_mid * mu_edge / h, entries as in the
/// 2D EAFE elements. Column sums vanish identically, so lateral transport
/// conserves mass for any psi.
inline void add_radial_stiffness(TripletBuffer& trip, const RadialGrid& g,
                                 const std::vector<double>& mu, const std::vector<double>& psi,
                                 double scale = 1.0) {
    for (int i = 0; i + 1 < g.n(); ++i) {
        int j = i + 1;
        double h = g.r[j] - g.r[i];
        double w = scale * 0.5 * (g.r[i] + g.r[j]) * 0.5 * (mu[i] + mu[j]) / h;
        double bij = bernoulli(psi[i] - psi[j]);
        double bji = bernoulli(psi[j] - psi[i]);
        trip.add(i, i, w * bij);
        trip.add(i, j, -w * bji);
        trip.add(j, j, w * bji);
        trip.add(j, i, -w * bij);
    }
}

/// Scharfetter-Gummel closure fluxes through one boundary layer of width H:
/// outward molar flux f_top = (D/H)[Be(x) c_bar - Be(-x) c_top] and outward
/// displacement flux g_top = -eps (phi_top - phi_bar)/H, with
/// x = z (phi_top - phi_bar)/V_th.
struct SgBoundaryFlux {
    double f_top = 0.0;  // mol/(m^2 s), positive out of the bulk
    double g_top = 0.0;  // C/m^2, positive out of the bulk
};

inline SgBoundaryFlux sg_boundary_fluxes(double phi_top, double phi_bar, double c_top,
                                         double c_bar, const IonSpecies& sp, double H,
                                         double V_th, const PhysicalConstants& pc = {}) {
    if (!(H > 0.0)) throw std::invalid_argument("sg_boundary_fluxes: H must be positive");
    double x = sp.z * (phi_top - phi_bar) / V_th;
    SgBoundaryFlux out;
    out.f_top = sp.D / H * (bernoulli(x) * c_bar - bernoulli(-x) * c_top);
    out.g_top = -pc.eps_water * (phi_top - phi_bar) / H;
    return out;
}

/// Layer-edge values produced by the tier-two closures at one radial node.
struct LayerClosure {
    double phi_top = 0.0;
    double phi_bot = 0.0;
    std::vector<double> c_top;
    std::vector<double> c_bot;
};

/// Capacitive divider for the layer-surface potentials and the matched
/// layer/channel concentrations:
///  - phi_top = (C_M V_cell + (eps/H) phi_bar) / (C_M + eps/H), same for
///    phi_bot with C_S and V_G;
///  - c_top from equating the layer SG flux with the GHK channel flux
///    (Boltzmann factor when the species has no channel);
///  - c_bot is the Boltzmann value at the substrate (blocked).
inline LayerClosure closure_top_bot(double phi_bar, const std::vector<double>& c_bar,
                                    double V_cell, double V_G, const BathComposition& comp,
                                    const CouplingParams& cp, double V_th,
                                    const PhysicalConstants& pc = {}) {
    if (c_bar.size() != comp.size())
        throw std::invalid_argument("closure_top_bot: species/concentration length mismatch");
    double H = cp.layer_width();
    double eps_H = pc.eps_water / H;
    LayerClosure cl;
    cl.phi_top = (cp.C_M * V_cell + eps_H * phi_bar) / (cp.C_M + eps_H);
    cl.phi_bot = (cp.C_S * V_G + eps_H * phi_bar) / (cp.C_S + eps_H);
    cl.c_top.resize(comp.size());
    cl.c_bot.resize(comp.size());
    for (std::size_t k = 0; k < comp.size(); ++k) {
        const IonSpecies& sp = comp[k];
        double x = sp.z * (cl.phi_top - phi_bar) / V_th;
        double y = sp.z * (V_cell - cl.phi_top) / V_th;
        double w = sp.p * H / sp.D;
        cl.c_top[k] = (bernoulli(x) * c_bar[k] + w * bernoulli(-y) * sp.c_cell) /
                      (bernoulli(-x) + w * bernoulli(y));
        double xb = sp.z * (cl.phi_bot - phi_bar) / V_th;
        cl.c_bot[k] = c_bar[k] * std::exp(-xb);
    }
    return cl;
}

/// Piecewise-linear vertical reconstruction of one radial node: bulk value
/// in [H, delta_j - H], linear ramps to the closure values at the substrate
/// (z = 0) and the membrane (z = delta_j).
struct ZProfilePoint {
    double phi = 0.0;
    std::vector<double> c;
};

inline ZProfilePoint reconstruct_z(const LayerClosure& cl, double phi_bar,
                                   const std::vector<double>& c_bar, double z, double delta_j,
                                   double H) {
    if (z < 0.0 || z > delta_j) throw std::invalid_argument("reconstruct_z: z outside the cleft");
    auto blend = [&](double bulk, double bot, double top) {
        if (z <= H) return bot + (bulk - bot) * (z / H);
        if (z >= delta_j - H) return top + (bulk - top) * ((delta_j - z) / H);
        return bulk;
    };
    ZProfilePoint out;
    out.phi = blend(phi_bar, cl.phi_bot, cl.phi_top);
    out.c.resize(c_bar.size());
    for (std::size_t k = 0; k < c_bar.size(); ++k)
        out.c[k] = blend(c_bar[k], cl.c_bot[k], cl.c_top[k]);
    return out;
}

/// Tier-two scenario: averaged PNP on [0, R_ef] with the cell footprint on
/// [0, R_cell] and the artificial far-field closure beyond it. areal_source
/// is an optional per-species injection (mol/(m^2 s)) over the cell zone.
struct Reduced25dScenario {
    RadialGrid grid;
    double R_cell = 0.0;
    BathComposition composition;
    PhysicalConstants constants{};
    CouplingParams coupling{};
    StimulusWaveform waveform{};
    GummelConfig gummel{};
    double bath_potential = 0.0;
    std::vector<double> areal_source;  // per species; empty = none
    bool equilibrate_initial = true;   // false: start from the uniform bath state
    double dt0 = 1e-8;
    int n_hold = 20;
    double dt_growth = 1.5;
    double dt_max = 5e-5;

    explicit Reduced25dScenario(BathComposition comp) : composition(std::move(comp)) {}

    double thermal() const { return thermal_voltage(constants); }
    bool in_ef_zone(int node) const { return grid.r[node] > R_cell * (1.0 + 1e-12); }
};

struct Reduced25dState {
    double time = 0.0;
    std::vector<double> phi;                // phi_bar per radial node
    std::vector<std::vector<double>> conc;  // [species][node], averaged
};

class Reduced25dSolver {
  public:
    explicit Reduced25dSolver(const Reduced25dScenario& sc)
        : sc_(sc), V_th_(sc.thermal()), mass_(sc.grid.lumped_mass()) {
        sc_.waveform.validate();
        sc_.coupling.validate();
        if (!(sc_.R_cell > 0.0) || sc_.R_cell > sc_.grid.R() * (1.0 + 1e-12))
            throw std::invalid_argument("Reduced25dSolver: need 0 < R_cell <= R");
        if (!sc_.areal_source.empty() && sc_.areal_source.size() != sc_.composition.size())
            throw std::invalid_argument("Reduced25dSolver: areal_source length mismatch");
    }

    PnpState initial_state() {
        PnpState s;  // reuse of the nodal-state container: phi and conc per radial node
        s.time = 0.0;
        s.phi.assign(sc_.grid.n(), sc_.bath_potential);
        for (const auto& sp : sc_.composition.species())
            s.conc.push_back(std::vector<double>(sc_.grid.n(), sp.c_bath));
        if (sc_.equilibrate_initial) stationary_solve(s, sc_.waveform.segments.front());
        return s;
    }

    GummelReport stationary_solve(PnpState& s, const StimulusWaveform::Segment& stim) {
        return iterate(s, stim, 0.0, s);
    }

    GummelReport transient_step(PnpState& s, double dt) {
        if (!(dt > 0.0)) throw std::invalid_argument("transient_step: dt must be positive");
        const auto& seg = sc_.waveform.at(s.time + 0.5 * dt);
        PnpState old = s;
        GummelReport rep = transient_newton(s, seg, 1.0 / dt, old);
        s.time = old.time + dt;
        return rep;
    }

    /// Closure values at one node under the current state and stimulus;
    /// identity on the top side in the far-field zone.
    LayerClosure node_closure(const PnpState& s, const StimulusWaveform::Segment& stim,
                              int node) const {
        std::vector<double> c_bar(sc_.composition.size());
        for (std::size_t k = 0; k < c_bar.size(); ++k) c_bar[k] = s.conc[k][node];
        LayerClosure cl = closure_top_bot(s.phi[node], c_bar, stim.V_cell, stim.V_G,
                                          sc_.composition, sc_.coupling, V_th_, sc_.constants);
        if (sc_.in_ef_zone(node)) {
            cl.phi_top = s.phi[node];
            cl.c_top = c_bar;
        }
        return cl;
    }

    const std::vector<double>& lumped_mass() const { return mass_; }

  private:
    const Reduced25dScenario& sc_;
    double V_th_;
    std::vector<double> mass_;

    int rim() const { return sc_.grid.n() - 1; }

    double harmonic_C(double C_surface) const {
        double eps_H = sc_.constants.eps_water / sc_.coupling.layer_width();
        return C_surface * eps_H / (C_surface + eps_H);
    }

    /// Linear part of the averaged Gauss law: radial dielectric stiffness,
    /// capacitive couplings to the layer surfaces, rim Dirichlet row. The
    /// space charge is not included.
    AssembledSystem poisson_system(const StimulusWaveform::Segment& stim) const {
        const int n = sc_.grid.n();
        const double delta = sc_.coupling.delta_j;
        TripletBuffer trip(n, n);
        std::vector<double> rhs(n, 0.0);
        std::vector<double> mu(n, sc_.constants.eps_water * delta), psi0(n, 0.0);
        add_radial_stiffness(trip, sc_.grid, mu, psi0);
        double C_bot = harmonic_C(sc_.coupling.C_S);
        for (int i = 0; i < n; ++i) {
            double C_top, V_top;
            if (sc_.in_ef_zone(i)) {
                C_top = sc_.coupling.effective_C_star();
                V_top = sc_.bath_potential;
            } else {
                C_top = harmonic_C(sc_.coupling.C_M);
                V_top = stim.V_cell;
            }
            trip.add(i, i, mass_[i] * (C_top + C_bot));
            rhs[i] += mass_[i] * (C_top * V_top + C_bot * stim.V_G);
        }
        AssembledSystem sys{trip.assemble(), std::move(rhs), std::vector<char>(n, 0)};
        sys.is_dirichlet[rim()] = 1;
        eliminate_row_col(sys.matrix, sys.rhs, rim(), sc_.bath_potential);
        return sys;
    }

    /// Nodal measure of the averaged space charge (area times cleft height),
    /// zeroed on the rim Dirichlet row.
    std::vector<double> charge_weights() const {
        std::vector<double> weight(sc_.grid.n(), 0.0);
        for (int i = 0; i < sc_.grid.n(); ++i) weight[i] = mass_[i] * sc_.coupling.delta_j;
        weight[rim()] = 0.0;
        return weight;
    }

    std::vector<double> poisson_update(const PnpState& s, const StimulusWaveform::Segment& stim) {
        AssembledSystem sys = poisson_system(stim);
        std::vector<double> weight = charge_weights();
        std::vector<int> valence(sc_.composition.size());
        for (std::size_t k = 0; k < sc_.composition.size(); ++k)
            valence[k] = sc_.composition[k].z;
        return detail::poisson_boltzmann_newton(sys.matrix, sys.rhs, weight, s.conc, s.phi,
                                                valence, sc_.constants.faraday(), V_th_,
                                                0.01 * sc_.gummel.tol_phi, 60);
    }

    /// Averaged continuity system for one species at the potential held in
    /// s: radial SG transport, lumped storage, top-layer closure fluxes,
    /// areal source, rim Dirichlet row.
    AssembledSystem species_system(const PnpState& s, const PnpState& old,
                                   const StimulusWaveform::Segment& stim, std::size_t k,
                                   double inv_dt) const {
        const int n = sc_.grid.n();
        const IonSpecies& sp = sc_.composition[k];
        const double delta = sc_.coupling.delta_j;
        const double H = sc_.coupling.layer_width();
        TripletBuffer trip(n, n);
        std::vector<double> rhs(n, 0.0);
        std::vector<double> mu(n, sp.D * delta), psi(n, 0.0);
        for (int i = 0; i < n; ++i) psi[i] = -sp.z * s.phi[i] / V_th_;
        add_radial_stiffness(trip, sc_.grid, mu, psi);
        for (int i = 0; i < n; ++i) {
            double a = 0.0, b = 0.0;  // outward top flux = a c_bar - b
            if (sc_.in_ef_zone(i)) {
                double v = sc_.coupling.effective_v_star(sp.p);
                a = v;
                b = v * sp.c_bath;
            } else if (sp.p > 0.0) {
                LayerClosure cl = node_closure(s, stim, i);
                double x = sp.z * (cl.phi_top - s.phi[i]) / V_th_;
                double y = sp.z * (stim.V_cell - cl.phi_top) / V_th_;
                double w = sp.p * H / sp.D;
                double denom = bernoulli(-x) + w * bernoulli(y);
                a = sp.p * bernoulli(x) * bernoulli(y) / denom;
                b = sp.p * bernoulli(-x) * bernoulli(-y) * sp.c_cell / denom;
            }
            double src = sc_.areal_source.empty() || sc_.in_ef_zone(i) ? 0.0 : sc_.areal_source[k];
            trip.add(i, i, mass_[i] * (inv_dt * delta + a));
            rhs[i] += mass_[i] * (inv_dt * delta * old.conc[k][i] + b + src);
        }
        AssembledSystem sys{trip.assemble(), std::move(rhs), std::vector<char>(n, 0)};
        sys.is_dirichlet[rim()] = 1;
        eliminate_row_col(sys.matrix, sys.rhs, rim(), sp.c_bath);
        return sys;
    }

    void species_update(PnpState& s, const PnpState& old, const StimulusWaveform::Segment& stim,
                        std::size_t k, double inv_dt) {
        AssembledSystem sys = species_system(s, old, stim, k, inv_dt);
        s.conc[k] = solve_linear(sys.matrix, sys.rhs);
    }

    /// d(outward top closure flux)/d(phi_bar) at one node: the capacitive
    /// divider makes phi_top linear in phi_bar with slope q, and the matched
    /// layer/channel flux a c_bar - b is differentiated through
    /// x = z (phi_top - phi_bar)/V_th and y = z (V_cell - phi_top)/V_th.
    /// The far-field leak has constant coefficients.
    double closure_flux_dphi(const PnpState& s, const StimulusWaveform::Segment& stim,
                             std::size_t k, int node) const {
        if (sc_.in_ef_zone(node)) return 0.0;
        const IonSpecies& sp = sc_.composition[k];
        if (!(sp.p > 0.0)) return 0.0;
        const double H = sc_.coupling.layer_width();
        const double eps_H = sc_.constants.eps_water / H;
        const double q = eps_H / (sc_.coupling.C_M + eps_H);
        double phi_top =
            (sc_.coupling.C_M * stim.V_cell + eps_H * s.phi[node]) / (sc_.coupling.C_M + eps_H);
        double x = sp.z * (phi_top - s.phi[node]) / V_th_;
        double y = sp.z * (stim.V_cell - phi_top) / V_th_;
        double dx = sp.z * (q - 1.0) / V_th_;
        double dy = -sp.z * q / V_th_;
        double w = sp.p * H / sp.D;
        double den = bernoulli(-x) + w * bernoulli(y);
        double dden = -bernoulli_derivative(-x) * dx + w * bernoulli_derivative(y) * dy;
        double num_a = bernoulli(x) * bernoulli(y);
        double dnum_a = bernoulli_derivative(x) * dx * bernoulli(y) +
                        bernoulli(x) * bernoulli_derivative(y) * dy;
        double num_b = bernoulli(-x) * bernoulli(-y) * sp.c_cell;
        double dnum_b = (-bernoulli_derivative(-x) * dx * bernoulli(-y) -
                         bernoulli(-x) * bernoulli_derivative(-y) * dy) *
                        sp.c_cell;
        double da = sp.p * (dnum_a * den - num_a * dden) / (den * den);
        double db = sp.p * (dnum_b * den - num_b * dden) / (den * den);
        return da * s.conc[k][node] - db;
    }

    /// Stacked residual of the coupled averaged system; parts receives the
    /// per-species systems for Jacobian reuse.
    std::vector<double> coupled_residual(const PnpState& x, const PnpState& old,
                                         const StimulusWaveform::Segment& stim, double inv_dt,
                                         const AssembledSystem& ap, const std::vector<double>& w,
                                         std::vector<AssembledSystem>& parts) const {
        const int n = sc_.grid.n();
        const int K = int(sc_.composition.size());
        const double F = sc_.constants.faraday();
        std::vector<double> resid((K + 1) * n, 0.0);
        std::vector<double> r = ap.matrix.multiply(x.phi);
        for (int i = 0; i < n; ++i) {
            double rho = 0.0;
            for (int k = 0; k < K; ++k) rho += sc_.composition[k].z * x.conc[k][i];
            resid[i] = r[i] - ap.rhs[i] - w[i] * F * rho;
        }
        parts.assign(K, {});
        for (int k = 0; k < K; ++k) {
            parts[k] = species_system(x, old, stim, k, inv_dt);
            std::vector<double> rk = parts[k].matrix.multiply(x.conc[k]);
            for (int i = 0; i < n; ++i) resid[(k + 1) * n + i] = rk[i] - parts[k].rhs[i];
        }
        return resid;
    }

    /// Jacobian of the coupled averaged system. The species/potential blocks
    /// hold the SG edge derivative (zero column sums, so conservation is
    /// exact) plus the nodal closure derivative.
    CsrMatrix coupled_jacobian(const PnpState& x, const StimulusWaveform::Segment& stim,
                               const AssembledSystem& ap, const std::vector<double>& w,
                               const std::vector<AssembledSystem>& parts) const {
        const int n = sc_.grid.n();
        const int K = int(sc_.composition.size());
        const double F = sc_.constants.faraday();
        const double delta = sc_.coupling.delta_j;
        TripletBuffer trip((K + 1) * n, (K + 1) * n);
        add_csr_block(trip, ap.matrix, 0, 0);
        for (int i = 0; i < n; ++i)
            if (w[i] != 0.0)
                for (int k = 0; k < K; ++k)
                    trip.add(i, (k + 1) * n + i, -F * sc_.composition[k].z * w[i]);
        for (int k = 0; k < K; ++k) {
            const int off = (k + 1) * n;
            add_csr_block(trip, parts[k].matrix, off, off);
            const IonSpecies& sp = sc_.composition[k];
            const double dpsi = -sp.z / V_th_;
            const std::vector<double>& c = x.conc[k];
            for (int i = 0; i + 1 < n; ++i) {
                int j = i + 1;
                double h = sc_.grid.r[j] - sc_.grid.r[i];
                double we = 0.5 * (sc_.grid.r[i] + sc_.grid.r[j]) * sp.D * delta / h;
                double d = dpsi * (x.phi[i] - x.phi[j]);
                double der = we * (bernoulli_derivative(d) * c[i] +
                                   bernoulli_derivative(-d) * c[j]) * dpsi;
                if (!parts[k].is_dirichlet[i] && der != 0.0) {
                    trip.add(off + i, i, der);
                    trip.add(off + i, j, -der);
                }
                if (!parts[k].is_dirichlet[j] && der != 0.0) {
                    trip.add(off + j, j, der);
                    trip.add(off + j, i, -der);
                }
            }
            for (int i = 0; i < n; ++i) {
                if (parts[k].is_dirichlet[i]) continue;
                double dcl = closure_flux_dphi(x, stim, k, i);
                if (dcl != 0.0) trip.add(off + i, i, mass_[i] * dcl);
            }
        }
        return trip.assemble();
    }

    /// One backward Euler step of the averaged system as a coupled damped
    /// Newton solve; same rationale as the tier-one stepper.
    GummelReport transient_newton(PnpState& s, const StimulusWaveform::Segment& stim,
                                  double inv_dt, const PnpState& old) {
        AssembledSystem ap = poisson_system(stim);
        std::vector<double> w = charge_weights();
        std::vector<AssembledSystem> parts;
        auto residual = [&](const PnpState& x) {
            return coupled_residual(x, old, stim, inv_dt, ap, w, parts);
        };
        auto jacobian = [&](const PnpState& x) { return coupled_jacobian(x, stim, ap, w, parts); };
        return detail::coupled_newton(s, sc_.grid.n(), int(sc_.composition.size()), residual,
                                      jacobian, V_th_, sc_.gummel.tol_phi, sc_.gummel.tol_c,
                                      sc_.gummel.newton_max_iter, "transient_step");
    }

    GummelReport iterate(PnpState& s, const StimulusWaveform::Segment& stim, double inv_dt,
                         const PnpState& old) {
        GummelReport rep;
        AndersonAccelerator acc(sc_.gummel.anderson_depth);
        double best = std::numeric_limits<double>::infinity();
        for (int it = 0; it < sc_.gummel.max_iter; ++it) {
            double dc_rel = 0.0;
            for (std::size_t k = 0; k < sc_.composition.size(); ++k) {
                std::vector<double> prev = s.conc[k];
                species_update(s, old, stim, k, inv_dt);
                double dmax = 0.0, scale = 0.0;
                for (int i = 0; i < sc_.grid.n(); ++i) {
                    dmax = std::max(dmax, std::abs(s.conc[k][i] - prev[i]));
                    scale = std::max(scale, std::abs(s.conc[k][i]));
                }
                if (scale > 0.0) dc_rel = std::max(dc_rel, dmax / scale);
            }

            std::vector<double> phi_new = poisson_update(s, stim);
            double dphi = 0.0;
            for (int i = 0; i < sc_.grid.n(); ++i)
                dphi = std::max(dphi, std::abs(phi_new[i] - s.phi[i]));
            rep.dphi_history.push_back(dphi);
            rep.iterations = it + 1;
            rep.final_dc_rel = dc_rel;
            if (dphi <= sc_.gummel.tol_phi && dc_rel <= sc_.gummel.tol_c) {
                s.phi = phi_new;
                rep.converged = true;
                break;
            }
            if (dphi > 4.0 * best) {
                acc.reset();
                for (int i = 0; i < sc_.grid.n(); ++i) s.phi[i] += 0.5 * (phi_new[i] - s.phi[i]);
            } else {
                s.phi = acc.next(s.phi, phi_new, sc_.gummel.damping);
            }
            best = std::min(best, dphi);
        }
        if (!rep.converged)
            throw std::runtime_error("solve_25d: Gummel iteration did not converge (|dphi| = " +
                                     std::to_string(rep.dphi_history.back()) + " V)");
        return rep;
    }
};

struct Reduced25dResult {
    ClampSeries series;
    PnpState state;
};

/// Transient driver for the tier-two model; records the axis values and the
/// concentration extrema after every backward Euler step.
inline Reduced25dResult solve_25d(const Reduced25dScenario& sc) {
    Reduced25dSolver solver(sc);
    Reduced25dResult out;
    out.state = solver.initial_state();

    out.series.columns = {"time", "V_cell", "V_G", "phi_axis", "phi_avg"};
    for (const auto& sp : sc.composition.species()) {
        out.series.columns.push_back("c_" + sp.name + "_axis");
        out.series.columns.push_back("c_" + sp.name + "_min");
        out.series.columns.push_back("c_" + sp.name + "_max");
    }
    const std::vector<double>& m = solver.lumped_mass();
    double meas = 0.0;
    for (double v : m) meas += v;

    auto record = [&](const PnpState& s, const StimulusWaveform::Segment& stim) {
        double avg = 0.0;
        for (std::size_t i = 0; i < s.phi.size(); ++i) avg += m[i] * s.phi[i];
        std::vector<double> row{s.time, stim.V_cell, stim.V_G, s.phi.front(), avg / meas};
        for (std::size_t k = 0; k < sc.composition.size(); ++k) {
            row.push_back(s.conc[k].front());
            row.push_back(*std::min_element(s.conc[k].begin(), s.conc[k].end()));
            row.push_back(*std::max_element(s.conc[k].begin(), s.conc[k].end()));
        }
        out.series.rows.push_back(std::move(row));
    };

    record(out.state, sc.waveform.at(0.0));
    TimeSchedule ts = TimeSchedule::build(sc.waveform, sc.dt0, sc.n_hold, sc.dt_growth, sc.dt_max);
    for (double dt : ts.steps) {
        solver.transient_step(out.state, dt);
        record(out.state, sc.waveform.at(out.state.time - 0.5 * dt));
    }
    return out;
}

/// Options for the radial pump validation problem (uniform K+ injection
/// under a quiescent cell, capacitively coupled, bath rim).
struct PabstOptions {
    double delta_j = 2e-6;   // junction height (m)
    double D_K = 1.0e-9;     // effective cleft diffusivity of K (m^2/s)
    int n_cells = 256;
    double t_final = 0.45;   // transient horizon (s)
    double dt0 = 1e-4;
    int n_hold = 20;
    double dt_growth = 1.5;
    double dt_max = 2e-3;
};

/// Bath composition of the pump validation problem (mol/m^3).
inline BathComposition pabst_composition(double D_K) {
    return BathComposition({{"K", 1, D_K, 0.0, 5.0, 140.0},
                            {"Na", 1, default_diffusivity("Na"), 0.0, 145.0, 10.0},
                            {"Cl", -1, default_diffusivity("Cl"), 0.0, 150.0, 150.0}});
}

/// Steady or Heaviside-transient solve of the radial pump problem with an
/// areal K+ injection lambda_K (A/m^2) over a disc of radius R. In steady
/// mode the series holds the single converged record.
inline Reduced25dResult pabst_solve(double lambda_K, double R, const std::string& mode,
                                    const PabstOptions& opt = {}) {
    Reduced25dScenario sc(pabst_composition(opt.D_K));
    sc.grid = RadialGrid::uniform(R, opt.n_cells);
    sc.R_cell = R;
    sc.coupling.delta_j = opt.delta_j;
    sc.coupling.lambda_debye = debye_length(sc.composition, sc.constants);
    sc.waveform.segments = {{0.0, opt.t_final, 0.0, 0.0}};
    sc.areal_source.assign(sc.composition.size(), 0.0);
    sc.areal_source[sc.composition.index_of("K")] = lambda_K / sc.constants.faraday();
    sc.equilibrate_initial = false;  // the pump switches on at t = 0
    sc.dt0 = opt.dt0;
    sc.n_hold = opt.n_hold;
    sc.dt_growth = opt.dt_growth;
    sc.dt_max = opt.dt_max;

    if (mode == "steady") {
        Reduced25dSolver solver(sc);
        Reduced25dResult out;
        out.state.phi.assign(sc.grid.n(), 0.0);
        for (const auto& sp : sc.composition.species())
            out.state.conc.push_back(std::vector<double>(sc.grid.n(), sp.c_bath));
        solver.stationary_solve(out.state, sc.waveform.segments.front());
        out.series.columns = {"time", "phi_axis", "c_K_axis"};
        out.series.rows = {{0.0, out.state.phi.front(),
                            out.state.conc[sc.composition.index_of("K")].front()}};
        return out;
    }
    if (mode != "transient") throw std::invalid_argument("pabst_solve: mode must be steady or transient");
    return solve_25d(sc);
}

/// Tier-three scenario: area-contact equation for the cleft potential under
/// a cell of radius R with a single ohmic K conductance, rim clamped to the
/// bath. In electrodiffusion mode the uniform cleft concentrations follow
/// exchange ODEs and feed back through the Nernst potential and the sheet
/// conductance.
struct AreaContactScenario {
    RadialGrid grid;
    BathComposition composition;
    PhysicalConstants constants{};
    CouplingParams coupling{};
    StimulusWaveform waveform{};
    double g_K = 0.0;             // membrane conductance (S/m^2)
    bool electrodiffusion = false;
    double j_fixed = 0.0;         // uniform areal current source (A/m^2), test hook
    double dt0 = 1e-7;
    int n_hold = 20;
    double dt_growth = 1.5;
    double dt_max = 1e-3;

    explicit AreaContactScenario(BathComposition comp) : composition(std::move(comp)) {}

    double thermal() const { return thermal_voltage(constants); }
    std::size_t k_index() const { return composition.index_of("K"); }
};

struct AreaContactState {
    double time = 0.0;
    std::vector<double> phi;
    std::vector<double> cleft_conc;  // per species, uniform over the cleft
    double V_cell_prev = 0.0;
    double V_G_prev = 0.0;
};

/// Area-averaged cleft potential, the junction voltage V_J.
inline double compute_VJ(const RadialGrid& g, const std::vector<double>& phi) {
    std::vector<double> m = g.lumped_mass();
    double acc = 0.0, meas = 0.0;
    for (int i = 0; i < g.n(); ++i) {
        acc += m[i] * phi[i];
        meas += m[i];
    }
    return acc / meas;
}

/// Sheet conductance of the cleft, F sum |z_i| mu_i c_i delta_j (S).
inline double sheet_conductance(const BathComposition& comp, const std::vector<double>& conc,
                                double V_th, double delta_j, const PhysicalConstants& pc = {}) {
    double s = 0.0;
    for (std::size_t k = 0; k < comp.size(); ++k)
        s += std::abs(comp[k].z) * comp[k].mobility(V_th) * conc[k];
    return pc.faraday() * s * delta_j;
}

/// Backward Euler update of one uniform cleft concentration: transmembrane
/// inward flux f_tm spread over the height, lateral exchange with the bath
/// at rate 1/tau.
inline double cleft_ode_step(double c, double dt, double f_tm, double delta_j, double c_bath,
                             double tau) {
    return (c + dt * (f_tm / delta_j + c_bath / tau)) / (1.0 + dt / tau);
}

/// Lateral exchange time of species k, tau = R^2 / (j01^2 D).
inline double cleft_exchange_time(double R, double D) {
    return R * R / (bessel_j01 * bessel_j01 * D);
}

/// Electrical relaxation time of the junction, (C_M + C_S)/g_J with the
/// junction conductance g_J = j01^2 * (sheet conductance at bath values)/R^2.
inline double cleft_time_constant(const CouplingParams& cp, const BathComposition& comp,
                                  double R, const PhysicalConstants& pc = {}) {
    double V_th = thermal_voltage(pc);
    std::vector<double> cb;
    for (const auto& sp : comp.species()) cb.push_back(sp.c_bath);
    double g_s = sheet_conductance(comp, cb, V_th, cp.delta_j, pc);
    double g_J = bessel_j01 * bessel_j01 * g_s / (R * R);
    return (cp.C_M + cp.C_S) / g_J;
}

inline AreaContactState area_contact_initial_state(const AreaContactScenario& sc) {
    AreaContactState s;
    s.phi.assign(sc.grid.n(), 0.0);
    for (const auto& sp : sc.composition.species()) s.cleft_conc.push_back(sp.c_bath);
    const auto& seg = sc.waveform.at(0.0);
    s.V_cell_prev = seg.V_cell;
    s.V_G_prev = seg.V_G;
    return s;
}

/// Nernst potential of the gated K channel at the current cleft content.
inline double area_contact_VK(const AreaContactScenario& sc, const AreaContactState& s) {
    const IonSpecies& sp = sc.composition[sc.k_index()];
    return nernst_potential(sp.z, sp.c_cell, std::max(s.cleft_conc[sc.k_index()], 1e-12),
                            sc.thermal());
}

/// Stationary area-contact solve at a frozen stimulus (used for the
/// parabola oracle and for pre-step equilibration).
inline std::vector<double> area_contact_stationary(const AreaContactScenario& sc,
                                                   const AreaContactState& s,
                                                   const StimulusWaveform::Segment& stim) {
    const int n = sc.grid.n();
    double V_th = sc.thermal();
    double g_s = sheet_conductance(sc.composition, s.cleft_conc, V_th, sc.coupling.delta_j,
                                   sc.constants);
    double V_K = area_contact_VK(sc, s);
    TripletBuffer trip(n, n);
    std::vector<double> rhs(n, 0.0);
    std::vector<double> mu(n, g_s), psi0(n, 0.0);
    add_radial_stiffness(trip, sc.grid, mu, psi0);
    std::vector<double> m = sc.grid.lumped_mass();
    for (int i = 0; i < n; ++i) {
        trip.add(i, i, m[i] * sc.g_K);
        rhs[i] += m[i] * (sc.g_K * (stim.V_cell - V_K) + sc.j_fixed);
    }
    CsrMatrix A = trip.assemble();
    eliminate_row_col(A, rhs, n - 1, 0.0);
    return solve_linear(A, rhs);
}

/// One backward Euler step of the area-contact model:
///   [(C_M+C_S)/dt M + g_K M + S(g_s) + S(eps delta_j)/dt] phi_new =
///   M[(C_M+C_S)/dt phi + g_K (V_cell - V_K) + j_fixed + C_M dV_cell/dt
///     + C_S dV_G/dt] + S(eps delta_j)/dt phi,
/// then the cleft ODE updates driven by the new junction voltage.
inline void area_contact_step(const AreaContactScenario& sc, AreaContactState& s, double dt,
                              const StimulusWaveform::Segment& stim) {
    if (!(dt > 0.0)) throw std::invalid_argument("area_contact_step: dt must be positive");
    const int n = sc.grid.n();
    double V_th = sc.thermal();
    double C_tot = sc.coupling.C_M + sc.coupling.C_S;
    double g_s = sheet_conductance(sc.composition, s.cleft_conc, V_th, sc.coupling.delta_j,
                                   sc.constants);
    double V_K = area_contact_VK(sc, s);
    std::vector<double> m = sc.grid.lumped_mass();

    TripletBuffer trip(n, n);
    std::vector<double> mu_g(n, g_s), mu_eps(n, sc.constants.eps_water * sc.coupling.delta_j);
    std::vector<double> psi0(n, 0.0);
    add_radial_stiffness(trip, sc.grid, mu_g, psi0);
    add_radial_stiffness(trip, sc.grid, mu_eps, psi0, 1.0 / dt);

    TripletBuffer trip_eps(n, n);
    add_radial_stiffness(trip_eps, sc.grid, mu_eps, psi0, 1.0 / dt);
    CsrMatrix S_eps = trip_eps.assemble();
    std::vector<double> s_eps_phi = S_eps.multiply(s.phi);

    std::vector<double> rhs(n, 0.0);
    double dVc = (stim.V_cell - s.V_cell_prev) / dt;
    double dVg = (stim.V_G - s.V_G_prev) / dt;
    for (int i = 0; i < n; ++i) {
        trip.add(i, i, m[i] * (C_tot / dt + sc.g_K));
        rhs[i] = m[i] * (C_tot / dt * s.phi[i] + sc.g_K * (stim.V_cell - V_K) + sc.j_fixed +
                         sc.coupling.C_M * dVc + sc.coupling.C_S * dVg) +
                 s_eps_phi[i];
    }
    CsrMatrix A = trip.assemble();
    eliminate_row_col(A, rhs, n - 1, 0.0);
    s.phi = solve_linear(A, rhs);

    if (sc.electrodiffusion) {
        double VJ = compute_VJ(sc.grid, s.phi);
        double F = sc.constants.faraday();
        for (std::size_t k = 0; k < sc.composition.size(); ++k) {
            const IonSpecies& sp = sc.composition[k];
            double f_tm = 0.0;
            if (k == sc.k_index())
                f_tm = sc.g_K * (stim.V_cell - VJ - V_K) / (sp.z * F);
            double tau = cleft_exchange_time(sc.grid.R(), sp.D);
            s.cleft_conc[k] =
                cleft_ode_step(s.cleft_conc[k], dt, f_tm, sc.coupling.delta_j, sp.c_bath, tau);
        }
    }
    s.V_cell_prev = stim.V_cell;
    s.V_G_prev = stim.V_G;
    s.time += dt;
}

struct AreaContactResult {
    ClampSeries series;
    AreaContactState state;
};

/// Transient driver for the area-contact model; records V_J, the rim-to-axis
/// potential, the K content and its Nernst potential after every step.
inline AreaContactResult run_area_contact(const AreaContactScenario& sc) {
    AreaContactResult out;
    out.state = area_contact_initial_state(sc);
    out.state.phi = area_contact_stationary(sc, out.state, sc.waveform.at(0.0));

    out.series.columns = {"time", "V_cell", "V_G", "V_J", "phi_axis", "c_K", "V_K"};
    auto record = [&](const AreaContactState& s, const StimulusWaveform::Segment& stim) {
        out.series.rows.push_back({s.time, stim.V_cell, stim.V_G, compute_VJ(sc.grid, s.phi),
                                   s.phi.front(), s.cleft_conc[sc.k_index()],
                                   area_contact_VK(sc, s)});
    };
    record(out.state, sc.waveform.at(0.0));
    TimeSchedule ts = TimeSchedule::build(sc.waveform, sc.dt0, sc.n_hold, sc.dt_growth, sc.dt_max);
    for (double dt : ts.steps) {
        const auto& seg = sc.waveform.at(out.state.time + 0.5 * dt);
        area_contact_step(sc, out.state, dt, seg);
        record(out.state, seg);
    }
    return out;
}

}  // namespace cleftsim
