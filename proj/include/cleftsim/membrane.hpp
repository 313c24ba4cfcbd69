#pragma once

/// @file membrane.hpp
/// Membrane transport models shared by all solver tiers: Nernst potentials,
/// Goldman-Hodgkin-Katz (GHK) channel fluxes with their Robin splitting,
/// Hodgkin-Huxley (HH) conductance gating, and the zero-total-current
/// resting potential. Currents are positive outward (cell into cleft/bath),
/// in A/m^2; molar fluxes in mol/(m^2 s).

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cleftsim/core.hpp"
#include "cleftsim/eafe.hpp"

namespace cleftsim {

/// Nernst equilibrium potential (V_th/z) ln(c_out/c_in), in volts.
inline double nernst_potential(int z, double c_in, double c_out, double V_th) {
    if (z == 0) throw std::invalid_argument("nernst_potential: valence must be nonzero");
    if (!(c_in > 0.0) || !(c_out > 0.0))
        throw std::invalid_argument("nernst_potential: concentrations must be positive");
    return V_th / z * std::log(c_out / c_in);
}

struct GhkChannel {
    int z = 1;          // valence of the permeant ion
    double p = 0.0;     // permeability (m/s)
};

/// GHK current density through one channel type (A/m^2, positive outward):
///   j = p z F [Be(-x) c_cell - Be(x) c_out],  x = z (V_cell - phi) / V_th.
/// Vanishes exactly at the Nernst potential; at x = 0 it reduces to the
/// diffusive limit p z F (c_cell - c_out).
inline double ghk_current(const GhkChannel& ch, double V_cell, double phi, double c_cell,
                          double c_out, double V_th, const PhysicalConstants& pc = {}) {
    double x = ch.z * (V_cell - phi) / V_th;
    return ch.p * ch.z * pc.faraday() * (bernoulli(-x) * c_cell - bernoulli(x) * c_out);
}

/// Robin splitting of the GHK flux in the cleft concentration: the inward
/// molar flux is beta - alpha * c_out with alpha = p Be(x), beta =
/// p Be(-x) c_cell, so ghk_current == z F (beta - alpha c_out).
inline FluxBC ghk_flux_split(const GhkChannel& ch, double V_cell, double phi, double c_cell,
                             double V_th) {
    double x = ch.z * (V_cell - phi) / V_th;
    return {ch.p * bernoulli(x), ch.p * bernoulli(-x) * c_cell};
}

/// Permeability reproducing a given small-signal conductance g (S/m^2) at
/// zero membrane voltage: g = p z^2 F (c_in + c_out) / (2 V_th).
inline double ghk_permeability_from_conductance(double g, int z, double c_in, double c_out,
                                                double V_th, const PhysicalConstants& pc = {}) {
    if (z == 0) throw std::invalid_argument("ghk_permeability_from_conductance: z must be nonzero");
    double denom = double(z) * z * pc.faraday() * (c_in + c_out);
    if (!(denom > 0.0))
        throw std::invalid_argument("ghk_permeability_from_conductance: concentrations must be positive");
    return 2.0 * g * V_th / denom;
}

/// Hodgkin-Huxley gating variables.
struct GatingState {
    double n = 0.0;
    double m = 0.0;
    double h = 0.0;
};

struct HhRates {
    double alpha_n, beta_n, alpha_m, beta_m, alpha_h, beta_h;  // 1/s
};

/// Classic squid-axon rate constants; V in volts, rates in 1/s. The
/// vanishing-denominator points are handled by the Bernoulli kernel.
inline HhRates hh_rates(double V) {
    double v = V * 1e3;  // mV
    HhRates r;
    r.alpha_n = 1e3 * 0.1 * bernoulli(-(v + 55.0) / 10.0);
    r.beta_n = 1e3 * 0.125 * std::exp(-(v + 65.0) / 80.0);
    r.alpha_m = 1e3 * 1.0 * bernoulli(-(v + 40.0) / 10.0);
    r.beta_m = 1e3 * 4.0 * std::exp(-(v + 65.0) / 18.0);
    r.alpha_h = 1e3 * 0.07 * std::exp(-(v + 65.0) / 20.0);
    r.beta_h = 1e3 / (1.0 + std::exp(-(v + 35.0) / 10.0));
    return r;
}

/// Steady state x_inf = alpha/(alpha+beta) of each gate at voltage V.
inline GatingState steady_gating(double V) {
    HhRates r = hh_rates(V);
    return {r.alpha_n / (r.alpha_n + r.beta_n), r.alpha_m / (r.alpha_m + r.beta_m),
            r.alpha_h / (r.alpha_h + r.beta_h)};
}

/// Exact exponential update of the linear gate ODEs over one step at frozen
/// voltage: x <- x_inf + (x - x_inf) exp(-dt (alpha + beta)). Unconditionally
/// stable and preserves [0, 1].
inline GatingState gating_step(const GatingState& s, double V, double dt) {
    HhRates r = hh_rates(V);
    auto advance = [dt](double x, double a, double b) {
        double xinf = a / (a + b);
        return xinf + (x - xinf) * std::exp(-dt * (a + b));
    };
    return {advance(s.n, r.alpha_n, r.beta_n), advance(s.m, r.alpha_m, r.beta_m),
            advance(s.h, r.alpha_h, r.beta_h)};
}

/// HH conductance set. v_shift is added to the membrane voltage before rate
/// evaluation, shifting the gating curves without moving the reversal
/// potentials.
struct HhChannelSet {
    double g_K_max = 1800.0;  // S/m^2
    double g_Na_max = 6000.0;
    double g_Cl = 15.0;       // ungated leak
    double v_shift = 0.0;     // V
};

struct MembraneCurrents {
    double j_K = 0.0, j_Na = 0.0, j_Cl = 0.0;  // A/m^2, positive outward
    double total() const { return j_K + j_Na + j_Cl; }
};

/// Ohmic HH currents j_i = g_i(gates) (V_cell - phi - E_i).
inline MembraneCurrents hh_currents(const GatingState& s, double V_cell, double phi,
                                    double nernst_K, double nernst_Na, double nernst_Cl,
                                    const HhChannelSet& ch) {
    double Vm = V_cell - phi;
    MembraneCurrents out;
    double n2 = s.n * s.n;
    out.j_K = ch.g_K_max * n2 * n2 * (Vm - nernst_K);
    out.j_Na = ch.g_Na_max * s.m * s.m * s.m * s.h * (Vm - nernst_Na);
    out.j_Cl = ch.g_Cl * (Vm - nernst_Cl);
    return out;
}

/// Zero of a monotone-in-the-large total membrane current on [v_lo, v_hi]
/// by bisection; throws if the bracket does not change sign.
inline double find_reversal(const std::function<double(double)>& total_current,
                            double v_lo = -0.150, double v_hi = 0.100) {
    double f_lo = total_current(v_lo), f_hi = total_current(v_hi);
    if (f_lo == 0.0) return v_lo;
    if (f_hi == 0.0) return v_hi;
    if ((f_lo > 0.0) == (f_hi > 0.0))
        throw std::runtime_error("find_reversal: current does not change sign on the bracket");
    for (int it = 0; it < 200 && v_hi - v_lo > 1e-13; ++it) {
        double vm = 0.5 * (v_lo + v_hi);
        double fm = total_current(vm);
        if (fm == 0.0) return vm;
        if ((fm > 0.0) == (f_lo > 0.0)) {
            v_lo = vm;
            f_lo = fm;
        } else {
            v_hi = vm;
        }
    }
    return 0.5 * (v_lo + v_hi);
}

/// Resting potential of a GHK membrane against the bath: the voltage where
/// the summed channel currents vanish (phi = 0, intracellular and bath
/// concentrations frozen).
inline double resting_potential(const BathComposition& comp, double V_th,
                                const PhysicalConstants& pc = {}) {
    return find_reversal([&](double V) {
        double j = 0.0;
        for (const auto& sp : comp.species())
            if (sp.p > 0.0)
                j += ghk_current({sp.z, sp.p}, V, 0.0, sp.c_cell, sp.c_bath, V_th, pc);
        return j;
    });
}

/// Resting potential of an HH membrane with gates at steady state.
inline double resting_potential(const HhChannelSet& ch, const BathComposition& comp, double V_th,
                                const PhysicalConstants& pc = {}) {
    auto nernst_of = [&](const char* name) {
        const IonSpecies& sp = comp[comp.index_of(name)];
        return nernst_potential(sp.z, sp.c_cell, sp.c_bath, V_th);
    };
    double eK = nernst_of("K"), eNa = nernst_of("Na"), eCl = nernst_of("Cl");
    (void)pc;
    return find_reversal([&](double V) {
        GatingState s = steady_gating(V + ch.v_shift);
        return hh_currents(s, V, 0.0, eK, eNa, eCl, ch).total();
    });
}

}  // namespace cleftsim
