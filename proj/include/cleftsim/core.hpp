#pragma once

/// @file core.hpp
/// Physical constants, unit conventions, and the shared parameter records
/// (ion species, bath composition, capacitive couplings, stimulus waveforms)
/// used by every solver tier.
///
/// Unit conventions, fixed once for the whole library:
///   - concentrations in mol/m^3 (numerically equal to mM)
///   - charge density rho = F * sum_i z_i c_i with F = q * N_A
///   - potentials in V, lengths in m, times in s, current densities in A/m^2

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleftsim {

inline constexpr double pi = 3.14159265358979323846;

struct PhysicalConstants {
    double q   = 1.602176634e-19;  // elementary charge (C)
    double k_B = 1.380649e-23;     // Boltzmann constant (J/K)
    double T   = 298.15;           // absolute temperature (K)
    double N_A = 6.02214076e23;    // Avogadro number (1/mol)
    double eps_water = 80.0 * 8.8541878128e-12;  // electrolyte permittivity (F/m)

    double faraday() const { return q * N_A; }
};

/// Thermal voltage k_B*T/q (V).
inline double thermal_voltage(const PhysicalConstants& pc) {
    if (!(pc.T > 0.0)) throw std::invalid_argument("thermal_voltage: T must be positive");
    return pc.k_B * pc.T / pc.q;
}

struct IonSpecies {
    std::string name;
    int z = 0;              // valence, nonzero
    double D = 0.0;         // diffusivity (m^2/s)
    double p = 0.0;         // GHK permeability (m/s), 0 if the membrane has no channel
    double c_bath = 0.0;    // bath concentration (mol/m^3)
    double c_cell = 0.0;    // intracellular concentration (mol/m^3)

    /// Mobility via the Einstein relation mu = |z| D / V_th (m^2/(V s)).
    double mobility(double V_th) const { return std::abs(z) * D / V_th; }
};

/// Standard infinite-dilution aqueous diffusivities at 25 C (m^2/s),
/// used when a scenario omits them.
inline double default_diffusivity(const std::string& name) {
    if (name == "K")  return 1.96e-9;
    if (name == "Na") return 1.33e-9;
    if (name == "Cl") return 2.03e-9;
    return 0.0;
}

/// Ordered species list; the constructor enforces bath electroneutrality.
class BathComposition {
  public:
    explicit BathComposition(std::vector<IonSpecies> species)
        : species_(std::move(species)) {
        if (species_.empty())
            throw std::invalid_argument("BathComposition: at least one species required");
        double net = 0.0, scale = 0.0;
        for (const auto& s : species_) {
            if (s.z == 0) throw std::invalid_argument("BathComposition: valence must be nonzero (" + s.name + ")");
            if (!(s.D > 0.0)) throw std::invalid_argument("BathComposition: diffusivity must be positive (" + s.name + ")");
            if (s.c_bath < 0.0 || s.c_cell < 0.0)
                throw std::invalid_argument("BathComposition: concentrations must be nonnegative (" + s.name + ")");
            net += s.z * s.c_bath;
            scale += std::abs(s.z) * s.c_bath;
        }
        if (scale > 0.0 && std::abs(net) > 1e-12 * scale)
            throw std::invalid_argument("BathComposition: bath is not electroneutral (sum z_i c_i = " +
                                        std::to_string(net) + " mol/m^3)");
    }

    const std::vector<IonSpecies>& species() const { return species_; }
    std::size_t size() const { return species_.size(); }
    const IonSpecies& operator[](std::size_t i) const { return species_[i]; }

    /// Index of a species by name; throws if absent.
    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < species_.size(); ++i)
            if (species_[i].name == name) return i;
        throw std::invalid_argument("BathComposition: unknown species " + name);
    }

  private:
    std::vector<IonSpecies> species_;
};

/// Charge density F * sum_i z_i c_i (C/m^3) for one set of nodal concentrations.
inline double charge_density(std::span<const double> conc, const BathComposition& comp,
                             const PhysicalConstants& pc) {
    if (conc.size() != comp.size())
        throw std::invalid_argument("charge_density: species/concentration length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < conc.size(); ++i) s += comp[i].z * conc[i];
    return pc.faraday() * s;
}

/// Debye screening length sqrt(eps * V_th / (F * sum z_i^2 c_bath_i)) (m).
inline double debye_length(const BathComposition& comp, const PhysicalConstants& pc) {
    double s = 0.0;
    for (const auto& sp : comp.species()) s += double(sp.z) * sp.z * sp.c_bath;
    if (!(s > 0.0)) throw std::invalid_argument("debye_length: empty or zero-concentration composition");
    return std::sqrt(pc.eps_water * thermal_voltage(pc) / (pc.faraday() * s));
}

/// Capacitive/effective couplings of the lumped interface models.
struct CouplingParams {
    double C_M = 1e-2;       // membrane specific capacitance (F/m^2)
    double C_S = 3e-3;       // substrate specific capacitance (F/m^2)
    double kappa = 5.0;      // C* = C_M/kappa when C_star not set
    double kappa_star = 20.0;// v*_i = p_i/kappa_star when v_star not set
    std::optional<double> C_star;  // artificial-boundary capacitance (F/m^2)
    std::optional<double> v_star;  // effective permeability on the truncation boundary (m/s)
    double t_M = 5e-9;       // membrane thickness (m)
    double delta_j = 100e-9; // cleft thickness (m)
    double lambda_debye = 8e-10;  // Debye length (m)
    std::optional<double> H; // boundary-layer width (m); default 2*lambda_debye

    void validate() const {
        if (!(C_M > 0.0) || !(C_S > 0.0))
            throw std::invalid_argument("CouplingParams: capacitances must be positive");
        if (!(t_M > 0.0) || !(delta_j > 0.0) || !(lambda_debye > 0.0))
            throw std::invalid_argument("CouplingParams: lengths must be positive");
        if (!(layer_width() > 0.0) || layer_width() >= delta_j / 2.0)
            throw std::invalid_argument("CouplingParams: layer width H must satisfy 0 < H < delta_j/2");
    }

    double effective_C_star() const { return C_star ? *C_star : C_M / kappa; }
    double effective_v_star(double permeability) const {
        return v_star ? *v_star : permeability / kappa_star;
    }
    double layer_width() const { return H ? *H : 2.0 * lambda_debye; }
};

/// Piecewise-constant stimulus (Heaviside combinations) for V_cell and V_G.
struct StimulusWaveform {
    struct Segment {
        double t0 = 0.0, t1 = 0.0;  // [t0, t1)
        double V_cell = 0.0;
        double V_G = 0.0;
    };
    std::vector<Segment> segments;

    void validate() const {
        if (segments.empty())
            throw std::invalid_argument("StimulusWaveform: at least one segment required");
        if (segments.front().t0 != 0.0)
            throw std::invalid_argument("StimulusWaveform: first segment must start at t = 0");
        for (std::size_t i = 0; i < segments.size(); ++i) {
            if (!(segments[i].t1 > segments[i].t0))
                throw std::invalid_argument("StimulusWaveform: segment must have positive duration");
            if (i > 0 && segments[i].t0 != segments[i - 1].t1)
                throw std::invalid_argument("StimulusWaveform: segments must be contiguous");
        }
    }

    double t_final() const { return segments.back().t1; }

    const Segment& at(double t) const {
        if (t <= segments.front().t0) return segments.front();
        for (const auto& s : segments)
            if (t < s.t1) return s;
        return segments.back();
    }

    /// Interior segment boundaries, i.e. the stimulus discontinuity times.
    std::vector<double> switch_times() const {
        std::vector<double> ts;
        for (std::size_t i = 1; i < segments.size(); ++i) ts.push_back(segments[i].t0);
        return ts;
    }
};

}  // namespace cleftsim
