"""Physical constants (SI unless noted). CODATA 2018 values."""

C_LIGHT = 299792458.0          # m/s
E_CHARGE = 1.602176634e-19     # C
HBAR = 1.054571817e-34         # J s
H_PLANCK = 6.62607015e-34      # J s
M_E = 9.1093837015e-31         # kg
M_E_C2_EV = 510998.95000       # electron rest energy, eV

EV = E_CHARGE                  # 1 eV in J


def photon_energy_ev(wavelength_m):
    """Photon energy in eV for a vacuum wavelength in metres."""
    return H_PLANCK * C_LIGHT / (wavelength_m * EV)


def angular_frequency(wavelength_m):
    """Angular frequency (rad/s) for a vacuum wavelength in metres."""
    import math
    return 2.0 * math.pi * C_LIGHT / wavelength_m
