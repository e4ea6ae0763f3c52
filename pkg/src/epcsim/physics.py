"""Electron-photon coupling physics for a ring microresonator.

Models the vacuum coupling of a free electron passing near a ring
resonator through an analytic evanescent field: the field magnitude
decays exponentially with the local distance to the waveguide surface
and carries the propagation phase of the travelling ring mode.  The
coupling amplitude is the phase integral of this field along the
(straight) electron trajectory, calibrated against a reference coupling
strength at a reference impact distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import C_LIGHT, M_E_C2_EV, angular_frequency, photon_energy_ev
from .errors import DomainError, ResolutionError, SaturationError

__all__ = [
    "OpticalMode",
    "ModeComb",
    "Trajectory",
    "CouplingResult",
    "PairState",
    "LossStage",
    "LossChain",
    "SensitivityCurve",
    "SpectralEnvelope",
    "CouplingModel",
    "electron_velocity",
    "phase_mismatch",
    "phase_matching_integral",
    "ramsey_coupling",
    "pair_state",
    "bus_coupling_efficiency",
    "cavity_lifetime",
    "saturation_correct",
    "build_comb",
]


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OpticalMode:
    """One resonator mode: frequency, effective index and loss rates."""

    index: int
    omega: float            # angular frequency, rad/s
    n_eff: float            # effective refractive index at this wavelength
    d_ev: float             # evanescent decay length, m
    u0: float = 1.0         # peak surface field scale (normalised)
    kappa_0: float = 0.0    # intrinsic loss rate, rad/s
    kappa_ex: float = 0.0   # external (bus) coupling rate, rad/s

    def __post_init__(self):
        if self.omega <= 0:
            raise DomainError("mode frequency must be positive")
        if self.d_ev <= 0:
            raise DomainError("evanescent decay length must be positive")
        if self.kappa_0 < 0 or self.kappa_ex < 0:
            raise DomainError("loss rates must be non-negative")

    @property
    def wavelength(self):
        """Vacuum wavelength, m."""
        return 2.0 * math.pi * C_LIGHT / self.omega

    @property
    def photon_energy_ev(self):
        return photon_energy_ev(self.wavelength)

    @property
    def q_factor(self):
        kappa = self.kappa_0 + self.kappa_ex
        if kappa == 0:
            return math.inf
        return self.omega / kappa


@dataclass(frozen=True)
class ModeComb:
    """Ordered set of resonator modes with a fixed free spectral range."""

    modes: tuple
    fsr: float              # Hz

    def __post_init__(self):
        if not self.modes:
            raise DomainError("mode comb must contain at least one mode")
        freqs = np.array([m.omega for m in self.modes]) / (2 * math.pi)
        if len(freqs) > 1:
            d = np.diff(freqs)
            if not np.allclose(d, self.fsr, rtol=1e-6):
                raise DomainError("mode spacing inconsistent with FSR")
        wl = np.array([m.wavelength for m in self.modes])
        if np.any(np.diff(wl) >= 0):
            raise DomainError("wavelengths must decrease with mode index")

    def __len__(self):
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    @property
    def wavelengths(self):
        return np.array([m.wavelength for m in self.modes])

    @property
    def omegas(self):
        return np.array([m.omega for m in self.modes])


@dataclass(frozen=True)
class Trajectory:
    """Straight electron beam line relative to the resonator.

    ``d`` is the height of the line above the waveguide top surface.  A
    negative ``d`` flags a beam that clips the chip (absorbed, no
    coupling).  ``x`` is the in-plane offset of the line from the
    tangential position: ``x > 0`` shifts the line towards the ring
    centre (chord geometry with two crossings), ``x < 0`` away from it.

    Exactly one of ``segment_length`` (straight single-pass segment with
    a uniform field window) or ``ring_radius`` (full ring-arc geometry)
    must be set.
    """

    kinetic_energy_ev: float
    d: float
    x: float = 0.0
    segment_length: float | None = None
    ring_radius: float | None = None

    def __post_init__(self):
        if self.kinetic_energy_ev < 0:
            raise DomainError("kinetic energy must be non-negative")
        if (self.segment_length is None) == (self.ring_radius is None):
            raise DomainError(
                "set exactly one of segment_length or ring_radius")

    @property
    def velocity(self):
        return electron_velocity(self.kinetic_energy_ev)

    @property
    def clips_chip(self):
        return self.d < 0


@dataclass(frozen=True)
class CouplingResult:
    """Per-mode complex couplings and the total scattering probability."""

    couplings: np.ndarray      # complex, one entry per comb mode
    clipped: bool = False

    @property
    def probability(self):
        """Total scattering probability, sum of per-mode |g|^2."""
        return float(np.sum(np.abs(self.couplings) ** 2))

    @property
    def mode_probabilities(self):
        return np.abs(self.couplings) ** 2


@dataclass(frozen=True)
class PairState:
    """Truncated joint electron-photon state for a single mode."""

    g: complex
    photon_energy_ev: float
    coefficients: np.ndarray   # c_0 .. c_N

    @property
    def n_max(self):
        return len(self.coefficients) - 1

    @property
    def probabilities(self):
        return np.abs(self.coefficients) ** 2

    @property
    def mean_photon_number(self):
        n = np.arange(len(self.coefficients))
        return float(np.sum(n * self.probabilities))

    def electron_energies_ev(self, incident_energy_ev):
        """Support of the electron energy after the interaction."""
        n = np.arange(len(self.coefficients))
        return incident_energy_ev - n * self.photon_energy_ev


@dataclass(frozen=True)
class LossStage:
    """One transmission stage of a loss chain.

    ``budgeted`` marks stages included in the declared transmission used
    when converting Klyshko to intrinsic heralding efficiencies;
    unbudgeted stages model losses the rate analysis does not account
    for.
    """

    name: str
    transmission: float
    budgeted: bool = True

    def __post_init__(self):
        if not 0.0 <= self.transmission <= 1.0:
            raise DomainError(
                f"stage {self.name!r}: transmission must lie in [0, 1]")


@dataclass(frozen=True)
class LossChain:
    """Ordered chain of transmission stages (photon or electron side)."""

    stages: tuple

    @property
    def total(self):
        p = 1.0
        for s in self.stages:
            p *= s.transmission
        return p

    @property
    def budgeted_total(self):
        p = 1.0
        for s in self.stages:
            if s.budgeted:
                p *= s.transmission
        return p

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @staticmethod
    def from_pairs(pairs, unbudgeted=()):
        stages = tuple(
            LossStage(n, t, budgeted=n not in unbudgeted) for n, t in pairs)
        return LossChain(stages)


@dataclass(frozen=True)
class SensitivityCurve:
    """Tabulated detector sensitivity vs vacuum wavelength.

    Linear interpolation between samples; zero outside the covered
    range (callers receive a flag for out-of-range queries).
    """

    wavelengths_m: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_m, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if wl.ndim != 1 or wl.shape != v.shape or len(wl) < 2:
            raise DomainError("sensitivity curve needs >= 2 (wl, value) rows")
        if np.any(np.diff(wl) <= 0):
            raise DomainError("sensitivity wavelengths must be increasing")
        if np.any(v < 0):
            raise DomainError("sensitivity values must be non-negative")
        object.__setattr__(self, "wavelengths_m", wl)
        object.__setattr__(self, "values", v)

    def __call__(self, wavelength_m):
        wl = np.asarray(wavelength_m, dtype=float)
        out = np.interp(wl, self.wavelengths_m, self.values,
                        left=0.0, right=0.0)
        return out if out.ndim else float(out)

    def covers(self, wavelength_m):
        wl = np.asarray(wavelength_m, dtype=float)
        inside = (wl >= self.wavelengths_m[0]) & (wl <= self.wavelengths_m[-1])
        return inside if inside.ndim else bool(inside)

    @staticmethod
    def flat(value=1.0, lo=1.0e-6, hi=2.0e-6):
        return SensitivityCurve(np.array([lo, hi]), np.array([value, value]))


@dataclass(frozen=True)
class SpectralEnvelope:
    """Per-mode detected-photon probabilities |g|^2 * eta * S."""

    wavelengths_m: np.ndarray
    mode_probabilities: np.ndarray    # |g_mu|^2
    detected_probabilities: np.ndarray
    uncovered: np.ndarray             # bool flags: S did not cover the mode


# --------------------------------------------------------------------------
# kinematics and elementary relations
# --------------------------------------------------------------------------

def electron_velocity(kinetic_energy_ev):
    """Relativistic electron speed (m/s) for a kinetic energy in eV."""
    if kinetic_energy_ev < 0:
        raise DomainError("kinetic energy must be non-negative")
    gamma = 1.0 + kinetic_energy_ev / M_E_C2_EV
    return C_LIGHT * math.sqrt(1.0 - 1.0 / (gamma * gamma))


def phase_mismatch(mode, v_e):
    """Wavevector mismatch omega/v_e - n_eff*omega/c (1/m)."""
    if v_e <= 0:
        raise DomainError("electron velocity must be positive")
    return mode.omega / v_e - mode.n_eff * mode.omega / C_LIGHT


def phase_matching_integral(z, u, omega, v_e, min_samples_per_period=40):
    """Trapezoid quadrature of integral dz e^{i z omega/v} u*(z).

    ``z`` must be an increasing, uniformly spaced sample grid and ``u``
    the (complex) field samples on it.  Refuses to evaluate when the
    grid under-resolves the integrand oscillation (fewer than
    ``min_samples_per_period`` samples per period of the combined
    phase).
    """
    if v_e <= 0:
        raise DomainError("electron velocity must be positive")
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=complex)
    if z.ndim != 1 or z.shape != u.shape or len(z) < 2:
        raise DomainError("z and u must be matching 1-D arrays, len >= 2")
    dz = np.diff(z)
    h = dz[0]
    if h <= 0 or not np.allclose(dz, h, rtol=1e-9):
        raise DomainError("z grid must be uniform and increasing")

    # combined phase rate: the carrier omega/v plus the field's own phase
    phase_u = np.unwrap(np.angle(u))
    # ignore phase jumps where the field is negligible (angle is noise there)
    amp = np.abs(u)
    significant = amp > 1e-12 * (amp.max() if amp.max() > 0 else 1.0)
    dphase = np.zeros(len(z) - 1)
    both = significant[:-1] & significant[1:]
    dphase[both] = np.abs(np.diff(phase_u))[both]
    rate = np.max(np.abs(omega / v_e * h - dphase), initial=abs(omega / v_e) * h)
    if rate > 2.0 * math.pi / min_samples_per_period:
        raise ResolutionError(
            f"quadrature grid under-resolved: {2 * math.pi / rate:.1f} "
            f"samples per period < {min_samples_per_period} required")

    integrand = np.exp(1j * z * omega / v_e) * np.conj(u)
    return complex(np.trapezoid(integrand, dx=h))


def ramsey_coupling(g1, g2, phi):
    """Coherent two-segment composition g1 + e^{i phi} g2."""
    return g1 + np.exp(1j * phi) * g2


def pair_state(g, photon_energy_ev, n_max=8):
    """Joint state coefficients c_n = e^{-|g|^2/2} g^n / sqrt(n!)."""
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    n = np.arange(n_max + 1)
    log_fact = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, n_max + 1)))))
    mag = np.abs(g)
    with np.errstate(divide="ignore"):
        log_mag_n = np.where(n == 0, 0.0, n * np.log(mag) if mag > 0 else -np.inf)
    amp = np.exp(-0.5 * mag * mag + log_mag_n - 0.5 * log_fact)
    phase = np.exp(1j * n * np.angle(complex(g))) if mag > 0 else np.ones_like(n, dtype=complex)
    coeff = amp * phase
    if mag == 0:
        coeff = np.zeros(n_max + 1, dtype=complex)
        coeff[0] = 1.0
    return PairState(g=complex(g), photon_energy_ev=photon_energy_ev,
                     coefficients=coeff)


def bus_coupling_efficiency(kappa_0, kappa_ex):
    """Bus out-coupling probability kappa_ex / (kappa_0 + kappa_ex)."""
    if kappa_0 < 0 or kappa_ex < 0:
        raise DomainError("loss rates must be non-negative")
    total = kappa_0 + kappa_ex
    if total == 0:
        raise DomainError("kappa_0 + kappa_ex must be positive")
    return kappa_ex / total


def cavity_lifetime(q_factor, omega):
    """Photon lifetime tau = Q / omega (s)."""
    if q_factor <= 0 or omega <= 0:
        raise DomainError("Q and omega must be positive")
    return q_factor / omega


def saturation_correct(rate_measured, dead_time):
    """Non-paralyzable dead-time correction R / (1 - R * tau)."""
    if rate_measured < 0 or dead_time < 0:
        raise DomainError("rate and dead time must be non-negative")
    x = rate_measured * dead_time
    if x >= 1.0:
        raise SaturationError(
            f"measured rate * dead time = {x:.3g} >= 1: detector saturated")
    return rate_measured / (1.0 - x)


# --------------------------------------------------------------------------
# coupling model (analytic evanescent field over the ring)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingModel:
    """Analytic near-field model with a calibrated overall scale.

    The field above the waveguide is ``u0 * exp(-y/d_ev)`` with ``y``
    the local distance between trajectory point and waveguide surface,
    carrying the travelling-mode phase ``exp(i n_eff omega s / c)``
    along the ring arc.  The electromagnetic prefactor is absorbed into
    ``g_ref``: the phase-matched tangential coupling magnitude at the
    reference distance ``d_ref``.
    """

    d_ev: float = 250e-9
    ring_radius: float = 113.75e-6
    ring_width: float = 2.1e-6
    g_ref: float = 0.03
    d_ref: float = 50e-9
    n_eff0: float = 1.7045327929524472   # phase-matched at 120 keV
    dn_dlambda: float = -4.25e5          # 1/m; sets ~50 meV matching bandwidth
    lambda0: float = 1550e-9
    n_samples: int = 4001
    _scale_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def n_eff(self, wavelength_m):
        return self.n_eff0 + self.dn_dlambda * (wavelength_m - self.lambda0)

    # -- raw (uncalibrated) phase integrals ---------------------------------

    def _grid(self, traj):
        """Integration grid bounds for a trajectory."""
        if traj.segment_length is not None:
            half = traj.segment_length / 2.0
            return -half, half
        # ring geometry: integrate where the lateral decay is non-negligible
        reach = 14.0 * self.d_ev + self.ring_width / 2.0
        r_out = self.ring_radius + reach
        b = self._chord_distance(traj)
        if b >= r_out:
            return None
        z_max = math.sqrt(r_out * r_out - b * b)
        return -z_max, z_max

    def _chord_distance(self, traj):
        """In-plane distance of the beam line from the ring centre."""
        b = self.ring_radius - traj.x
        if b <= self.ring_width:
            raise DomainError("beam line too close to the ring centre for "
                              "the chord geometry model")
        return b

    def _field(self, z, omega, n_eff, traj):
        """Complex field samples u(z) along the trajectory (no carrier)."""
        if traj.segment_length is not None:
            amp = math.exp(-traj.d / self.d_ev) * np.ones_like(z)
            s = z
        else:
            b = self._chord_distance(traj)
            r = np.hypot(b, z)
            lateral = np.maximum(0.0, np.abs(r - self.ring_radius)
                                 - self.ring_width / 2.0)
            y = np.hypot(traj.d, lateral)
            amp = np.exp(-y / self.d_ev)
            s = self.ring_radius * np.arctan2(z, b)
        return amp * np.exp(1j * n_eff * omega / C_LIGHT * s)

    def raw_integral(self, omega, traj, n_eff=None, z_range=None):
        """Uncalibrated phase-matching integral for one frequency."""
        if traj.clips_chip:
            return 0.0
        if n_eff is None:
            n_eff = self.n_eff(2 * math.pi * C_LIGHT / omega)
        bounds = z_range if z_range is not None else self._grid(traj)
        if bounds is None:
            return 0.0
        z0, z1 = bounds
        v = traj.velocity
        # resolve both the carrier-vs-mode beat and the envelope
        dk = abs(omega / v - n_eff * omega / C_LIGHT)
        n_beat = int((z1 - z0) * (dk + omega / v * 0.08) / (2 * math.pi) * 60)
        n = max(self.n_samples, n_beat, 81)
        z = np.linspace(z0, z1, n)
        u = self._field(z, omega, n_eff, traj)
        integrand = np.exp(1j * z * omega / v) * np.conj(u)
        return complex(np.trapezoid(integrand, dx=z[1] - z[0]))

    # -- calibrated couplings ----------------------------------------------

    def _calibration_scale(self, traj):
        """Overall amplitude scale fixed by |g| = g_ref at d_ref."""
        key = ("seg", traj.segment_length, traj.kinetic_energy_ev) \
            if traj.segment_length is not None \
            else ("ring", traj.kinetic_energy_ev)
        cached = self._scale_cache.get(key)
        if cached is not None:
            return cached
        ref = replace(traj, d=self.d_ref, x=0.0)
        v = ref.velocity
        # reference frequency: phase-matched, n_eff(lambda) = c / v
        lam_pm = self.lambda0 + (C_LIGHT / v - self.n_eff0) / self.dn_dlambda
        omega_pm = angular_frequency(lam_pm)
        ref_int = abs(self.raw_integral(omega_pm, ref))
        if ref_int == 0:
            raise DomainError("degenerate reference geometry for calibration")
        scale = self.g_ref / ref_int
        self._scale_cache[key] = scale
        return scale

    def coupling(self, mode, traj):
        """Calibrated complex coupling g for one mode, zero if clipped."""
        if traj.clips_chip:
            return 0.0
        scale = self._calibration_scale(traj)
        return scale * self.raw_integral(mode.omega, traj, n_eff=mode.n_eff)

    def couplings(self, comb, traj):
        """CouplingResult over a full mode comb."""
        if traj.clips_chip:
            return CouplingResult(
                couplings=np.zeros(len(comb), dtype=complex), clipped=True)
        g = np.array([self.coupling(m, traj) for m in comb], dtype=complex)
        return CouplingResult(couplings=g)

    def two_pass_decomposition(self, mode, traj):
        """Split a chord trajectory into its two crossing segments.

        Returns ``(g1, g2, phi)`` with each segment integral evaluated
        in its own local frame (phase referenced to the segment centre)
        and ``phi`` the relative Ramsey phase, such that
        ``|g1 + e^{i phi} g2|`` equals the full-trajectory coupling
        magnitude up to quadrature error.
        """
        if traj.ring_radius is None:
            raise DomainError("two-pass decomposition needs ring geometry")
        scale = self._calibration_scale(traj)
        b = self._chord_distance(traj)
        z0, z1 = self._grid(traj)
        v = traj.velocity
        g_left = scale * self.raw_integral(mode.omega, traj,
                                           n_eff=mode.n_eff, z_range=(z0, 0.0))
        g_right = scale * self.raw_integral(mode.omega, traj,
                                            n_eff=mode.n_eff, z_range=(0.0, z1))
        # segment centres: mid-points of the annulus crossings
        if b < self.ring_radius:
            zc = math.sqrt(max(self.ring_radius ** 2 - b ** 2, 0.0))
        else:
            zc = 0.0
        s_c = self.ring_radius * math.atan2(zc, b)
        # electron phase advances with z; the mode phase is conjugated
        phi = 2.0 * (zc * mode.omega / v - mode.n_eff * mode.omega / C_LIGHT * s_c)
        phase1 = np.exp(1j * (-zc * mode.omega / v
                              + mode.n_eff * mode.omega / C_LIGHT * s_c))
        g1_local = g_left / phase1
        g2_local = g_right / np.conj(phase1)
        return g1_local, g2_local, phi

    def ramsey_phase(self, mode, traj):
        """Analytic relative phase between the two chord crossings."""
        _, _, phi = self.two_pass_decomposition(mode, traj)
        return phi

    def phase_matching_bandwidth(self, traj, n_points=601, span_ev=0.30):
        """FWHM (eV) of |integral|^2 vs photon energy around matching."""
        v = traj.velocity
        lam_pm = self.lambda0 + (C_LIGHT / v - self.n_eff0) / self.dn_dlambda
        e0 = photon_energy_ev(lam_pm)
        energies = np.linspace(e0 - span_ev / 2, e0 + span_ev / 2, n_points)
        from .constants import H_PLANCK, EV
        power = np.empty(n_points)
        for i, e in enumerate(energies):
            omega = e * EV / (H_PLANCK / (2 * math.pi))
            power[i] = abs(self.raw_integral(omega, traj)) ** 2
        return _fwhm_interp(energies, power)


def _fwhm_interp(x, y):
    """FWHM of a sampled single-peak profile via linear interpolation."""
    i_pk = int(np.argmax(y))
    half = y[i_pk] / 2.0
    left = None
    for i in range(i_pk, 0, -1):
        if y[i - 1] < half <= y[i]:
            f = (half - y[i - 1]) / (y[i] - y[i - 1])
            left = x[i - 1] + f * (x[i] - x[i - 1])
            break
    right = None
    for i in range(i_pk, len(y) - 1):
        if y[i + 1] < half <= y[i]:
            f = (y[i] - half) / (y[i] - y[i + 1])
            right = x[i] + f * (x[i + 1] - x[i])
            break
    if left is None or right is None:
        raise DomainError("profile does not fall to half maximum on both sides")
    return float(right - left)


# --------------------------------------------------------------------------
# comb construction and spectra
# --------------------------------------------------------------------------

def build_comb(model, fsr=194e9, lambda_min=1.48e-6, lambda_max=1.66e-6,
               q_factor=5.5e5, bus_fraction=0.17, center_wavelength=1550e-9):
    """Mode comb on an FSR-spaced frequency grid covering a wavelength band.

    One mode is pinned to ``center_wavelength``; loss rates are split so
    that ``kappa_ex/(kappa_0+kappa_ex) = bus_fraction`` at quality
    factor ``q_factor``.
    """
    f_center = C_LIGHT / center_wavelength
    k_lo = math.ceil((C_LIGHT / lambda_max - f_center) / fsr)
    k_hi = math.floor((C_LIGHT / lambda_min - f_center) / fsr)
    modes = []
    for idx, k in enumerate(range(k_lo, k_hi + 1)):
        f = f_center + k * fsr
        omega = 2 * math.pi * f
        lam = C_LIGHT / f
        kappa = omega / q_factor
        modes.append(OpticalMode(
            index=idx, omega=omega, n_eff=model.n_eff(lam), d_ev=model.d_ev,
            kappa_0=kappa * (1 - bus_fraction), kappa_ex=kappa * bus_fraction))
    return ModeComb(modes=tuple(modes), fsr=fsr)


def total_scattering_probability(model, comb, traj):
    """CouplingResult with P = sum of per-mode |g|^2."""
    return model.couplings(comb, traj)


def emission_spectrum(model, comb, traj, chain=None, sensitivity=None):
    """Detected-photon probability per mode: |g|^2 * eta(omega) * S(omega).

    ``eta`` is each mode's bus out-coupling efficiency; ``chain``
    contributes a frequency-flat extra transmission (its total, with any
    stage named 'bus' excluded to avoid double counting).
    """
    result = model.couplings(comb, traj)
    p_mode = result.mode_probabilities
    eta = np.array([bus_coupling_efficiency(m.kappa_0, m.kappa_ex)
                    if (m.kappa_0 + m.kappa_ex) > 0 else 0.0 for m in comb])
    wl = comb.wavelengths
    if sensitivity is None:
        s = np.ones(len(comb))
        uncovered = np.zeros(len(comb), dtype=bool)
    else:
        s = np.asarray(sensitivity(wl), dtype=float)
        uncovered = ~np.asarray(sensitivity.covers(wl), dtype=bool)
        s = np.where(uncovered, 0.0, s)
    extra = 1.0
    if chain is not None:
        extra = 1.0
        for st in chain.stages:
            if st.name != "bus":
                extra *= st.transmission
    detected = p_mode * eta * s * extra
    return SpectralEnvelope(
        wavelengths_m=wl, mode_probabilities=p_mode,
        detected_probabilities=detected, uncovered=uncovered)
