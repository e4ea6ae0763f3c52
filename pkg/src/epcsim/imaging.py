"""Raster-scan simulation: electron, photon and coincidence maps.

Scans the beam over a grid of (height, lateral offset) positions,
running the Monte Carlo pipeline per pixel, and extracts three channels
per pixel: energy-gated electron counts, photon tags, and time-and-
energy-gated coincidences.  Includes exponential decay fitting of
approach profiles and the dynamic-range metric.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .errors import DomainError, FitError
from .montecarlo import T_START, simulate_run
from . import analysis as an

__all__ = ["ScanGrid", "ScanMaps", "ChannelGates", "raster_simulate",
           "decay_profile", "dynamic_range", "DecayFit"]


@dataclass(frozen=True)
class ScanGrid:
    """Pixel positions for a raster scan.

    ``d`` and ``x`` are same-shape arrays of beam heights above the
    chip surface and lateral offsets (m).  Negative heights mark pixels
    where the beam clips the chip.
    """

    d: np.ndarray
    x: np.ndarray
    dwell: float = 30e-3

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if d.shape != x.shape:
            raise DomainError("d and x grids must have the same shape")
        if self.dwell <= 0:
            raise DomainError("dwell time must be positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)

    @property
    def n_pixels(self):
        return self.d.size

    @property
    def chip_mask(self):
        """True where the beam clips the chip (absorbed, no photons)."""
        return self.d < 0

    @staticmethod
    def line(d_start, d_stop, n, x=0.0, dwell=30e-3):
        """1-D approach line at fixed lateral offset."""
        d = np.linspace(d_start, d_stop, n)
        return ScanGrid(d=d, x=np.full(n, x), dwell=dwell)


@dataclass(frozen=True)
class ChannelGates:
    """Selection gates applied when extracting map channels."""

    energy_gate: tuple = (0.45, 2.0)    # eV, electron energy loss
    peak_gate_s: float = 8e-9           # half-width of the timing gate


@dataclass
class ScanMaps:
    """Per-pixel counts for the three channels, plus live time."""

    electrons: np.ndarray      # energy-gated electron events
    photons: np.ndarray        # photon tags (includes dark counts)
    coincidences: np.ndarray   # time- and energy-gated pairs
    live_time: np.ndarray      # s per pixel
    grid: ScanGrid

    def __post_init__(self):
        bound = np.minimum(self.electrons, self.photons)
        if np.any(self.coincidences > bound):
            raise DomainError(
                "coincidence counts exceed a single-channel count")

    def channel(self, name):
        try:
            return getattr(self, name)
        except AttributeError:
            raise KeyError(name) from None

    def export_csv(self):
        """Rows of pixel_idx, d_m, x_m, channel, counts."""
        lines = ["pixel_idx,d_m,x_m,channel,counts"]
        d = self.grid.d.ravel()
        x = self.grid.x.ravel()
        for name in ("electrons", "photons", "coincidences"):
            vals = self.channel(name).ravel()
            for i in range(len(vals)):
                lines.append(f"{i},{d[i]!r},{x[i]!r},{name},{int(vals[i])}")
        return "\n".join(lines) + "\n"


def raster_simulate(grid, cfg, gates=ChannelGates()):
    """Run the Monte Carlo pipeline per grid pixel and extract channels.

    Each pixel runs an independent simulation at the pixel's (d, x)
    with duration ``grid.dwell`` and a sub-seed derived from
    ``cfg.seed`` and the pixel index, so any execution order produces
    the same maps.
    """
    shape = grid.d.shape
    electrons = np.zeros(shape, dtype=np.int64)
    photons = np.zeros(shape, dtype=np.int64)
    coincidences = np.zeros(shape, dtype=np.int64)
    live = np.full(shape, grid.dwell)

    e_lo, e_hi = gates.energy_gate
    flat_d = grid.d.ravel()
    flat_x = grid.x.ravel()
    for i in range(grid.n_pixels):
        beam = dataclasses.replace(cfg.beam, d=flat_d[i], x=flat_x[i])
        pix_cfg = dataclasses.replace(cfg, beam=beam, duration=grid.dwell,
                                      seed=[int(cfg.seed), i])
        stream, _ = simulate_run(pix_cfg)
        ev = an.events_from_stream(stream)
        t_p = stream.tdc_times_s - T_START
        n_e = int(np.count_nonzero((ev.energy_ev >= e_lo)
                                   & (ev.energy_ev < e_hi)))
        n_p = len(t_p)
        if n_e and n_p:
            hist = an.correlate(ev.time_s - T_START, ev.energy_ev, t_p,
                                duration=grid.dwell, delay=cfg.path_delay)
            n_c = hist.gate_counts(-gates.peak_gate_s, gates.peak_gate_s,
                                   e_lo, e_hi)
        else:
            n_c = 0
        idx = np.unravel_index(i, shape)
        electrons[idx] = n_e
        photons[idx] = n_p
        coincidences[idx] = min(n_c, n_e, n_p)
    return ScanMaps(electrons=electrons, photons=photons,
                    coincidences=coincidences, live_time=live, grid=grid)


@dataclass
class DecayFit:
    """Exponential-plus-offset fit of an approach profile."""

    length: float          # decay length, m
    length_err: float
    amplitude: float
    offset: float
    offset_err: float
    residuals: np.ndarray


def decay_profile(d, counts, min_points=5):
    """Least-squares fit counts(d) = A exp(-d / ell) + B.

    ``d`` in metres, ``counts`` the per-pixel channel counts along the
    approach axis.  The intensity decay length relates to the field
    decay length through ell = d_ev / 2.  Raises FitError (with
    residual diagnostics where available) when the profile cannot
    support the fit.
    """
    d = np.asarray(d, dtype=float)
    y = np.asarray(counts, dtype=float)
    if d.shape != y.shape or d.ndim != 1:
        raise DomainError("d and counts must be matching 1-D arrays")
    floor = np.median(y[np.argsort(d)][-max(3, len(y) // 4):])
    above = y > floor + 3.0 * math.sqrt(max(floor, 1.0))
    if np.count_nonzero(above) < min_points:
        raise FitError(f"fewer than {min_points} points above the noise "
                       "floor", residuals=y - floor)

    span = d.max() - d.min()
    p0 = (max(y.max() - floor, 1.0), max(span / 5.0, 1e-9), max(floor, 0.0))
    sigma = np.sqrt(np.maximum(y, 1.0))

    def model(dd, a, ell, b):
        return a * np.exp(-dd / ell) + b

    try:
        popt, pcov = curve_fit(model, d, y, p0=p0, sigma=sigma,
                               absolute_sigma=True, maxfev=20000)
    except RuntimeError as exc:
        raise FitError(f"decay fit did not converge: {exc}",
                       residuals=y - model(d, *p0)) from None
    a, ell, b = popt
    res = y - model(d, *popt)
    if ell <= 0 or not np.all(np.isfinite(pcov)):
        raise FitError("decay fit produced a non-physical length",
                       residuals=res)
    return DecayFit(length=float(ell),
                    length_err=float(math.sqrt(pcov[1, 1])),
                    amplitude=float(a), offset=float(b),
                    offset_err=float(math.sqrt(pcov[2, 2])),
                    residuals=res)


def dynamic_range(counts, floor=None):
    """DR = (max signal above floor) / max(floor, one count).

    ``floor`` defaults to the median of the last quarter of the profile
    (the far-field plateau).  A profile with no signal above the floor
    reports DR = 1 with a flag.  Returns ``(dr, flagged)``.
    """
    y = np.asarray(counts, dtype=float)
    if y.size == 0:
        raise DomainError("empty profile")
    if floor is None:
        floor = float(np.median(y[-max(3, len(y) // 4):]))
    if floor < 0:
        raise DomainError("noise floor must be non-negative")
    signal = y.max() - floor
    denom = max(floor, 1.0)
    if signal <= 0:
        return 1.0, True
    return max(signal / denom, 1.0), False
