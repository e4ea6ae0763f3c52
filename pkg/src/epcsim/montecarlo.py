"""Synthetic dual-detector event streams from the physics model.

Electron arrivals are Poisson; each electron scatters photons into the
comb modes with independent per-mode Poisson statistics; photons run
through the cavity-decay / loss-chain / SPAD pipeline and electrons
through the spectrometer / pixel-detector pipeline.  The run is split
into fixed-length time slabs with deterministically derived sub-seeds,
so slab execution order (or thread count) never changes the output.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .constants import E_CHARGE
from .errors import ConfigError, ContractError, DomainError
from .event_io import EventStream, HIT_TICK, TDC_TICK
from .physics import (CouplingModel, LossChain, ModeComb, Trajectory,
                      bus_coupling_efficiency)

T_START = 1e-6     # run origin offset, keeps early timestamps positive
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

__all__ = [
    "BeamSpec", "SpadSpec", "ElectronDetectorSpec", "SimConfig",
    "GroundTruth", "simulate_run", "sample_scattering", "apply_dead_time",
    "make_calibration_stream",
]


# --------------------------------------------------------------------------
# specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BeamSpec:
    """Continuous electron beam: current or rate, energy, ZLP width."""

    energy_ev: float
    zlp_fwhm_ev: float
    d: float
    x: float = 0.0
    current_a: float | None = None
    rate_hz: float | None = None

    def __post_init__(self):
        if (self.current_a is None) == (self.rate_hz is None):
            raise ConfigError("set exactly one of current_a or rate_hz")
        if self.zlp_fwhm_ev < 0:
            raise ConfigError("ZLP width must be non-negative")

    @property
    def rate(self):
        if self.rate_hz is not None:
            return self.rate_hz
        return self.current_a / E_CHARGE

    @property
    def current(self):
        return self.rate * E_CHARGE


@dataclass(frozen=True)
class SpadSpec:
    """Single-photon avalanche diode behind the photon chain."""

    efficiency: float = 0.25
    dead_time: float = 50e-6
    dark_rate: float = 130.0
    jitter_fwhm: float = 150e-12
    tdc_tick: float = float(TDC_TICK)

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("SPAD efficiency must lie in [0, 1]")
        if self.dead_time <= 0:
            raise ConfigError("dead time must be positive")
        if self.jitter_fwhm < 0 or self.dark_rate < 0:
            raise ConfigError("jitter and dark rate must be non-negative")


@dataclass(frozen=True)
class ElectronDetectorSpec:
    """Event-based pixel detector behind the dispersive spectrometer."""

    nx: int = 512
    ny: int = 512
    toa_tick: float = float(HIT_TICK)
    dispersion_ev_per_px: float = 0.11
    zlp_pixel: float = 30.0          # column of zero energy loss
    beam_row: int = 256
    mean_hits: float = 4.0           # mean hits per electron cluster
    cluster_spread_px: int = 1       # hits uniform in (2s+1)^2 neighbourhood
    skew_ns: float = 5.2             # max within-cluster hit-time skew
    toa_jitter_fwhm_ns: float = 0.0  # per-electron timing jitter (time walk)
    offset_spread_ns: float = 2.0    # per-pixel ToA offsets ~ U(-s, +s)
    offset_map_ns: np.ndarray | None = None
    saturation_ceiling: float = 1.2e8    # hits/s
    slit_block_ev: tuple | None = None   # (lo, hi) measured-energy band blocked
    efficiency: float = 0.9          # detector quantum efficiency
    beam_transmission: float = 1.0   # unaccounted electron losses upstream

    def __post_init__(self):
        if self.dispersion_ev_per_px <= 0:
            raise ConfigError("dispersion must be positive")
        if self.saturation_ceiling <= 0:
            raise ConfigError("saturation ceiling must be positive")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("detector efficiency must lie in [0, 1]")
        if not 0.0 <= self.beam_transmission <= 1.0:
            raise ConfigError("beam transmission must lie in [0, 1]")
        if self.offset_map_ns is not None:
            m = np.asarray(self.offset_map_ns, dtype=float)
            if m.shape != (self.ny, self.nx) or not np.all(np.isfinite(m)):
                raise ConfigError("offset map must be finite with shape "
                                  f"({self.ny}, {self.nx})")


@dataclass(frozen=True)
class SimConfig:
    """Complete description of one simulated acquisition."""

    beam: BeamSpec
    model: CouplingModel
    comb: ModeComb
    chain: LossChain              # photon chain, bus and detector excluded
    spad: SpadSpec
    edet: ElectronDetectorSpec
    duration: float
    seed: int
    sensitivity: object | None = None
    path_delay: float = 50e-9     # photon electronic + fibre delay
    log_truth: bool = False
    slab_duration: float = 0.05
    threads: int = 1

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.slab_duration <= 0:
            raise ConfigError("slab duration must be positive")

    def trajectory(self):
        return Trajectory(kinetic_energy_ev=self.beam.energy_ev,
                          d=self.beam.d, x=self.beam.x,
                          ring_radius=self.model.ring_radius)


@dataclass
class GroundTruth:
    """Per-electron truth for oracle tests (logging mode only)."""

    arrival_time: np.ndarray
    loss_ev: np.ndarray
    n_photons: np.ndarray
    photon_detected: np.ndarray
    electron_detected: np.ndarray
    mode_electron_idx: np.ndarray   # sparse per-mode photon counts:
    mode_idx: np.ndarray            # (electron row, mode, count) triples
    mode_count: np.ndarray

    @property
    def n_electrons(self):
        return len(self.arrival_time)

    def to_csv(self):
        lines = ["arrival_time_s,loss_ev,n_photons,photon_detected,"
                 "electron_detected"]
        for i in range(self.n_electrons):
            lines.append(
                f"{self.arrival_time[i]!r},{self.loss_ev[i]!r},"
                f"{int(self.n_photons[i])},{int(self.photon_detected[i])},"
                f"{int(self.electron_detected[i])}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# elementary operations
# --------------------------------------------------------------------------

def sample_scattering(p_modes, rng, size=None):
    """Independent Poisson photon counts for per-mode probabilities |g|^2."""
    p = np.asarray(p_modes, dtype=float)
    if np.any(p < 0):
        raise DomainError("per-mode probabilities must be non-negative")
    if size is None:
        return rng.poisson(lam=p)
    return rng.poisson(lam=p, size=(size, len(p)))


def apply_dead_time(times, dead_time):
    """Greedy non-paralyzable dead-time filter on a sorted time array."""
    t = np.asarray(times, dtype=float)
    if len(t) == 0:
        return t.copy()
    if np.any(np.diff(t) < 0):
        raise ContractError("input times must be sorted")
    keep = np.zeros(len(t), dtype=bool)
    last = -math.inf
    i = 0
    n = len(t)
    while i < n:
        keep[i] = True
        last = t[i]
        # jump past everything inside the dead window
        i = int(np.searchsorted(t, last + dead_time, side="left"))
    return t[keep]


# --------------------------------------------------------------------------
# slab simulation
# --------------------------------------------------------------------------

def _slit_pass_probability(sigma, slit):
    """Probability that a ZLP-broadened zero-loss electron passes the slit."""
    if slit is None:
        return 1.0
    lo, hi = slit
    if sigma == 0:
        return 0.0 if lo <= 0.0 <= hi else 1.0
    return float(norm.cdf(lo / sigma) + norm.sf(hi / sigma))


def _sample_outside_block(n, sigma, slit, rng):
    """Gaussian(0, sigma) samples conditioned on lying outside the slit."""
    if slit is None or n == 0:
        return rng.normal(0.0, sigma, size=n)
    lo, hi = slit
    p_lo = norm.cdf(lo / sigma)
    p_hi = norm.sf(hi / sigma)
    u = rng.random(n) * (p_lo + p_hi)
    q = np.where(u < p_lo, u, 1.0 - (u - p_lo))
    return sigma * norm.ppf(np.clip(q, 1e-300, 1 - 1e-16))


@dataclass
class _SlabResult:
    e_time: np.ndarray        # detected electrons
    e_energy: np.ndarray      # measured energy loss (eV)
    p_time: np.ndarray        # detected photons (pre dark, pre dead time)
    truth: GroundTruth | None
    n_electrons: int
    n_photons_emitted: int


def _simulate_slab(cfg, t0, slab_len, seed_seq, p_total, mode_cdf,
                   survival, tau_modes, energies_ev):
    rng = np.random.default_rng(seed_seq)
    edet, spad, beam = cfg.edet, cfg.spad, cfg.beam
    sigma_zlp = beam.zlp_fwhm_ev * FWHM_TO_SIGMA
    p_detect_e = edet.beam_transmission * edet.efficiency
    jitter_sigma = spad.jitter_fwhm * FWHM_TO_SIGMA

    n_e = rng.poisson(beam.rate * slab_len)
    n_phot = rng.poisson(p_total, size=n_e) if p_total > 0 \
        else np.zeros(n_e, dtype=np.int64)
    scatterers = np.nonzero(n_phot > 0)[0]
    n_sc = len(scatterers)

    # scattering electrons: full per-electron treatment
    t_sc = t0 + rng.random(n_sc) * slab_len
    k_sc = n_phot[scatterers]
    total_photons = int(k_sc.sum())
    mode_of = np.searchsorted(mode_cdf, rng.random(total_photons),
                              side="right")
    owner = np.repeat(np.arange(n_sc), k_sc)
    loss_sc = np.bincount(owner, weights=energies_ev[mode_of],
                          minlength=n_sc) if n_sc else np.zeros(0)
    e_meas_sc = loss_sc + rng.normal(0.0, sigma_zlp, size=n_sc)
    det_sc = rng.random(n_sc) < p_detect_e
    if edet.slit_block_ev is not None:
        lo, hi = edet.slit_block_ev
        det_sc &= ~((e_meas_sc >= lo) & (e_meas_sc <= hi))

    surv = rng.random(total_photons) < survival[mode_of]
    t_emit = (np.repeat(t_sc, k_sc)[surv]
              + rng.exponential(tau_modes[mode_of[surv]])
              + cfg.path_delay)
    if jitter_sigma > 0 and len(t_emit):
        t_emit = t_emit + rng.normal(0.0, jitter_sigma, size=len(t_emit))
    photon_det_owner = owner[surv]

    # non-scattering electrons
    n0 = n_e - n_sc
    truth = None
    if cfg.log_truth:
        t_0e = t0 + rng.random(n0) * slab_len
        e_meas_0 = rng.normal(0.0, sigma_zlp, size=n0)
        det_0 = rng.random(n0) < p_detect_e
        if edet.slit_block_ev is not None:
            lo, hi = edet.slit_block_ev
            det_0 &= ~((e_meas_0 >= lo) & (e_meas_0 <= hi))
        e_time = np.concatenate([t_sc[det_sc], t_0e[det_0]])
        e_energy = np.concatenate([e_meas_sc[det_sc], e_meas_0[det_0]])
        # truth rows: scatterers first, then the zero-loss electrons
        pd = np.zeros(n_sc, dtype=bool)
        np.logical_or.at(pd, photon_det_owner, True)
        mode_counts = {}
        for j, mu in zip(owner, mode_of):
            mode_counts[(j, mu)] = mode_counts.get((j, mu), 0) + 1
        trip = sorted(mode_counts.items())
        truth = GroundTruth(
            arrival_time=np.concatenate([t_sc, t_0e]),
            loss_ev=np.concatenate([loss_sc, np.zeros(n0)]),
            n_photons=np.concatenate([k_sc, np.zeros(n0, dtype=np.int64)]),
            photon_detected=np.concatenate([pd, np.zeros(n0, dtype=bool)]),
            electron_detected=np.concatenate([det_sc, det_0]),
            mode_electron_idx=np.array([k[0] for k, _ in trip], dtype=np.int64),
            mode_idx=np.array([k[1] for k, _ in trip], dtype=np.int64),
            mode_count=np.array([v for _, v in trip], dtype=np.int64))
    else:
        # statistically identical shortcut: only detected zero-loss
        # electrons are materialised
        p0 = _slit_pass_probability(sigma_zlp, edet.slit_block_ev) * p_detect_e
        n_det0 = rng.binomial(n0, p0) if p0 > 0 and n0 > 0 else 0
        t_0e = t0 + rng.random(n_det0) * slab_len
        e_meas_0 = _sample_outside_block(n_det0, sigma_zlp,
                                         edet.slit_block_ev, rng)
        e_time = np.concatenate([t_sc[det_sc], t_0e])
        e_energy = np.concatenate([e_meas_sc[det_sc], e_meas_0])

    return _SlabResult(e_time=e_time, e_energy=e_energy, p_time=t_emit,
                       truth=truth, n_electrons=int(n_e),
                       n_photons_emitted=total_photons)


# --------------------------------------------------------------------------
# full run
# --------------------------------------------------------------------------

def simulate_run(cfg):
    """Simulate one acquisition; returns ``(EventStream, GroundTruth)``.

    The ground truth is ``None`` unless ``cfg.log_truth`` is set.  Run
    metadata (seed, rates, warnings) is embedded in the stream header
    as JSON.
    """
    traj = cfg.trajectory()
    result = cfg.model.couplings(cfg.comb, traj)
    p_modes = result.mode_probabilities
    p_total = float(p_modes.sum())
    if p_total >= 0.5:
        raise ConfigError(
            f"total scattering probability {p_total:.3g} >= 0.5: outside "
            "the weak-coupling validity range")
    warnings = []
    if result.clipped:
        warnings.append("beam clips the chip: no coupling, electrons absorbed")
        cfg = replace(cfg, edet=replace(cfg.edet, beam_transmission=0.0))

    modes = list(cfg.comb)
    energies_ev = np.array([m.photon_energy_ev for m in modes])
    eta_bus = np.array([
        bus_coupling_efficiency(m.kappa_0, m.kappa_ex)
        if (m.kappa_0 + m.kappa_ex) > 0 else 0.0 for m in modes])
    if cfg.sensitivity is not None:
        s_curve = np.asarray(cfg.sensitivity(cfg.comb.wavelengths))
    else:
        s_curve = np.ones(len(modes))
    survival = eta_bus * s_curve * cfg.chain.total * cfg.spad.efficiency
    tau_modes = np.array([m.q_factor / m.omega for m in modes])
    mode_cdf = np.cumsum(p_modes) / p_total if p_total > 0 \
        else np.ones(len(modes))

    n_slabs = max(1, math.ceil(cfg.duration / cfg.slab_duration))
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(n_slabs + 1)
    rng_global = np.random.default_rng(children[0])

    # per-pixel ToA offsets: one draw per run unless a map is supplied
    edet = cfg.edet
    if edet.offset_map_ns is not None:
        offsets_ns = np.asarray(edet.offset_map_ns, dtype=float)
    else:
        offsets_ns = rng_global.uniform(-edet.offset_spread_ns,
                                        edet.offset_spread_ns,
                                        size=(edet.ny, edet.nx))

    def run_slab(i):
        t0 = i * cfg.slab_duration
        slab_len = min(cfg.slab_duration, cfg.duration - t0)
        return _simulate_slab(cfg, t0, slab_len, children[i + 1], p_total,
                              mode_cdf, survival, tau_modes, energies_ev)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            slabs = list(pool.map(run_slab, range(n_slabs)))
    else:
        slabs = [run_slab(i) for i in range(n_slabs)]

    e_time = np.concatenate([s.e_time for s in slabs])
    e_energy = np.concatenate([s.e_energy for s in slabs])
    p_time = np.concatenate([s.p_time for s in slabs])
    n_electrons = sum(s.n_electrons for s in slabs)
    n_emitted = sum(s.n_photons_emitted for s in slabs)
    truth = None
    if cfg.log_truth:
        truth = _merge_truth([s.truth for s in slabs])

    # photon stream: merge dark counts, sort, dead time, quantise
    n_dark = rng_global.poisson(cfg.spad.dark_rate * cfg.duration)
    t_dark = rng_global.random(n_dark) * cfg.duration
    p_all = np.sort(np.concatenate([p_time, t_dark]))
    p_all = p_all[p_all >= -T_START]
    p_kept = apply_dead_time(p_all, cfg.spad.dead_time)
    tdc_ticks = np.floor((p_kept + T_START) / cfg.spad.tdc_tick).astype(np.uint64)

    # electron clusters
    order = np.argsort(e_time, kind="stable")
    e_time, e_energy = e_time[order], e_energy[order]
    hit_x, hit_y, hit_t = _make_clusters(cfg, e_time, e_energy, offsets_ns,
                                         rng_global)
    hit_rate = len(hit_t) / cfg.duration
    if hit_rate > edet.saturation_ceiling:
        keep_n = int(edet.saturation_ceiling * cfg.duration)
        idx = np.sort(rng_global.choice(len(hit_t), size=keep_n,
                                        replace=False))
        dropped = 1.0 - keep_n / len(hit_t)
        warnings.append(f"detector saturated: dropped {dropped:.3%} of hits")
        hit_x, hit_y, hit_t = hit_x[idx], hit_y[idx], hit_t[idx]
    horder = np.argsort(hit_t, kind="stable")
    hit_x, hit_y, hit_t = hit_x[horder], hit_y[horder], hit_t[horder]
    hit_ticks = np.floor((hit_t + T_START) / edet.toa_tick).astype(np.uint64)

    meta = {
        "generator": "epcsim",
        "seed": (list(cfg.seed) if isinstance(cfg.seed, (list, tuple))
                 else int(cfg.seed)),
        "duration_s": cfg.duration,
        "electron_rate_hz": cfg.beam.rate,
        "n_electrons": int(n_electrons),
        "n_photons_emitted": int(n_emitted),
        "n_photon_tags": int(len(tdc_ticks)),
        "n_electron_events": int(len(e_time)),
        "scattering_probability": p_total,
        "t_start_offset_s": T_START,
        "path_delay_s": cfg.path_delay,
        "dispersion_ev_per_px": edet.dispersion_ev_per_px,
        "zlp_pixel": edet.zlp_pixel,
        "warnings": warnings,
    }
    stream = EventStream.from_arrays(
        hit_x=hit_x, hit_y=hit_y, hit_toa=hit_ticks,
        tdc_ticks=tdc_ticks,
        tdc_channel=np.zeros(len(tdc_ticks), dtype=np.uint8),
        metadata=json.dumps(meta, sort_keys=True))
    return stream, truth


def _make_clusters(cfg, e_time, e_energy, offsets_ns, rng):
    """Expand detected electrons into pixel-hit clusters."""
    edet = cfg.edet
    n = len(e_time)
    if n == 0:
        z = np.empty(0)
        return (np.empty(0, dtype=np.uint16), np.empty(0, dtype=np.uint16), z)
    k = 1 + rng.poisson(max(edet.mean_hits - 1.0, 0.0), size=n)
    owner = np.repeat(np.arange(n), k)
    total = len(owner)
    base_x = np.round(edet.zlp_pixel
                      + e_energy / edet.dispersion_ev_per_px).astype(np.int64)
    base_y = np.full(n, edet.beam_row, dtype=np.int64)
    s = edet.cluster_spread_px
    dx = rng.integers(-s, s + 1, size=total)
    dy = rng.integers(-s, s + 1, size=total)
    px = np.clip(base_x[owner] + dx, 0, edet.nx - 1).astype(np.uint16)
    py = np.clip(base_y[owner] + dy, 0, edet.ny - 1).astype(np.uint16)
    skew = rng.random(total) * edet.skew_ns * 1e-9
    t = e_time[owner] + offsets_ns[py, px] * 1e-9 + skew
    if edet.toa_jitter_fwhm_ns > 0:
        walk = rng.normal(0.0, edet.toa_jitter_fwhm_ns * FWHM_TO_SIGMA * 1e-9,
                          size=n)
        t = t + walk[owner]
    return px, py, t


def _merge_truth(parts):
    parts = [p for p in parts if p is not None]
    offsets = np.cumsum([0] + [p.n_electrons for p in parts[:-1]])
    return GroundTruth(
        arrival_time=np.concatenate([p.arrival_time for p in parts]),
        loss_ev=np.concatenate([p.loss_ev for p in parts]),
        n_photons=np.concatenate([p.n_photons for p in parts]),
        photon_detected=np.concatenate([p.photon_detected for p in parts]),
        electron_detected=np.concatenate(
            [p.electron_detected for p in parts]),
        mode_electron_idx=np.concatenate(
            [p.mode_electron_idx + off for p, off in zip(parts, offsets)]),
        mode_idx=np.concatenate([p.mode_idx for p in parts]),
        mode_count=np.concatenate([p.mode_count for p in parts]))


# --------------------------------------------------------------------------
# calibration reference runs
# --------------------------------------------------------------------------

def make_calibration_stream(edet, n_pulses, hits_per_pulse, seed,
                            pulse_period=1e-6, roi=None, extra_jitter_ns=0.0):
    """Pulsed-beam reference stream for per-pixel ToA calibration.

    Emits a channel-1 TDC marker per pulse and, for each pulse, hits at
    uniformly random pixels inside ``roi`` (x0, x1, y0, y1) delayed by
    the detector's per-pixel offsets.  Returns ``(stream, offsets_ns)``.
    """
    rng = np.random.default_rng(seed)
    if edet.offset_map_ns is not None:
        offsets_ns = np.asarray(edet.offset_map_ns, dtype=float)
    else:
        offsets_ns = rng.uniform(-edet.offset_spread_ns,
                                 edet.offset_spread_ns,
                                 size=(edet.ny, edet.nx))
    x0, x1, y0, y1 = roi if roi is not None else (0, edet.nx, 0, edet.ny)
    pulse_t = (np.arange(n_pulses) + 1) * pulse_period
    total = n_pulses * hits_per_pulse
    px = rng.integers(x0, x1, size=total).astype(np.uint16)
    py = rng.integers(y0, y1, size=total).astype(np.uint16)
    t = (np.repeat(pulse_t, hits_per_pulse)
         + offsets_ns[py, px] * 1e-9
         + rng.normal(0.0, extra_jitter_ns * 1e-9, size=total))
    order = np.argsort(t, kind="stable")
    px, py, t = px[order], py[order], t[order]
    hit_ticks = np.floor((t + T_START) / edet.toa_tick).astype(np.uint64)
    tdc_ticks = np.floor((pulse_t + T_START) / float(TDC_TICK)).astype(np.uint64)
    stream = EventStream.from_arrays(
        hit_x=px, hit_y=py, hit_toa=hit_ticks,
        tdc_ticks=tdc_ticks,
        tdc_channel=np.ones(len(tdc_ticks), dtype=np.uint8),
        metadata=json.dumps({"generator": "epcsim-calibration",
                             "n_pulses": int(n_pulses)}))
    return stream, offsets_ns
