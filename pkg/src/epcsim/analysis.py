"""Event-stream analysis: clustering, coincidence histograms, metrics.

Reconstructs electrons from pixel-hit clusters, tags each electron with
its relative timing to the nearest photon TDC tag, accumulates the 2-D
(relative time, energy loss) histogram, and derives CAR, Klyshko and
intrinsic heralding efficiencies and the coincidence-peak width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ContractError, DomainError, EstimationError,
                     PeakDetectionError)
from .event_io import EventStream, TDC_TICK

DT_BIN_S = float(TDC_TICK)           # ~260 ps histogram time bin
ENERGY_BIN_EV = 0.11                 # spectral pixel size
DEFAULT_WINDOW_S = 600e-9
CLUSTER_MAX_PX = 5.0
CLUSTER_MAX_NS = 125.0

__all__ = [
    "ElectronEvent", "CoincidenceHistogram", "HeraldingReport",
    "cluster_hits", "correlate", "background_estimate", "car", "klyshko",
    "intrinsic_heralding", "peak_fwhm", "calibrate_pixel_offsets",
    "correct_slow_drift", "heralding_report", "merge_histograms",
]


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass
class ElectronEvent:
    """Localised electron: centroid, energy, earliest corrected time."""

    time_s: float
    energy_ev: float
    x: float
    y: float
    n_hits: int


@dataclass
class ElectronEvents:
    """Column-wise electron event table (preferred over per-row objects)."""

    time_s: np.ndarray
    energy_ev: np.ndarray
    x: np.ndarray
    y: np.ndarray
    n_hits: np.ndarray

    def __len__(self):
        return len(self.time_s)

    def __getitem__(self, i):
        return ElectronEvent(float(self.time_s[i]), float(self.energy_ev[i]),
                             float(self.x[i]), float(self.y[i]),
                             int(self.n_hits[i]))

    def sorted_by_time(self):
        order = np.argsort(self.time_s, kind="stable")
        return ElectronEvents(self.time_s[order], self.energy_ev[order],
                              self.x[order], self.y[order],
                              self.n_hits[order])


@dataclass
class CoincidenceHistogram:
    """2-D counts over (relative time, electron energy loss)."""

    counts: np.ndarray          # shape (n_time_bins, n_energy_bins)
    time_edges_s: np.ndarray    # len n_time_bins + 1
    energy_edges_ev: np.ndarray
    duration_s: float
    n_electrons: int            # electrons examined
    n_in_window: int            # electrons with |dt| <= window
    n_photons: int
    window_s: float

    @property
    def rate_e(self):
        return self.n_electrons / self.duration_s

    @property
    def rate_p(self):
        return self.n_photons / self.duration_s

    @property
    def time_centers_s(self):
        return 0.5 * (self.time_edges_s[:-1] + self.time_edges_s[1:])

    @property
    def energy_centers_ev(self):
        return 0.5 * (self.energy_edges_ev[:-1] + self.energy_edges_ev[1:])

    def gate_counts(self, t_lo, t_hi, e_lo, e_hi):
        """Total counts with dt in [t_lo, t_hi) and energy in [e_lo, e_hi)."""
        it = slice(np.searchsorted(self.time_edges_s, t_lo, side="left"),
                   np.searchsorted(self.time_edges_s, t_hi, side="left"))
        ie = slice(np.searchsorted(self.energy_edges_ev, e_lo, side="left"),
                   np.searchsorted(self.energy_edges_ev, e_hi, side="left"))
        return int(self.counts[it, ie].sum())


@dataclass
class HeraldingReport:
    """Coincidence metrics with simple Poisson uncertainties."""

    rate_e: float
    rate_p: float
    rate_pe: float
    rate_acc: float
    car: float
    car_err: float
    car_infinite: bool
    true_fraction: float
    eta_k_p: float
    eta_k_p_err: float
    eta_k_e: float
    eta_k_e_err: float
    eta_i_p: float | None = None
    eta_i_e: float | None = None
    eta_i_flags: list = field(default_factory=list)
    peak_fwhm_s: float | None = None
    no_peak: bool = False

    def to_dict(self):
        return {
            "rate_e_hz": self.rate_e,
            "rate_p_hz": self.rate_p,
            "rate_pe_hz": self.rate_pe,
            "rate_acc_hz": self.rate_acc,
            "car": None if self.car_infinite else self.car,
            "car_err": self.car_err,
            "car_infinite": self.car_infinite,
            "true_coincidence_fraction": self.true_fraction,
            "klyshko_photon": self.eta_k_p,
            "klyshko_photon_err": self.eta_k_p_err,
            "klyshko_electron": self.eta_k_e,
            "klyshko_electron_err": self.eta_k_e_err,
            "intrinsic_photon": self.eta_i_p,
            "intrinsic_electron": self.eta_i_e,
            "intrinsic_flags": self.eta_i_flags,
            "peak_fwhm_s": self.peak_fwhm_s,
            "no_peak": self.no_peak,
        }


# --------------------------------------------------------------------------
# clustering and localisation
# --------------------------------------------------------------------------

def cluster_hits(hit_x, hit_y, hit_t_s, max_px=CLUSTER_MAX_PX,
                 max_ns=CLUSTER_MAX_NS, offsets_ns=None,
                 dispersion_ev_per_px=0.11, zlp_pixel=30.0):
    """Group pixel hits into electron events.

    Hits join the same cluster when connected through neighbours within
    ``max_px`` pixels and ``max_ns`` nanoseconds (greedy connected
    components, so simultaneous distant electrons stay separate).
    Localisation: arithmetic mean position, earliest (offset-corrected)
    arrival time.  ``offsets_ns`` is an optional per-pixel ToA
    correction map to subtract.
    """
    x = np.asarray(hit_x, dtype=np.float64)
    y = np.asarray(hit_y, dtype=np.float64)
    t = np.asarray(hit_t_s, dtype=np.float64)
    if offsets_ns is not None:
        off = np.asarray(offsets_ns, dtype=float)
        t = t - off[np.asarray(hit_y, dtype=np.intp),
                    np.asarray(hit_x, dtype=np.intp)] * 1e-9
    order = np.argsort(t, kind="stable")
    x, y, t = x[order], y[order], t[order]
    n = len(t)
    if n == 0:
        e = np.empty(0)
        return ElectronEvents(e, e.copy(), e.copy(), e.copy(),
                              np.empty(0, dtype=np.int64))

    max_s = max_ns * 1e-9
    # segments separated by a time gap > max_ns can never link
    breaks = np.nonzero(np.diff(t) > max_s)[0] + 1
    seg_starts = np.concatenate(([0], breaks))
    seg_sizes = np.diff(np.concatenate((seg_starts, [n])))
    n_seg = len(seg_starts)
    seg_id = np.repeat(np.arange(n_seg), seg_sizes)

    # fast path: a segment whose total x, y and t spans all fit inside
    # the linking thresholds is necessarily a single cluster
    x_span = (np.maximum.reduceat(x, seg_starts)
              - np.minimum.reduceat(x, seg_starts))
    y_span = (np.maximum.reduceat(y, seg_starts)
              - np.minimum.reduceat(y, seg_starts))
    t_span = (np.maximum.reduceat(t, seg_starts)
              - np.minimum.reduceat(t, seg_starts))
    simple = (x_span <= max_px) & (y_span <= max_px) & (t_span <= max_s)

    sub_labels = np.zeros(n, dtype=np.int64)
    seg_n_clusters = np.ones(n_seg, dtype=np.int64)
    for k in np.nonzero(~simple)[0]:
        s0 = seg_starts[k]
        s1 = s0 + seg_sizes[k]
        m = s1 - s0
        # connected components within the segment (segments are small)
        xs, ys, ts = x[s0:s1], y[s0:s1], t[s0:s1]
        parent = np.arange(m)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(m):
            for j in range(i + 1, m):
                if ts[j] - ts[i] > max_s:
                    break
                if (abs(xs[i] - xs[j]) <= max_px
                        and abs(ys[i] - ys[j]) <= max_px):
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[rj] = ri
        roots = np.array([find(i) for i in range(m)])
        _, seg_labels = np.unique(roots, return_inverse=True)
        sub_labels[s0:s1] = seg_labels
        seg_n_clusters[k] = seg_labels.max() + 1
    seg_offsets = np.concatenate(([0], np.cumsum(seg_n_clusters[:-1])))
    labels = seg_offsets[seg_id] + sub_labels
    next_label = int(seg_n_clusters.sum())

    counts = np.bincount(labels)
    cx = np.bincount(labels, weights=x) / counts
    cy = np.bincount(labels, weights=y) / counts
    ct = np.full(next_label, np.inf)
    np.minimum.at(ct, labels, t)
    energy = (cx - zlp_pixel) * dispersion_ev_per_px
    ev = ElectronEvents(time_s=ct, energy_ev=energy, x=cx, y=cy,
                        n_hits=counts.astype(np.int64))
    return ev.sorted_by_time()


def events_from_stream(stream, offsets_ns=None, dispersion_ev_per_px=0.11,
                       zlp_pixel=30.0, max_px=CLUSTER_MAX_PX,
                       max_ns=CLUSTER_MAX_NS):
    """Cluster the pixel hits of a decoded stream into electron events."""
    return cluster_hits(stream.hit_x, stream.hit_y, stream.hit_times_s,
                        max_px=max_px, max_ns=max_ns, offsets_ns=offsets_ns,
                        dispersion_ev_per_px=dispersion_ev_per_px,
                        zlp_pixel=zlp_pixel)


# --------------------------------------------------------------------------
# correlation
# --------------------------------------------------------------------------

def correlate(electron_times, electron_energies, photon_times, duration,
              window=DEFAULT_WINDOW_S, delay=0.0,
              dt_bin=DT_BIN_S, energy_bin=ENERGY_BIN_EV,
              energy_range=(-2.0, 4.0)):
    """Coincidence histogram of electrons vs their nearest photon tag.

    Each electron is tagged with ``dt = t_e - (t_p - delay)`` to the
    closest photon; electrons with ``|dt| <= window`` enter the 2-D
    (dt, energy) histogram.  On exact ties the earlier photon wins.
    Both input time arrays must be sorted.
    """
    t_e = np.asarray(electron_times, dtype=float)
    e_e = np.asarray(electron_energies, dtype=float)
    t_p = np.asarray(photon_times, dtype=float)
    if np.any(np.diff(t_e) < 0) or np.any(np.diff(t_p) < 0):
        raise ContractError("electron and photon times must be sorted")
    if duration <= 0:
        raise DomainError("duration must be positive")

    n_t = int(math.ceil(window / dt_bin))
    time_edges = (np.arange(-n_t, n_t + 1)) * dt_bin
    e_lo, e_hi = energy_range
    n_e_bins = int(math.ceil((e_hi - e_lo) / energy_bin))
    energy_edges = e_lo + np.arange(n_e_bins + 1) * energy_bin

    counts = np.zeros((2 * n_t, n_e_bins), dtype=np.int64)
    n_in_window = 0
    if len(t_p) and len(t_e):
        t_p_eff = t_p - delay
        if len(t_p_eff) == 1 or np.min(np.diff(t_p_eff)) > 2 * window:
            # photon windows are disjoint: gather electrons per window
            # (cheap when photons are sparse relative to electrons)
            lo = np.searchsorted(t_e, t_p_eff - window, side="left")
            hi = np.searchsorted(t_e, t_p_eff + window, side="right")
            k = hi - lo
            owner = np.repeat(np.arange(len(t_p_eff)), k)
            pos = np.arange(len(owner)) - np.repeat(
                np.cumsum(k) - k, k) + lo[owner]
            dt = t_e[pos] - t_p_eff[owner]
            energy = e_e[pos]
        else:
            # overlapping windows: nearest photon per electron
            idx = np.searchsorted(t_p_eff, t_e)
            left = np.clip(idx - 1, 0, len(t_p_eff) - 1)
            right = np.clip(idx, 0, len(t_p_eff) - 1)
            d_left = t_e - t_p_eff[left]
            d_right = t_e - t_p_eff[right]
            pick_left = np.abs(d_left) <= np.abs(d_right)  # tie: earlier
            dt = np.where(pick_left, d_left, d_right)
            in_win = np.abs(dt) <= window
            dt = dt[in_win]
            energy = e_e[in_win]
        keep = np.abs(dt) <= window
        dt, energy = dt[keep], energy[keep]
        n_in_window = len(dt)
        it = np.searchsorted(time_edges, dt, side="right") - 1
        ie = np.searchsorted(energy_edges, energy, side="right") - 1
        ok = (it >= 0) & (it < 2 * n_t) & (ie >= 0) & (ie < n_e_bins)
        np.add.at(counts, (it[ok], ie[ok]), 1)

    return CoincidenceHistogram(
        counts=counts, time_edges_s=time_edges, energy_edges_ev=energy_edges,
        duration_s=duration, n_electrons=len(t_e), n_in_window=n_in_window,
        n_photons=len(t_p), window_s=window)


def merge_histograms(parts):
    """Merge partition histograms (associative, order-independent bins)."""
    if not parts:
        raise DomainError("nothing to merge")
    first = parts[0]
    counts = np.zeros_like(first.counts)
    n_e = n_w = n_p = 0
    for h in parts:
        if (not np.array_equal(h.time_edges_s, first.time_edges_s)
                or not np.array_equal(h.energy_edges_ev,
                                      first.energy_edges_ev)):
            raise DomainError("histogram partitions have different binning")
        counts += h.counts
        n_e += h.n_electrons
        n_w += h.n_in_window
        n_p += h.n_photons
    return CoincidenceHistogram(
        counts=counts, time_edges_s=first.time_edges_s,
        energy_edges_ev=first.energy_edges_ev,
        duration_s=sum(h.duration_s for h in parts),
        n_electrons=n_e, n_in_window=n_w, n_photons=n_p,
        window_s=first.window_s)


# --------------------------------------------------------------------------
# background and metrics
# --------------------------------------------------------------------------

def background_estimate(hist, sidebands=((200e-9, 600e-9),)):
    """Accidental level per energy bin and the true-coincidence map.

    ``sidebands`` are |dt| ranges (two-sided) that must exclude the
    coincidence peak.  Returns ``(accidental_per_bin, fraction_map)``:
    the mean sideband counts per (dt, energy) bin for each energy
    column, and the per-bin fraction of true coincidences
    ``1 - 1/CAR`` (NaN where a bin is empty).
    """
    centers = hist.time_centers_s
    mask = np.zeros(len(centers), dtype=bool)
    for lo, hi in sidebands:
        mask |= (np.abs(centers) >= lo) & (np.abs(centers) <= hi)
    if not np.any(mask):
        raise EstimationError("sidebands select no histogram bins")
    acc_per_bin = hist.counts[mask].mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = 1.0 - acc_per_bin[None, :] / hist.counts
    frac[hist.counts == 0] = np.nan
    return acc_per_bin, frac


def car(rate_pe, rate_acc):
    """Coincidence-to-accidental ratio (R_pe - R_acc) / R_acc.

    Returns ``(value, infinite_flag)``; with no accidentals the ratio is
    reported as infinity with the flag set.
    """
    if rate_pe < 0 or rate_acc < 0:
        raise DomainError("rates must be non-negative")
    if rate_acc == 0:
        return math.inf, True
    return (rate_pe - rate_acc) / rate_acc, False


def klyshko(rate_pe, rate_e, rate_p):
    """Klyshko heralding efficiencies (eta_K^p, eta_K^e).

    eta_K^p = R_pe / R_e (probability a detected electron heralds a
    detected photon); eta_K^e = R_pe / R_p.
    """
    if rate_e <= 0 or rate_p <= 0:
        raise DomainError("electron and photon rates must be positive")
    return rate_pe / rate_e, rate_pe / rate_p


def intrinsic_heralding(eta_k, eta_d, transmission):
    """Intrinsic heralding efficiency eta_K / (eta_D * T).

    Values above one are clamped and flagged as inconsistent.
    Returns ``(value, flags)``.
    """
    denom = eta_d * transmission
    if denom <= 0:
        raise DomainError("eta_D * T must be positive")
    value = eta_k / denom
    flags = []
    if value > 1.0:
        flags.append("intrinsic efficiency > 1: inconsistent inputs, clamped")
        value = 1.0
    return value, flags


def peak_fwhm(hist, energy_gate, sidebands=((200e-9, 600e-9),),
              min_significance=5.0, rebin=4):
    """FWHM (s) of the background-subtracted coincidence time profile.

    The time profile is the energy-gated histogram summed over the gate
    and rebinned by ``rebin``, minus the sideband accidental level; the
    width is interpolated linearly between the half-maximum crossings.
    Raises PeakDetectionError unless the peak exceeds
    ``min_significance`` standard deviations of the background.
    """
    e_lo, e_hi = energy_gate
    ie = slice(np.searchsorted(hist.energy_edges_ev, e_lo, side="left"),
               np.searchsorted(hist.energy_edges_ev, e_hi, side="left"))
    profile = hist.counts[:, ie].sum(axis=1).astype(float)
    centers = hist.time_centers_s
    if rebin > 1:
        n = (len(profile) // rebin) * rebin
        profile = profile[:n].reshape(-1, rebin).sum(axis=1)
        centers = centers[:n].reshape(-1, rebin).mean(axis=1)
    mask = np.zeros(len(centers), dtype=bool)
    for lo, hi in sidebands:
        mask |= (np.abs(centers) >= lo) & (np.abs(centers) <= hi)
    if not np.any(mask):
        raise EstimationError("sidebands select no histogram bins")
    bg = profile[mask].mean()
    bg_sigma = max(math.sqrt(bg), 1.0)
    profile = profile - bg
    peak = profile.max()
    if peak < min_significance * bg_sigma:
        raise PeakDetectionError(
            f"peak {peak:.1f} below {min_significance} sigma of background "
            f"({bg_sigma:.1f})")
    return _profile_fwhm(centers, profile)


def _profile_fwhm(x, y):
    i_pk = int(np.argmax(y))
    half = y[i_pk] / 2.0
    left = right = None
    for i in range(i_pk, 0, -1):
        if y[i - 1] < half <= y[i]:
            f = (half - y[i - 1]) / (y[i] - y[i - 1])
            left = x[i - 1] + f * (x[i] - x[i - 1])
            break
    for i in range(i_pk, len(y) - 1):
        if y[i + 1] < half <= y[i]:
            f = (y[i] - half) / (y[i] - y[i + 1])
            right = x[i] + f * (x[i + 1] - x[i])
            break
    if left is None or right is None:
        raise PeakDetectionError("could not bracket the half-maximum")
    return float(right - left)


def fit_exponential_tail(hist, energy_gate, t_min=2.0e-9, t_max=6.0e-9,
                         side="auto", sidebands=((200e-9, 600e-9),)):
    """Decay constant (s) of the coincidence-profile tail.

    Subtracts the flat accidental level (estimated from the sidebands),
    then fits ``log(counts)`` vs bin center over ``|dt|`` in
    [t_min, t_max] on the decaying side of the peak (weighted least
    squares, Poisson weights).  The lower cut must exceed the
    timing-quantisation kernel so the tail is purely exponential.
    ``side`` is "pos", "neg" or "auto" (pick the heavier side).
    """
    from .errors import FitError
    e_lo, e_hi = energy_gate
    ie = slice(np.searchsorted(hist.energy_edges_ev, e_lo, side="left"),
               np.searchsorted(hist.energy_edges_ev, e_hi, side="left"))
    profile = hist.counts[:, ie].sum(axis=1).astype(float)
    centers = hist.time_centers_s
    mask = np.zeros(len(centers), dtype=bool)
    for lo, hi in sidebands:
        mask |= (np.abs(centers) >= lo) & (np.abs(centers) <= hi)
    bg = profile[mask].mean() if np.any(mask) else 0.0
    profile = profile - bg
    if side == "auto":
        side = "pos" if profile[centers > 0].sum() >= \
            profile[centers < 0].sum() else "neg"
    tau_sign = 1.0 if side == "pos" else -1.0
    t = tau_sign * centers
    sel = (t >= t_min) & (t <= t_max) & (profile > 3.0 * math.sqrt(bg + 1.0))
    if np.count_nonzero(sel) < 3:
        raise FitError("too few populated tail bins for a decay fit")
    x = t[sel]
    y = np.log(profile[sel])
    w = profile[sel]                       # ~1/var(log n) for Poisson n
    wx = np.average(x, weights=w)
    wy = np.average(y, weights=w)
    slope = (np.sum(w * (x - wx) * (y - wy))
             / np.sum(w * (x - wx) ** 2))
    if slope >= 0:
        raise FitError("tail does not decay", residuals=y - wy)
    return -1.0 / slope


def heralding_report(hist, peak_gate_s=8e-9, energy_gate=(0.45, 2.0),
                     sidebands=((200e-9, 600e-9),), eta_d_p=None, t_p=None,
                     eta_d_e=None, t_e=None):
    """Full metric set from a coincidence histogram.

    ``peak_gate_s`` is the half-width of the coincidence time gate;
    accidentals inside the gate are estimated from the sidebands.
    Supplying the photon/electron detector efficiencies and declared
    transmissions adds the intrinsic heralding efficiencies.
    """
    e_lo, e_hi = energy_gate
    n_pe = hist.gate_counts(-peak_gate_s, peak_gate_s, e_lo, e_hi)

    centers = hist.time_centers_s
    mask = np.zeros(len(centers), dtype=bool)
    for lo, hi in sidebands:
        mask |= (np.abs(centers) >= lo) & (np.abs(centers) <= hi)
    if not np.any(mask):
        raise EstimationError("sidebands select no histogram bins")
    ie = slice(np.searchsorted(hist.energy_edges_ev, e_lo, side="left"),
               np.searchsorted(hist.energy_edges_ev, e_hi, side="left"))
    side_counts = hist.counts[:, ie].sum(axis=1)[mask]
    gate_bins = int(round(2 * peak_gate_s / DT_BIN_S))
    n_acc = side_counts.mean() * gate_bins
    acc_err = (math.sqrt(side_counts.sum()) / len(side_counts)) * gate_bins

    duration = hist.duration_s
    r_pe = n_pe / duration
    r_acc = n_acc / duration
    car_value, car_inf = car(r_pe, r_acc)
    if car_inf:
        car_err = math.inf
        frac = 1.0 if n_pe > 0 else 0.0
    else:
        rel = math.sqrt(max(n_pe, 1)) / max(n_pe - n_acc, 1e-300)
        rel_acc = acc_err / max(n_acc, 1e-300)
        car_err = abs(car_value) * math.hypot(rel, rel_acc)
        frac = 1.0 - 1.0 / car_value if car_value > 0 else 0.0

    eta_k_p, eta_k_e = klyshko(r_pe, hist.rate_e, hist.rate_p)
    n_e_total = max(hist.n_electrons, 1)
    n_p_total = max(hist.n_photons, 1)
    eta_k_p_err = eta_k_p * math.sqrt(1.0 / max(n_pe, 1) + 1.0 / n_e_total)
    eta_k_e_err = eta_k_e * math.sqrt(1.0 / max(n_pe, 1) + 1.0 / n_p_total)

    eta_i_p = eta_i_e = None
    flags = []
    if eta_d_p is not None and t_p is not None:
        eta_i_p, f = intrinsic_heralding(eta_k_p, eta_d_p, t_p)
        flags += [f"photon: {m}" for m in f]
    if eta_d_e is not None and t_e is not None:
        eta_i_e, f = intrinsic_heralding(eta_k_e, eta_d_e, t_e)
        flags += [f"electron: {m}" for m in f]

    fwhm = None
    no_peak = False
    try:
        fwhm = peak_fwhm(hist, energy_gate, sidebands=sidebands)
    except (PeakDetectionError, EstimationError):
        no_peak = True

    return HeraldingReport(
        rate_e=hist.rate_e, rate_p=hist.rate_p, rate_pe=r_pe, rate_acc=r_acc,
        car=car_value, car_err=car_err, car_infinite=car_inf,
        true_fraction=frac,
        eta_k_p=eta_k_p, eta_k_p_err=eta_k_p_err,
        eta_k_e=eta_k_e, eta_k_e_err=eta_k_e_err,
        eta_i_p=eta_i_p, eta_i_e=eta_i_e, eta_i_flags=flags,
        peak_fwhm_s=fwhm, no_peak=no_peak)


# --------------------------------------------------------------------------
# calibration and drift correction
# --------------------------------------------------------------------------

def calibrate_pixel_offsets(stream, nx=512, ny=512, min_hits=50,
                            pulse_channel=1):
    """Per-pixel mean ToA offset from a pulsed-beam reference stream.

    Each hit is referenced to the nearest channel-``pulse_channel`` TDC
    marker; per-pixel means are taken and the global mean subtracted.
    Pixels with fewer than ``min_hits`` hits are flagged and set to 0.
    Returns ``(offset_map_ns, flagged_mask, hit_counts)``.
    """
    pulses = stream.tdc_times_s[stream.tdc_channel == pulse_channel]
    if len(pulses) == 0:
        raise EstimationError("reference stream contains no pulse markers")
    t = stream.hit_times_s
    idx = np.clip(np.searchsorted(pulses, t), 1, len(pulses) - 1)
    nearer_left = np.abs(t - pulses[idx - 1]) <= np.abs(t - pulses[idx])
    ref = np.where(nearer_left, pulses[idx - 1], pulses[idx])
    dt_ns = (t - ref) * 1e9

    flat = stream.hit_y.astype(np.intp) * nx + stream.hit_x.astype(np.intp)
    counts = np.bincount(flat, minlength=nx * ny)
    sums = np.bincount(flat, weights=dt_ns, minlength=nx * ny)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    flagged = counts < min_hits
    good = ~flagged & (counts > 0)
    if not np.any(good):
        raise EstimationError("no pixel reaches the minimum hit statistics")
    global_mean = means[good].mean()
    offsets = np.where(good, means - global_mean, 0.0)
    return (offsets.reshape(ny, nx), flagged.reshape(ny, nx),
            counts.reshape(ny, nx))


def correct_slow_drift(events, bin_s=100e-6, reference_energy_ev=0.0):
    """Re-centre the energy axis against slow (e.g. mains-locked) drift.

    The uncorrelated electron background is averaged in coarse time bins
    and the deviation of its mean energy from ``reference_energy_ev`` is
    subtracted bin by bin.  Returns a new ElectronEvents table.
    """
    if len(events) == 0:
        return events
    t0 = events.time_s.min()
    bins = ((events.time_s - t0) / bin_s).astype(np.int64)
    n_bins = int(bins.max()) + 1
    counts = np.bincount(bins, minlength=n_bins)
    sums = np.bincount(bins, weights=events.energy_ev, minlength=n_bins)
    shift = np.where(counts > 0, sums / np.maximum(counts, 1)
                     - reference_energy_ev, 0.0)
    return ElectronEvents(
        time_s=events.time_s, energy_ev=events.energy_ev - shift[bins],
        x=events.x, y=events.y, n_hits=events.n_hits)
