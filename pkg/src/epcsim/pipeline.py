"""Build simulation and analysis objects from a parsed configuration.

This is the glue between flat key=value config files (including the
bundled presets) and the typed objects the physics, Monte Carlo and
imaging modules consume.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .config import Config, load_config, load_sensitivity_csv, \
    parse_loss_stages, preset_path
from .errors import ConfigError
from .montecarlo import BeamSpec, ElectronDetectorSpec, SimConfig, SpadSpec
from .physics import CouplingModel, LossChain, build_comb

ENV_CONFIG = "EPCSIM_CONFIG"


@dataclass(frozen=True)
class AnalysisGates:
    """Gates and declared efficiencies for the metric pipeline."""

    energy_gate: tuple = (0.45, 2.0)
    peak_gate_s: float = 8e-9
    window_s: float = 600e-9
    eta_d_p: float = 0.25
    t_p: float = 1.0
    eta_d_e: float = 0.9
    t_e: float = 1.0


def resolve_config(path=None):
    """Load a config file, falling back to the environment default."""
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path is None:
        raise ConfigError(
            f"no config file given and {ENV_CONFIG} is not set")
    if not os.path.isabs(path) and not os.path.exists(path):
        # convenience: bare preset names resolve to the bundled files
        name = path[:-4] if path.endswith(".cfg") else path
        try:
            return load_config(preset_path(name))
        except ConfigError:
            pass
    return load_config(path)


def build_model(cfg):
    return CouplingModel(
        d_ev=cfg.get_float("model.d_ev", 250e-9),
        ring_radius=cfg.get_float("model.ring_radius", 113.75e-6),
        ring_width=cfg.get_float("model.ring_width", 2.1e-6),
        g_ref=cfg.get_float("model.g_ref", 0.03),
        d_ref=cfg.get_float("model.d_ref", 50e-9),
        n_eff0=cfg.get_float("model.n_eff0", 1.7045327929524472),
        dn_dlambda=cfg.get_float("model.dn_dlambda", -4.25e5),
        lambda0=cfg.get_float("model.lambda0", 1550e-9))


def build_mode_comb(cfg, model):
    return build_comb(
        model,
        fsr=cfg.get_float("comb.fsr", 194e9),
        lambda_min=cfg.get_float("comb.lambda_min", 1.48e-6),
        lambda_max=cfg.get_float("comb.lambda_max", 1.66e-6),
        q_factor=cfg.get_float("comb.q_factor", 5.5e5),
        bus_fraction=cfg.get_float("comb.bus_fraction", 0.17),
        center_wavelength=cfg.get_float("comb.center_wavelength", 1550e-9))


def build_beam(cfg):
    current = cfg.get("beam.current_a")
    rate = cfg.get("beam.rate_hz")
    if current is None and rate is None:
        rate = 2e7
    return BeamSpec(
        energy_ev=cfg.get_float("beam.energy_ev", 120e3),
        zlp_fwhm_ev=cfg.get_float("beam.zlp_fwhm_ev", 0.5),
        d=cfg.get_float("beam.d", 160e-9),
        x=cfg.get_float("beam.x", 0.0),
        current_a=float(current) if current is not None else None,
        rate_hz=float(rate) if rate is not None else None)


def build_chain(cfg):
    stages = cfg.get_list("chain.stages", [])
    if not stages:
        return LossChain(stages=())
    return parse_loss_stages(stages)


def build_spad(cfg):
    return SpadSpec(
        efficiency=cfg.get_float("spad.efficiency", 0.25),
        dead_time=cfg.get_float("spad.dead_time", 50e-6),
        dark_rate=cfg.get_float("spad.dark_rate", 130.0),
        jitter_fwhm=cfg.get_float("spad.jitter_fwhm", 150e-12))


def build_edet(cfg):
    slit = cfg.get("edet.slit_block_ev")
    if slit is not None:
        if not isinstance(slit, list) or len(slit) != 2:
            raise ConfigError("expected 'lo, hi'", key="edet.slit_block_ev")
        slit = (float(slit[0]), float(slit[1]))
    return ElectronDetectorSpec(
        nx=cfg.get_int("edet.nx", 512),
        ny=cfg.get_int("edet.ny", 512),
        dispersion_ev_per_px=cfg.get_float("edet.dispersion_ev_per_px", 0.11),
        zlp_pixel=cfg.get_float("edet.zlp_pixel", 30.0),
        beam_row=cfg.get_int("edet.beam_row", 256),
        mean_hits=cfg.get_float("edet.mean_hits", 4.0),
        cluster_spread_px=cfg.get_int("edet.cluster_spread_px", 1),
        skew_ns=cfg.get_float("edet.skew_ns", 5.2),
        toa_jitter_fwhm_ns=cfg.get_float("edet.toa_jitter_fwhm_ns", 0.0),
        offset_spread_ns=cfg.get_float("edet.offset_spread_ns", 2.0),
        saturation_ceiling=cfg.get_float("edet.saturation_ceiling", 1.2e8),
        slit_block_ev=slit,
        efficiency=cfg.get_float("edet.efficiency", 0.9),
        beam_transmission=cfg.get_float("edet.beam_transmission", 1.0))


def build_sensitivity(cfg):
    path = cfg.get("spad.sensitivity_csv")
    if path is None:
        return None
    if not os.path.isabs(path):
        path = os.path.join(os.path.dirname(cfg.source), str(path))
    return load_sensitivity_csv(path)


def build_sim_config(cfg, seed=None, duration=None, threads=1,
                     log_truth=False):
    """Assemble a complete SimConfig from a parsed config."""
    model = build_model(cfg)
    return SimConfig(
        beam=build_beam(cfg),
        model=model,
        comb=build_mode_comb(cfg, model),
        chain=build_chain(cfg),
        spad=build_spad(cfg),
        edet=build_edet(cfg),
        duration=duration if duration is not None
        else cfg.get_float("run.duration", 3.0),
        seed=seed if seed is not None else cfg.get_int("run.seed", 0),
        sensitivity=build_sensitivity(cfg),
        path_delay=cfg.get_float("run.path_delay", 50e-9),
        log_truth=log_truth,
        slab_duration=cfg.get_float("run.slab_duration", 0.05),
        threads=threads)


def build_gates(cfg, sim=None):
    """Analysis gates; declared efficiencies derive from the hardware.

    The declared photon transmission is the budgeted loss-chain total
    times the bus out-coupling fraction; unbudgeted stages and the
    electron-side beam transmission are deliberately absent (they model
    losses the rate analysis does not account for).
    """
    gate = cfg.get_list("analysis.energy_gate", [0.45, 2.0])
    if len(gate) != 2:
        raise ConfigError("expected 'lo, hi'", key="analysis.energy_gate")
    chain = sim.chain if sim is not None else build_chain(cfg)
    spad = sim.spad if sim is not None else build_spad(cfg)
    edet = sim.edet if sim is not None else build_edet(cfg)
    bus = cfg.get_float("comb.bus_fraction", 0.17)
    return AnalysisGates(
        energy_gate=(float(gate[0]), float(gate[1])),
        peak_gate_s=cfg.get_float("analysis.peak_gate_ns", 8.0) * 1e-9,
        window_s=cfg.get_float("analysis.window_ns", 600.0) * 1e-9,
        eta_d_p=spad.efficiency,
        t_p=bus * chain.budgeted_total,
        eta_d_e=edet.efficiency,
        t_e=cfg.get_float("analysis.declared_t_e", 1.0))
