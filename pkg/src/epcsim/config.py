"""Flat key=value text configuration with arrays and includes.

Syntax::

    # comment
    include base.cfg          # relative to the including file
    beam.energy_ev = 120e3
    beam.current_a = 7.4e-12
    chain.stages = bus:0.17, fiber:0.40, misc:0.1804
    spad.sensitivity_csv = spad_sensitivity.csv

Later assignments override earlier ones (so preset files can include a
base file and override a few keys).  Values are parsed as bool, int,
float, or string; comma-separated values become lists.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class Config:
    """Parsed key/value mapping with provenance for error messages."""

    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)    # key -> (path, line no)
    source: str = "<memory>"

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(
                f"missing required config key in {self.source}", key=key)
        return self.values[key]

    def get_float(self, key, default=None):
        v = self.values.get(key, default)
        if v is None:
            return self.require(key)
        return _as_float(v, key, self.lines.get(key))

    def require_float(self, key):
        return _as_float(self.require(key), key, self.lines.get(key))

    def get_int(self, key, default=None):
        v = self.values.get(key, default)
        if v is None:
            return int(self.require(key))
        return int(_as_float(v, key, self.lines.get(key)))

    def get_bool(self, key, default=False):
        v = self.values.get(key, default)
        if isinstance(v, bool):
            return v
        if isinstance(v, str):
            if v.lower() in ("true", "yes", "1", "on"):
                return True
            if v.lower() in ("false", "no", "0", "off"):
                return False
        raise ConfigError("expected a boolean value", key=key,
                          line=self.lines.get(key, (None, None))[1])

    def get_list(self, key, default=None):
        v = self.values.get(key, default if default is not None else [])
        if isinstance(v, list):
            return v
        return [v]

    def override(self, key, value):
        self.values[key] = value
        self.lines[key] = (self.source, 0)

    def snapshot(self):
        """Plain dict of all values (for manifests)."""
        return {k: self.values[k] for k in sorted(self.values)}


def _as_float(v, key, where):
    try:
        return float(v)
    except (TypeError, ValueError):
        line = where[1] if where else None
        raise ConfigError(f"expected a number, got {v!r}", key=key,
                          line=line) from None


def _parse_scalar(tok):
    t = tok.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        if "." not in t and "e" not in t.lower():
            return int(t)
        return float(t)
    except ValueError:
        return t


def load_config(path, _seen=None):
    """Parse a config file, following ``include`` lines depth-first."""
    path = os.path.abspath(path)
    if _seen is None:
        _seen = set()
    if path in _seen:
        raise ConfigError(f"circular include of {path}")
    _seen.add(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")

    cfg = Config(source=path)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                inc = line[len("include "):].strip()
                inc_path = os.path.join(os.path.dirname(path), inc)
                sub = load_config(inc_path, _seen)
                cfg.values.update(sub.values)
                cfg.lines.update(sub.lines)
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", line=lineno)
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError("empty key", line=lineno)
            value = value.strip()
            if "," in value:
                parsed = [_parse_scalar(t) for t in value.split(",")]
            else:
                parsed = _parse_scalar(value)
            cfg.values[key] = parsed
            cfg.lines[key] = (path, lineno)
    _seen.discard(path)
    return cfg


def load_sensitivity_csv(path):
    """Two-column CSV (wavelength_nm, efficiency) -> SensitivityCurve."""
    from .physics import SensitivityCurve
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ConfigError("expected 'wavelength_nm,efficiency'",
                                  line=lineno)
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                if lineno == 1:
                    continue    # header row
                raise ConfigError(f"bad number in {line!r}",
                                  line=lineno) from None
    if len(rows) < 2:
        raise ConfigError(f"sensitivity CSV {path} needs >= 2 data rows")
    wl = np.array([r[0] for r in rows]) * 1e-9
    v = np.array([r[1] for r in rows])
    return SensitivityCurve(wl, v)


def parse_loss_stages(items):
    """Parse ['bus:0.17', 'fwd:0.6:unbudgeted', ...] into a LossChain."""
    from .physics import LossChain, LossStage
    stages = []
    for item in items:
        parts = str(item).strip().split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad loss stage spec {item!r} "
                              "(want name:transmission[:unbudgeted])")
        name = parts[0]
        try:
            trans = float(parts[1])
        except ValueError:
            raise ConfigError(f"bad transmission in stage {item!r}") from None
        budgeted = not (len(parts) == 3 and parts[2] == "unbudgeted")
        stages.append(LossStage(name, trans, budgeted=budgeted))
    return LossChain(tuple(stages))


def preset_path(name):
    """Path of a bundled preset config (fig2, fig3, fig4, base)."""
    here = os.path.dirname(__file__)
    p = os.path.join(here, "presets", f"{name}.cfg")
    if not os.path.exists(p):
        raise ConfigError(f"no bundled preset named {name!r}")
    return p
