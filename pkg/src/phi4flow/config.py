"""Run configuration: INI files validated against a typed schema.

A config has a ``[run]`` section, a ``[grid]`` section and one section per
experiment it drives.  Unknown sections or keys are rejected, every value is
type-checked, and defaults are filled in so the resolved config (echoed into
the manifest) is complete.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from pathlib import Path

SCHEMA_VERSION = "1"

EXPERIMENTS = ("calibrate", "contraction", "spectral_gap", "verify", "be_check", "coming_down")

# (type, default); a default of REQUIRED means the key must be given
REQUIRED = object()

SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "schema_version": ("str", SCHEMA_VERSION),
        "base_seed": ("int", 0),
        "batch": ("int", 16),
    },
    "grid": {
        "N": ("int", 16),
        "L": ("float", 1.0),
    },
    "calibrate": {
        "m": ("float", 1.0),
        "alpha": ("float", 0.3),
        "replicas": ("int", 1000),
        "dt": ("float", 0.01),
        "step": ("float", 0.05),
    },
    "contraction": {
        "m_list": ("floats", REQUIRED),
        "t_grid": ("floats", [0.1, 0.2, 0.3, 0.4]),
        "p": ("float", 2.0),
        "replicas": ("int", 16),
        "dt": ("float", 1e-3),
        "budget": ("int", 30),
        "coupling": ("float", 1.0),
        "potential_free": ("bool", False),
        "smoothing": ("bool", True),
        "short_m": ("float", 1.0),
        "kappa": ("float", 0.5),
        "alpha": ("float", 0.05),
        "short_t_grid": ("floats", [1e-4, 3e-4, 1e-3, 3e-3]),
        "short_dt": ("float", 1e-5),
        "short_replicas": ("int", 16),
    },
    "spectral_gap": {
        "m_list": ("floats", [5.0, 10.0, 20.0]),
        "m_star": ("str", REQUIRED),
        "kappa": ("float", 0.5),
        "burn_in": ("float", 1.0),
        "run_length": ("float", 10.0),
        "replicas": ("int", 16),
        "dt": ("float", 2.5e-3),
        "thin": ("int", 4),
        "batches": ("int", 10),
        "z_max": ("float", 4.0),
        "gaussian": ("bool", False),
        "functionals": ("strs", ["linear", "quadratic", "tanh"]),
    },
    "be_check": {
        "m": ("float", 10.0),
        "t": ("float", 0.25),
        "replicas": ("int", 1000),
        "outer": ("int", 32),
        "inner": ("int", 8),
        "dt": ("float", 2.5e-3),
        "uniform": ("int", 8),
        "refine": ("int", 3),
        "gaussian": ("bool", False),
        "functionals": ("strs", ["quadratic"]),
    },
    "coming_down": {
        "magnitudes": ("floats", [1.0, 10.0, 100.0]),
        "p": ("float", 4.0),
        "T": ("float", 1.0),
        "dt": ("float", 1e-3),
        "replicas": ("int", 32),
        "m": ("float", 1.0),
        "noise": ("bool", True),
        "probs": ("floats", [0.1, 0.5, 0.9]),
        "max_ratio": ("float", 2.0),
        "fine_until": ("float", 0.02),
        "refine": ("int", 32),
    },
    "verify": {
        "m": ("float", 1.0),
        "dt": ("float", 2e-3),
        "wick_replicas": ("int", 2000),
        "wick_t": ("float", 0.5),
        "wick_constant_scale": ("float", 1.0),
        "alpha": ("float", 0.3),
        "eta": ("str", "calibrate"),
        "theta": ("float", 0.5),
        "eps": ("float", 0.1),
        "calibration_replicas": ("int", 400),
        "energy_replicas": ("int", 8),
        "energy_T": ("float", 0.5),
        "fd_T": ("float", 0.25),
        "fd_eps": ("floats", [1e-3, 1e-4]),
        "tail_replicas": ("int", 200),
        "tail_times": ("floats", [1.0, 2.0]),
        "be_replicas": ("int", 400),
        "be_outer": ("int", 16),
        "be_inner": ("int", 4),
        "be_t": ("float", 0.1),
    },
}

FUNCTIONAL_NAMES = ("linear", "quadratic", "tanh")
MIN_CALIBRATION = 400


class ConfigError(ValueError):
    pass


def _parse(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if math.isnan(v):
                raise ValueError("nan")
            return v
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return [float(x) for x in raw.replace(",", " ").split()]
        if kind == "strs":
            return [x for x in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def _check(cfg: dict) -> None:
    """Semantic checks beyond types."""
    g = cfg["grid"]
    if g["N"] < 8 or g["N"] % 2:
        raise ConfigError("grid.N must be an even integer >= 8")
    if not g["L"] > 0:
        raise ConfigError("grid.L must be positive")
    if cfg["run"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['run']['schema_version']!r}")
    if cfg["run"]["batch"] < 1:
        raise ConfigError("run.batch must be positive")
    if cfg["run"]["base_seed"] < 0 or cfg["run"]["base_seed"] >= 2**64:
        raise ConfigError("run.base_seed must be an unsigned 64-bit integer")
    for name in EXPERIMENTS:
        sec = cfg.get(name)
        if sec is None:
            continue
        for k, v in sec.items():
            if k in ("replicas", "outer", "inner", "budget") or k.endswith("_replicas"):
                if v < 1:
                    raise ConfigError(f"{name}.{k} must be positive")
            if k in ("dt", "short_dt") and not v > 0:
                raise ConfigError(f"{name}.{k} must be positive")
        for key in ("functionals",):
            for f in sec.get(key, []):
                if f not in FUNCTIONAL_NAMES:
                    raise ConfigError(f"{name}.functionals: unknown functional {f!r}")
        for k in ("replicas", "calibration_replicas"):
            if name in ("calibrate", "verify") and k in sec and sec[k] < MIN_CALIBRATION:
                raise ConfigError(f"{name}.{k} must be at least {MIN_CALIBRATION} "
                                  "for the barrier test to have power")
        if "m_list" in sec and not sec["m_list"]:
            raise ConfigError(f"{name}.m_list must not be empty")


def parse_config(text: str, source: str = "<string>") -> dict:
    """Parse and validate INI text; returns the resolved config dict."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg: dict = {}
    for name, keys in SCHEMA.items():
        if name not in cp and name in EXPERIMENTS:
            continue
        given = cp[name] if name in cp else {}
        extra = [k for k in given if k not in keys]
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(extra)}")
        sec = {}
        for k, (kind, default) in keys.items():
            if k in given:
                sec[k] = _parse(kind, given[k], f"{name}.{k}")
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {name}.{k}")
            else:
                sec[k] = list(default) if isinstance(default, list) else default
        cfg[name] = sec
    _check(cfg)
    return cfg


def load_config(path) -> tuple[dict, str]:
    """Read, validate and hash a config file: (resolved config, sha256 of the bytes)."""
    data = Path(path).read_bytes()
    return parse_config(data.decode("utf-8"), str(path)), hashlib.sha256(data).hexdigest()


def section(cfg: dict, experiment: str) -> dict:
    if experiment not in cfg:
        raise ConfigError(f"config has no [{experiment}] section")
    return cfg[experiment]
