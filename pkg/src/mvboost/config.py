"""Sectioned key = value configuration with strict keys and a canonical hash.

    MVB-CONFIG v1
    [refine]
    strength = 0.95

Lines starting with '#' are comments.  Every key must be known; values are
parsed to the type of the default.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path

CONFIG_HEADER = "MVB-CONFIG v1"

DEFAULTS: dict[str, dict[str, object]] = {
    "rig": {"extent": 1.2, "resolution": 64, "background": 1.0},
    "schedule": {"T": 1000, "kind": "cosine_vp"},
    "refine": {"strength": 0.95, "steps": 1},
    "oracle": {"eta": 0.05, "snr0": 1e-4, "color_shift_amp": 0.08, "warp_amp": 3.0,
               "silhouette_noise_amp": 0.05},
    "scenes": {"primitive_count": 3, "splats_per_primitive": 96},
    "model": {"d_model": 64, "layers": 2, "heads": 4, "patch": 8},
    "lora": {"rank": 32, "alpha": 32.0, "targets": "qv"},
    "optim": {"lr": 1e-3, "base_lr": 2e-3, "base_steps": 2000, "base_scenes": 64,
              "boost_steps": 500, "view_sampling": "all"},
    "loss": {"mse_weight": 1.0, "perceptual_weight": 1.0, "perceptual_resolution": 32},
    "view_opt": {"iters": 200, "lr": 0.05, "azimuth_step": 15.0, "elevations": "-20,0,20",
                 "tolerance": 0.5},
    "eval": {"orbit_steps": 24, "points": 2000},
    "seeds": {"seed": 0, "scene_seed": 1000},
}


class ConfigError(ValueError):
    """Malformed config file, unknown key or ill-typed value."""


class Config:
    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, val in items.items():
                self.set(section, key, val)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def __getitem__(self, item: str):
        section, key = item.split(".", 1)
        return self.get(section, key)

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        self.values[section][key] = _coerce(section, key, value)

    def canonical_text(self) -> str:
        lines = [CONFIG_HEADER]
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_format(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical_text())

    @property
    def elevations(self) -> tuple[float, ...]:
        return tuple(float(v) for v in str(self.get("view_opt", "elevations")).split(","))


def _coerce(section, key, value):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for '{section}.{key}'") from None


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str) -> Config:
    cfg = Config()
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line == CONFIG_HEADER:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in DEFAULTS:
                raise ConfigError(f"line {n}: unknown config section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {n}: key outside of a section")
        key, val = (s.strip() for s in line.split("=", 1))
        cfg.set(section, key, val)
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
