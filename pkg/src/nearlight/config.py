"""Run configuration: defaults, JSON loading, validation and flag overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import fields

from .errors import FormatError, ParameterError
from .net import TrainConfig
from .render import RenderOptions
from .solver import SolverConfig
from .synthetic import ALBEDO, DOMES, LED_MU, LED_PSI, LED_RING_RADIUS, LED_TILT_DEG

SURFACE_KEYS = {
    "flat": {"kind", "z0"},
    "dome": {"kind", "z0", "apex", "radius", "radius_u", "radius_v", "radius_z", "center"},
    "sinusoid": {"kind", "z0", "amplitude", "wavelength"},
    "sphere_indent": {"kind", "z0", "base", "dome", "center", "radius", "indent"},
    "cube_indent": {"kind", "z0", "base", "dome", "center", "half_width", "indent", "wall_slope",
                    "angle_deg"},
}

DEFAULTS = {
    "seed": 0,
    "resolution": 512,
    "render": {
        "resolution": 128,
        "lights": 12,
        "led": {"ring_radius": LED_RING_RADIUS, "height": 0.0, "tilt_deg": LED_TILT_DEG,
                "mu": LED_MU, "psi": list(LED_PSI)},
        "surface": {"kind": "sphere_indent", "base": "dome", "dome": dict(DOMES["sphere40"]),
                    "center": [1.0, -0.5], "radius": 4.0, "indent": 1.0},
        "albedo": list(ALBEDO),
        "noise_sigma": 0.0,
        "dark_level": 0.0,
        "quantization_bits": 16,
        "saturation_cap": 1.0,
    },
    "solver": {f.name: f.default for f in fields(SolverConfig) if f.name != "prior"},
    "dataset": {"tau": 0.03, "min_blob": 16, "max_per_press": None},
    "train": {**{f.name: f.default for f in fields(TrainConfig)}, "split": [0.8, 0.2]},
    "ablation": {"counts": [3, 6, 12], "region": "contact"},
    "pipeline": {"presses": 50, "resolution": 64, "noise_sigma": 0.002, "dark_level": 0.02,
                 "location_range": 4.0, "dome": "sphere40"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ParameterError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "surface":
            if not isinstance(val, dict):
                raise ParameterError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: config parse error: {exc}") from exc
        except OSError as exc:
            raise FormatError(f"{path}: cannot read config: {exc}") from exc
        if not isinstance(user, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        user.pop("_comment", None)
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    surf = cfg["render"]["surface"]
    kind = surf.get("kind")
    if kind not in SURFACE_KEYS:
        raise ParameterError(f"unknown surface kind {kind!r}")
    extra = set(surf) - SURFACE_KEYS[kind]
    if extra:
        raise ParameterError(f"unknown surface keys for {kind}: {sorted(extra)}")
    solver_config(cfg)
    train_config(cfg)
    render_options(cfg)
    if cfg["pipeline"]["dome"] not in DOMES:
        raise ParameterError(f"unknown dome {cfg['pipeline']['dome']!r}; choose from {sorted(DOMES)}")


def solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("split")
    return TrainConfig(**t)


def render_options(cfg: dict, seed_offset: int = 0) -> RenderOptions:
    r = cfg["render"]
    return RenderOptions(noise_sigma=r["noise_sigma"], dark_level=r["dark_level"],
                         quantization_bits=r["quantization_bits"],
                         saturation_cap=r["saturation_cap"], rng_seed=cfg["seed"] + seed_offset)


def dump(cfg: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
