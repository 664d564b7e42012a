"""Run configuration files: INI-style sections of key = value lines.

Sections are [system], [dataset], [model], [train], [recon], [eval].
Unknown sections or keys are rejected; keys left out fall back to preset
defaults and the fallback is logged. The [system] section accepts a
`preset` key ("full" or "desk") that also switches the model, training,
and reconstruction defaults to the matching scale.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass

from .compensation import Hyperparams, PatchSpec
from .dataset import BASE_NOISE_FRACTION, SphereDistribution
from .geometry import SystemConfig, VoxelGrid, desk_config

__all__ = ["RunConfig", "load_runconfig", "default_runconfig"]

log = logging.getLogger(__name__)

_SYSTEM_KEYS = (
    "aperture_radius", "polar_start", "polar_end", "n_elements",
    "n_views", "n_samples", "dt", "sos", "elem_a", "elem_b",
)
_DATASET_KEYS = (
    "n_samples", "noise_fraction", "n_spheres", "radius_lognormal_mean",
    "radius_lognormal_std", "radius_min", "radius_max", "position_region",
    "amplitude_min", "amplitude_max",
)
_MODEL_KEYS = ("k", "n_r_patch", "n_v_patch", "stride_r", "stride_v", "widths", "lam_init")
_TRAIN_KEYS = (
    "epochs", "steps_per_epoch", "batch_size", "lr", "lr_factor",
    "lr_patience", "stop_patience",
)
_RECON_KEYS = ("origin", "spacing", "dims", "presmooth_fwhm")
_EVAL_KEYS = ("shells", "frangi_sigmas")

_PRESET_DEFAULTS = {
    "full": {
        "k": 127,
        "patch": (32, 32),
        "widths": (16, 32, 64),
        "grid": ((-60.0, -60.0, -60.0), 0.25, (480, 480, 240)),
    },
    "desk": {
        "k": 16,
        "patch": (16, 16),
        "widths": (8, 16, 32),
        "grid": ((-60.0, -60.0, -60.0), 1.0, (120, 120, 60)),
    },
}


@dataclass
class RunConfig:
    system: SystemConfig
    grid: VoxelGrid
    dist: SphereDistribution
    n_samples: int
    noise_fraction: float
    k: int
    patch: PatchSpec
    widths: tuple[int, int, int]
    lam_init: float
    hp: Hyperparams
    presmooth_fwhm: float
    shells: tuple[tuple[float, float], ...]
    frangi_sigmas: tuple[float, ...]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _shells(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(","):
        lo, hi = part.split(":")
        out.append((float(lo), float(hi)))
    return tuple(out)


def default_runconfig(preset: str = "desk") -> RunConfig:
    """Preset defaults without reading a file."""
    return _build(preset, {})


def load_runconfig(path) -> RunConfig:
    """Parse and validate a configuration file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh, source=str(path))

    known = {
        "system": ("preset",) + _SYSTEM_KEYS,
        "dataset": _DATASET_KEYS,
        "model": _MODEL_KEYS,
        "train": _TRAIN_KEYS,
        "recon": _RECON_KEYS,
        "eval": _EVAL_KEYS,
    }
    sections: dict[str, dict[str, str]] = {}
    for name in parser.sections():
        if name not in known:
            raise ValueError(f"unknown config section [{name}]")
        body = dict(parser.items(name))
        bad = sorted(set(body) - set(known[name]))
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {', '.join(bad)}")
        sections[name] = body

    preset = sections.get("system", {}).pop("preset", "desk")
    if preset not in _PRESET_DEFAULTS:
        raise ValueError(f"unknown system preset {preset!r}")
    return _build(preset, sections)


def _log_defaults(section: str, given: dict, keys) -> None:
    missing = [k for k in keys if k not in given]
    if missing:
        log.info("[%s] using defaults for: %s", section, ", ".join(missing))


def _build(preset: str, sections: dict) -> RunConfig:
    pdef = _PRESET_DEFAULTS[preset]
    base = desk_config() if preset == "desk" else SystemConfig()

    sys_kv = sections.get("system", {})
    _log_defaults("system", sys_kv, _SYSTEM_KEYS)
    overrides = {}
    for key, text in sys_kv.items():
        kind = type(getattr(base, key))
        overrides[key] = kind(text)
    system = SystemConfig(**{**{f: getattr(base, f) for f in base.__dataclass_fields__}, **overrides})

    ds_kv = dict(sections.get("dataset", {}))
    _log_defaults("dataset", ds_kv, _DATASET_KEYS)
    n_samples = int(ds_kv.pop("n_samples", 64))
    noise_fraction = float(ds_kv.pop("noise_fraction", BASE_NOISE_FRACTION))
    dist_defaults = SphereDistribution()
    dist_kwargs = {}
    for key, text in ds_kv.items():
        kind = type(getattr(dist_defaults, key))
        dist_kwargs[key] = kind(text)
    dist = SphereDistribution(**dist_kwargs)

    md_kv = sections.get("model", {})
    _log_defaults("model", md_kv, _MODEL_KEYS)
    k = int(md_kv.get("k", pdef["k"]))
    p_r = int(md_kv.get("n_r_patch", pdef["patch"][0]))
    p_v = int(md_kv.get("n_v_patch", pdef["patch"][1]))
    patch = PatchSpec(
        p_r, p_v,
        int(md_kv.get("stride_r", 0)),
        int(md_kv.get("stride_v", 0)),
    )
    widths = _ints(md_kv["widths"]) if "widths" in md_kv else pdef["widths"]
    if len(widths) != 3:
        raise ValueError("widths needs exactly three values")
    lam_init = float(md_kv.get("lam_init", 1e-2))

    tr_kv = sections.get("train", {})
    _log_defaults("train", tr_kv, _TRAIN_KEYS)
    hp_defaults = Hyperparams()
    hp_kwargs = {}
    for key, text in tr_kv.items():
        kind = type(getattr(hp_defaults, key))
        hp_kwargs[key] = kind(text)
    hp = Hyperparams(**hp_kwargs)

    rc_kv = sections.get("recon", {})
    _log_defaults("recon", rc_kv, _RECON_KEYS)
    g_origin, g_spacing, g_dims = pdef["grid"]
    origin = _floats(rc_kv["origin"]) if "origin" in rc_kv else g_origin
    spacing = float(rc_kv.get("spacing", g_spacing))
    dims = _ints(rc_kv["dims"]) if "dims" in rc_kv else g_dims
    grid = VoxelGrid(origin=tuple(origin), spacing=spacing, dims=tuple(dims))
    presmooth_fwhm = float(rc_kv.get("presmooth_fwhm", 0.0))

    ev_kv = sections.get("eval", {})
    _log_defaults("eval", ev_kv, _EVAL_KEYS)
    shells = _shells(ev_kv["shells"]) if "shells" in ev_kv else ((25.0, 35.0), (35.0, 45.0))
    sigmas = _floats(ev_kv["frangi_sigmas"]) if "frangi_sigmas" in ev_kv else (1.0, 2.0, 3.0, 4.0, 5.0)

    return RunConfig(
        system=system,
        grid=grid,
        dist=dist,
        n_samples=n_samples,
        noise_fraction=noise_fraction,
        k=k,
        patch=patch,
        widths=tuple(widths),
        lam_init=lam_init,
        hp=hp,
        presmooth_fwhm=presmooth_fwhm,
        shells=shells,
        frangi_sigmas=sigmas,
    )
