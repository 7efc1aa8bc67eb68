"""TOML configuration with documented defaults (see configs/example.toml)."""
from __future__ import annotations

import copy
import itertools
from pathlib import Path

import tomli


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "problem": {"grid_n": 32, "d_true": 256, "gamma": 0.1, "delta": 0.5},
    "test": {"K": 128, "seed": 1234, "d_ref": 32},
    "encoder": {"out_rank": 32, "out_gram": "h1"},
    "fit": {"kind": "sg", "s": 3.0},
    "sg": {"a": 2.0, "b": 1.0, "ell": 4.0},
    "tt": {"nu_max": 4, "mode": "aniso", "d": 20, "rank_cap": 4, "sweeps": 2},
    "nn": {"n": 256, "width": 64, "depth": 3, "activation": "gelu", "objective": "L2", "d_in": 32,
           "in_kind": "analytic", "rescaled": False, "epochs": 500, "batch_size": 32,
           "val_fraction": 0.05},
    "ensemble": {
        "s": [1.0, 3.0],
        "seeds": [0],
        "kinds": ["sg", "tt", "nn"],
        "sg": {"a": [1.2, 3.0], "b": [0.5, 1.2], "ell": [2.0, 3.0, 4.0]},
        "tt": {"nu_max": [3, 5], "mode": ["aniso"], "rank_cap": [2, 4], "d": [20]},
        "nn": {"n": [64, 256], "width": [64], "depth": [3], "objective": ["L2", "H1"]},
    },
}

# large-scale settings enabled by --full; hours of runtime on one core
FULL_OVERRIDES = {
    "problem": {"grid_n": 64, "d_true": 1000},
    "test": {"K": 250},
    "nn": {"epochs": 2000},
    "ensemble": {
        "s": [0.5, 1.0, 2.0, 3.0],
        "sg": {"a": [0.2, 0.5, 1.2, 3.0], "b": [0.2, 0.5, 1.2, 3.0], "ell": [2.0, 3.0, 4.0, 5.0, 6.0]},
        "tt": {"nu_max": [2, 3, 4, 5, 6], "mode": ["aniso", "iso"], "rank_cap": [2, 4, 8], "d": [20]},
        "nn": {"n": [64, 256, 1024, 4096], "width": [200, 400, 800], "depth": [3, 5, 7],
               "objective": ["L2", "H1"]},
    },
}

_SECTIONS = set(DEFAULTS)
_KINDS = ("sg", "tt", "nn")


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, full: bool = False) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if full:
        cfg = merge(cfg, FULL_OVERRIDES)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        unknown = set(user) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown section(s) in {path}: {sorted(unknown)}")
        cfg = merge(cfg, user)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    p = cfg["problem"]
    if int(p["grid_n"]) < 2:
        raise ConfigError("problem.grid_n must be >= 2")
    if int(p["d_true"]) > (int(p["grid_n"]) + 1) ** 2:
        raise ConfigError("problem.d_true exceeds the number of grid nodes")
    if cfg["fit"]["kind"] not in _KINDS:
        raise ConfigError(f"fit.kind must be one of {_KINDS}")
    if cfg["encoder"]["out_gram"] not in ("h1", "l2"):
        raise ConfigError("encoder.out_gram must be 'h1' or 'l2'")
    if cfg["nn"]["objective"] not in ("L2", "H1"):
        raise ConfigError("nn.objective must be 'L2' or 'H1'")
    for kind in cfg["ensemble"].get("kinds", []):
        if kind not in _KINDS:
            raise ConfigError(f"unknown ensemble kind {kind!r}")


def surrogate_params(cfg: dict, kind: str, overrides: dict | None = None) -> dict:
    """Keyword arguments for ``pipelines.fit_*`` from the config sections."""
    params = dict(cfg[kind])
    params.update(overrides or {})
    out_rank = cfg["encoder"]["out_rank"]
    out_gram = cfg["encoder"]["out_gram"]
    if kind == "sg":
        keys = ("a", "b", "ell", "d_cap")
    elif kind == "tt":
        keys = ("nu_max", "mode", "d", "rank_cap", "sweeps")
    else:
        keys = ("n", "width", "depth", "activation", "objective", "d_in", "in_kind", "rescaled",
                "epochs", "batch_size", "s_tilde", "lr_schedule", "val_fraction")
    kw = {k: params[k] for k in keys if k in params}
    kw["out_rank"] = out_rank
    kw["out_gram"] = out_gram
    return kw


def ensemble_grid(cfg: dict, kind: str):
    """Cartesian product of the listed hyperparameter values for one kind."""
    grid = cfg["ensemble"].get(kind, {})
    if not grid:
        return []
    keys = sorted(grid)
    values = [v if isinstance(v, list) else [v] for v in (grid[k] for k in keys)]
    if any(len(v) == 0 for v in values):
        return []
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]
