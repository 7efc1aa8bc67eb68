"""Hyperparameter sweeps producing benchmark records and report CSVs."""
from __future__ import annotations

import logging
import traceback
from pathlib import Path

from .bench import BenchRecord, write_report
from .config import ensemble_grid, surrogate_params
from .datagen import load_or_make_test_set, make_problem
from .pipelines import evaluate, fit_from_params
from .reduced_basis import SmoothnessSpec
from .sparse_grid import build_index_set

log = logging.getLogger(__name__)


def problem_from_config(cfg: dict):
    p = cfg["problem"]
    return make_problem(int(p["grid_n"]), int(p["d_true"]), float(p["gamma"]), float(p["delta"]))


def test_set_for(cfg: dict, problem, s: float, root):
    t = cfg["test"]
    spec = SmoothnessSpec(float(s), int(cfg["problem"]["d_true"]))
    path = Path(root) / f"test_s{s:g}"
    return load_or_make_test_set(path, problem, spec, int(t["K"]), int(t["seed"]), int(t["d_ref"]))


def _precheck(kind: str, params: dict, d_true: int):
    """Reject configurations that are invalid before any solve happens."""
    if kind == "sg":
        # an unbounded index set shows up as log(a + j b) <= 0 for some j
        for j in range(1, d_true + 1):
            if params["a"] + j * params["b"] <= 1.0:
                build_index_set(params["a"], params["b"], params["ell"], j)


def run_ensemble(cfg: dict, out_dir, problem=None, progress=None) -> list:
    """Fit and score every grid entry; failures become records, never exceptions."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ens = cfg["ensemble"]
    jobs = [(kind, params) for kind in ens.get("kinds", []) for params in ensemble_grid(cfg, kind)]
    records = []
    if jobs:
        problem = problem_from_config(cfg) if problem is None else problem
    d_true = int(cfg["problem"]["d_true"])
    for s in ens.get("s", []) if jobs else []:
        spec = SmoothnessSpec(float(s), d_true)
        test = test_set_for(cfg, problem, s, out_dir / "test_sets")
        for kind, params in jobs:
            # seeds only matter for stochastic pipelines
            seeds = ens.get("seeds", [0]) if kind in ("nn", "tt") else ens.get("seeds", [0])[:1]
            for seed in seeds:
                kw = surrogate_params(cfg, kind, params)
                try:
                    _precheck(kind, kw, d_true)
                except ValueError as exc:
                    records.append(BenchRecord(kind, hyper=params, seed=seed, s=float(s),
                                               status="skipped", reason=str(exc)))
                    log.info("skip %s %s: %s", kind, params, exc)
                    continue
                try:
                    fs = fit_from_params(kind, problem, spec, kw, seed=seed)
                    rec = evaluate(fs, problem, test, seed=seed)
                    rec.hyper = dict(fs.hyper)
                except Exception as exc:  # noqa: BLE001 - one bad entry must not stop the sweep
                    log.warning("failed %s %s: %s", kind, params, exc)
                    log.debug("%s", traceback.format_exc())
                    rec = BenchRecord(kind, hyper=params, seed=seed, s=float(s), status="failed",
                                      reason=f"{type(exc).__name__}: {exc}")
                records.append(rec)
                if progress:
                    progress(rec)
    write_report(records, out_dir)
    return records
