"""Error metrics, timing, benchmark records and Pareto extraction."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _gram_sq_norms(E: np.ndarray, gram) -> np.ndarray:
    """Squared G-norms of the rows of E (K, m); Euclidean when gram is None."""
    if gram is None:
        return np.sum(E * E, axis=-1)
    return np.sum(E * np.asarray((gram @ E.T).T), axis=-1)


def eps_l2mu(pred: np.ndarray, ref: np.ndarray, gram=None) -> float:
    """sqrt(sum_k ||y_k - y~_k||^2 / sum_k ||y_k||^2) over paired rows."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    den = float(np.sum(_gram_sq_norms(ref, gram)))
    if den <= 0.0:
        raise ValueError("reference outputs are all zero")
    return math.sqrt(float(np.sum(_gram_sq_norms(ref - pred, gram))) / den)


def eps_h1mu(J_pred: np.ndarray, J_ref: np.ndarray, weights, gram=None) -> float:
    """Relative RMS of (J_ref - J_pred) diag(weights) in the Frobenius (or G-weighted) norm.

    Arrays have shape (K, d_out, d_in); ``gram`` acts on the output axis.
    """
    J_pred = np.asarray(J_pred, dtype=np.float64)
    J_ref = np.asarray(J_ref, dtype=np.float64)
    if J_pred.ndim == 2:
        J_pred, J_ref = J_pred[None], J_ref[None]
    if J_pred.shape != J_ref.shape:
        raise ValueError(f"shape mismatch {J_pred.shape} vs {J_ref.shape}")
    w = np.asarray(weights, dtype=np.float64)

    def total(J):
        # columns as rows: (K * d_in, d_out)
        cols = (J * w).transpose(0, 2, 1).reshape(-1, J.shape[1])
        return float(np.sum(_gram_sq_norms(cols, gram)))

    den = total(J_ref)
    if den <= 0.0:
        raise ValueError("reference Jacobians are all zero")
    return math.sqrt(total(J_ref - J_pred) / den)


def measure_eval_time(fn, d_in: int, batch_sizes=(1, 32, 1024), repeats: int = 5, seed: int = 0,
                      scale=None) -> dict:
    """Median wall time per sample of ``fn`` on random batches, warm-up excluded."""
    rng = np.random.default_rng(seed)
    scale = np.ones(d_in) if scale is None else np.asarray(scale)
    out = {}
    for bs in batch_sizes:
        C = rng.uniform(-1.0, 1.0, size=(bs, d_in)) * scale
        fn(C)
        times = []
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            fn(C)
            times.append(time.perf_counter() - t0)
        out[int(bs)] = statistics.median(times) / bs
    return out


# ---------------------------------------------------------------- records

RECORD_FIELDS = ["kind", "status", "seed", "s", "n", "n_jac", "N", "t_T", "t_E", "t_E_batch",
                 "eps_l2", "eps_h1", "reason", "hyper"]


@dataclass
class BenchRecord:
    kind: str
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    s: float = float("nan")
    n: int = 0
    n_jac: int = 0
    N: int = 0
    t_T: float = 0.0
    t_E: float = 0.0
    t_E_batch: int = 0
    eps_l2: float = float("nan")
    eps_h1: float | None = None
    status: str = "ok"
    reason: str = ""

    def __post_init__(self):
        for name in ("n", "n_jac", "N", "t_T", "t_E"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def row(self) -> dict:
        d = asdict(self)
        d["hyper"] = json.dumps(self.hyper, sort_keys=True)
        d["eps_h1"] = "" if self.eps_h1 is None else self.eps_h1
        return {k: d[k] for k in RECORD_FIELDS}

    @classmethod
    def from_row(cls, row: dict) -> "BenchRecord":
        def num(v, cast=float, default=0):
            return default if v in ("", None) else cast(v)
        return cls(
            kind=row["kind"], hyper=json.loads(row.get("hyper") or "{}"), seed=num(row["seed"], int),
            s=num(row["s"], float, float("nan")), n=num(row["n"], int), n_jac=num(row["n_jac"], int),
            N=num(row["N"], int), t_T=num(row["t_T"]), t_E=num(row["t_E"]), t_E_batch=num(row["t_E_batch"], int),
            eps_l2=num(row["eps_l2"], float, float("nan")),
            eps_h1=None if row.get("eps_h1") in ("", None) else float(row["eps_h1"]),
            status=row.get("status", "ok"), reason=row.get("reason", ""),
        )


def write_records(records, directory, name="records"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{name}.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        wr.writeheader()
        for r in records:
            wr.writerow(r.row())
    (directory / f"{name}.json").write_text(json.dumps([asdict(r) for r in records], indent=2))


def read_records(path):
    with open(path, newline="") as fh:
        return [BenchRecord.from_row(row) for row in csv.DictReader(fh)]


def _axis(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def pareto_frontier(records, cost_axis: str = "n", error_axis: str = "eps_l2"):
    """Records not dominated in (cost, error), sorted by cost; exact ties are all kept.

    A record is dominated when another has cost <= and error <= with at least
    one strict inequality.  Sort by cost then error and sweep: a record
    survives when its error is below every error seen at strictly smaller
    cost and no record of equal cost has a smaller error.
    """
    pts = [(float(_axis(r, cost_axis)), float(_axis(r, error_axis)), i, r) for i, r in enumerate(records)]
    pts = [p for p in pts if not (math.isnan(p[0]) or math.isnan(p[1]))]
    pts.sort(key=lambda p: (p[0], p[1], p[2]))
    out = []
    best = math.inf
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j][0] == pts[i][0]:
            j += 1
        group_min = pts[i][1]
        if group_min < best:
            out.extend(p[3] for p in pts[i:j] if p[1] == group_min)
            best = group_min
        i = j
    return out


FIGURE_AXES = {"error_vs_n": "n", "error_vs_tE": "t_E", "error_vs_N": "N", "error_vs_tT": "t_T"}


def write_report(records, directory):
    """records.csv/json, pareto.csv (over n) and one CSV per cost axis."""
    directory = Path(directory)
    ok = [r for r in records if r.status == "ok"]
    write_records(records, directory)
    with open(directory / "pareto.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        wr.writeheader()
        for kind in sorted({r.kind for r in ok}):
            for r in pareto_frontier([q for q in ok if q.kind == kind], "n", "eps_l2"):
                wr.writerow(r.row())
    for fig, axis in FIGURE_AXES.items():
        with open(directory / f"{fig}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["kind", "s", axis, "eps_l2", "eps_h1", "on_frontier", "hyper"])
            for kind in sorted({r.kind for r in ok}):
                group = [q for q in ok if q.kind == kind]
                front = {id(q) for q in pareto_frontier(group, axis, "eps_l2")}
                for q in sorted(group, key=lambda q: getattr(q, axis)):
                    wr.writerow([kind, q.s, getattr(q, axis), q.eps_l2,
                                 "" if q.eps_h1 is None else q.eps_h1, int(id(q) in front),
                                 json.dumps(q.hyper, sort_keys=True)])
