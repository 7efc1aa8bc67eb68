"""Fit and score reduced-basis surrogates of the diffusion solution map.

Each pipeline returns a :class:`FittedSurrogate`: a coefficient map between
an input encoding and output PCA coefficients, plus the bookkeeping needed
for benchmark records.  The input encoding is one of

* ``analytic``: u_i = c_i i^-s, the coordinates of x along psi_i;
* ``rescaled``: u_i = c_i, i.e. the analytic coordinates divided by i^-s;
* ``pca``: empirical L2 PCA coordinates of x.

Sparse-grid and TT surrogates always use ``analytic`` (they probe the PDE
at chosen coordinates).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .bench import BenchRecord, eps_h1mu, eps_l2mu, measure_eval_time
from .datagen import (DiffusionProblem, ProbeOperator, TestSet, generate_dataset, output_basis)
from .neural import MlpSurrogate, TrainConfig, TrainingDataset, init_mlp, train
from .reduced_basis import ReducedBasis, SmoothnessSpec, decay_weights
from .sparse_grid import SparseGridSurrogate, build_index_set, build_sg_surrogate
from .tensor_train import TTSurrogate, build_tt_surrogate, degree_schedule

log = logging.getLogger(__name__)

PCA_FIELD_CAP = 500   # probed fields used for the output PCA of SG/TT surrogates


@dataclass(eq=False)
class FittedSurrogate:
    kind: str
    model: object
    out_basis: ReducedBasis
    d_in: int
    s: float
    input_mode: str = "analytic"
    in_basis: ReducedBasis | None = None
    n: int = 0
    n_jac: int = 0
    t_T: float = 0.0
    hyper: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return int(self.model.parameter_count)

    def model_inputs(self, c: np.ndarray, problem: DiffusionProblem) -> np.ndarray:
        c = np.atleast_2d(c)
        if self.input_mode == "analytic":
            return c[:, : self.d_in] * decay_weights(self.d_in, self.s)
        if self.input_mode == "rescaled":
            return c[:, : self.d_in].copy()
        if self.input_mode == "pca":
            return self.in_basis.encode(problem.field(c, self.s))
        raise ValueError(f"unknown input mode {self.input_mode!r}")

    def predict_coefficients(self, c, problem):
        return self.model.evaluate(self.model_inputs(c, problem))

    def predict_fields(self, c, problem):
        return self.out_basis.decode(self.predict_coefficients(c, problem))

    def input_sensitivity(self, problem: DiffusionProblem, d: int) -> np.ndarray:
        """d(model input)/d(coordinate along psi_i) for i < d, shape (d_in, d)."""
        if self.input_mode == "analytic":
            return np.eye(self.d_in, d)
        if self.input_mode == "rescaled":
            return np.eye(self.d_in, d) / decay_weights(self.d_in, self.s)[:, None]
        return self.in_basis._gb.T @ problem.psi[:, :d]

    def jacobian_fields(self, c, problem, d: int) -> np.ndarray:
        """(K, m, d): derivative of the predicted field along psi_1..psi_d."""
        J = self.model.jacobian(self.model_inputs(c, problem))       # (K, r, d_in)
        J = J @ self.input_sensitivity(problem, d)                    # (K, r, d)
        return np.einsum("mr,krd->kmd", self.out_basis.basis[:, : J.shape[1]], J)

    # ---------------------------------------------------------------- storage

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.model.save(path / "model")
        self.out_basis.save(path / "out_basis")
        if self.in_basis is not None:
            self.in_basis.save(path / "in_basis")
        manifest = {"kind": self.kind, "d_in": self.d_in, "s": self.s, "input_mode": self.input_mode,
                    "n": self.n, "n_jac": self.n_jac, "hyper": self.hyper,
                    "out_gram": self.out_basis.gram_tag}
        (path / "surrogate.json").write_text(json.dumps(storage._jsonable(manifest), indent=2, sort_keys=True))
        # wall-clock numbers live apart so artifact hashes stay reproducible
        (path / "timing.json").write_text(json.dumps({"t_T": self.t_T}))

    @classmethod
    def load(cls, path, problem: DiffusionProblem):
        path = Path(path)
        meta = json.loads((path / "surrogate.json").read_text())
        loader = {"sg": SparseGridSurrogate, "tt": TTSurrogate, "nn": MlpSurrogate}[meta["kind"]]
        model = loader.load(path / "model")
        G = problem.ops.h1_gram if meta["out_gram"] == "h1" else problem.ops.mass
        out = ReducedBasis.load(path / "out_basis", G)
        in_basis = ReducedBasis.load(path / "in_basis", problem.ops.mass) if (path / "in_basis").exists() else None
        t_T = 0.0
        if (path / "timing.json").exists():
            t_T = json.loads((path / "timing.json").read_text())["t_T"]
        return cls(meta["kind"], model, out, meta["d_in"], meta["s"], meta["input_mode"], in_basis,
                   meta["n"], meta["n_jac"], t_T, meta["hyper"])


class _TimedProbe:
    """Wraps a probe, recording its wall time and keeping some returned fields."""

    def __init__(self, probe, keep: int, seed: int = 0):
        self.probe = probe
        self.seconds = 0.0
        self.fields = []
        self.calls = 0
        self.keep = keep
        self._rng = np.random.default_rng(seed)

    def __call__(self, c):
        t0 = time.perf_counter()
        y = self.probe(c)
        self.seconds += time.perf_counter() - t0
        # reservoir sample of the probed fields for the output PCA
        self.calls += 1
        if len(self.fields) < self.keep:
            self.fields.append(y)
        else:
            j = int(self._rng.integers(self.calls))
            if j < self.keep:
                self.fields[j] = y
        return y


def _fields_basis(problem, fields, rank, gram):
    """Output PCA of probed fields with its mean moved G-orthogonal to the basis.

    Decoding is unchanged, but encoding becomes linear (no offset), which
    the TT output core needs: it can absorb a linear map but not a shift.
    """
    Y = np.asarray(fields)
    if Y.shape[0] < 2:
        G = problem.ops.h1_gram if gram == "h1" else problem.ops.mass
        return ReducedBasis(Y.mean(axis=0), np.zeros((Y.shape[1], 0)), G, gram)
    out = output_basis(problem, Y, rank, gram)
    mean = out.mean - out.basis @ (out._gb.T @ out.mean)
    return ReducedBasis(mean, out.basis, out.gram, out.gram_tag, out.captured_energy,
                        out.discarded_energy, out.requested_rank)


def active_dimension(a: float, b: float, ell: float, d_cap: int) -> int:
    """Number of leading coordinates that can carry a nonzero index in Lambda_{a,b,ell}."""
    d = 0
    for j in range(1, d_cap + 1):
        arg = a + j * b
        if arg <= 1.0 or math.log(arg) < ell:
            d = j
    return max(d, 1)


def fit_sg(problem: DiffusionProblem, spec: SmoothnessSpec, a: float, b: float, ell: float,
           out_rank: int = 32, out_gram: str = "h1", d_cap: int | None = None) -> FittedSurrogate:
    d_cap = problem.d_true if d_cap is None else min(d_cap, problem.d_true)
    d = active_dimension(a, b, ell, d_cap)
    index_set = build_index_set(a, b, ell, d)      # raises on unbounded sets
    t0 = time.perf_counter()
    probe = ProbeOperator(problem, d)
    timed = _TimedProbe(probe, keep=len(index_set))
    sg = build_sg_surrogate(timed, index_set, scale=decay_weights(d, spec.s))
    out = _fields_basis(problem, sg.values, out_rank, out_gram)
    model = sg.map_values(out.encode)
    t_T = time.perf_counter() - t0 - timed.seconds
    return FittedSurrogate("sg", model, out, d, spec.s, n=probe.n_solves, t_T=max(t_T, 0.0),
                           hyper={"a": a, "b": b, "ell": ell, "d_in": d, "out_rank": out.rank},
                           info={"index_set_size": len(index_set)})


def fit_tt(problem: DiffusionProblem, spec: SmoothnessSpec, nu_max: int, mode: str = "aniso",
           d: int = 20, rank_cap: int = 6, sweeps: int = 2, out_rank: int = 32, out_gram: str = "h1",
           seed: int = 0) -> FittedSurrogate:
    schedule = degree_schedule(nu_max, mode, min(d, problem.d_true))
    if schedule.d_in < 1:
        raise ValueError("degree schedule leaves no active dimension")
    t0 = time.perf_counter()
    probe = ProbeOperator(problem, schedule.d_in)
    timed = _TimedProbe(probe, keep=PCA_FIELD_CAP, seed=seed)
    tt = build_tt_surrogate(timed, schedule, rank_cap, sweeps, scale=decay_weights(schedule.d_in, spec.s),
                            seed=seed)
    out = _fields_basis(problem, timed.fields, out_rank, out_gram)
    model = tt.map_values(out.encode)
    t_T = time.perf_counter() - t0 - timed.seconds
    info = tt.info
    return FittedSurrogate("tt", model, out, schedule.d_in, spec.s, n=probe.n_solves, t_T=max(t_T, 0.0),
                           hyper={"nu_max": nu_max, "mode": mode, "d_in": schedule.d_in, "rank_cap": rank_cap,
                                  "sweeps": sweeps, "out_rank": out.rank},
                           info={"converged": info.converged, "plateau": info.plateau,
                                 "sweep_errors": info.errors, "ranks": tt.ranks})


def fit_nn(problem: DiffusionProblem, spec: SmoothnessSpec, n: int, seed: int = 0, width: int = 64,
           depth: int = 3, activation: str = "gelu", objective: str = "L2", d_in: int = 32,
           out_rank: int = 32, in_kind: str = "analytic", rescaled: bool = False, epochs: int = 500,
           batch_size: int = 32, s_tilde: float | None = None, lr_schedule=None,
           val_fraction: float = 0.05, out_gram: str = "h1", dataset=None) -> FittedSurrogate:
    if rescaled and in_kind != "analytic":
        raise ValueError("the rescaled encoder needs the analytic input basis")
    ds = dataset if dataset is not None else generate_dataset(
        problem, spec, n, seed, d_in, out_rank, with_jacobians=(objective == "H1"),
        in_kind=in_kind, out_gram=out_gram)
    s_tilde = spec.s if s_tilde is None else s_tilde
    data = ds.data
    loss_power = s_tilde
    mode = "pca" if in_kind == "pca" else "analytic"
    if rescaled:
        lam = decay_weights(data.inputs.shape[1], spec.s)
        J = None if data.jacobians is None else data.jacobians * lam
        data = TrainingDataset(data.inputs / lam, data.outputs, J)
        loss_power = s_tilde - spec.s
        mode = "rescaled"
    net = init_mlp(data.inputs.shape[1], data.outputs.shape[1], width, depth, activation, seed=seed)
    cfg = TrainConfig(objective=objective, s_tilde=loss_power, epochs=epochs, batch_size=batch_size,
                      lr_schedule=lr_schedule, val_fraction=val_fraction, seed=seed)
    res = train(net, data, cfg)
    return FittedSurrogate("nn", res.net, ds.out_basis, data.inputs.shape[1], spec.s, mode,
                           ds.in_basis if in_kind == "pca" else None, n=ds.n_solves, n_jac=ds.n_jac,
                           t_T=res.seconds,
                           hyper={"width": width, "depth": depth, "activation": activation,
                                  "objective": objective, "d_in": data.inputs.shape[1],
                                  "out_rank": ds.out_basis.rank, "in_kind": in_kind, "rescaled": rescaled,
                                  "epochs": epochs, "n": n},
                           info={"trace": res.trace, "best_epoch": res.best_epoch})


def evaluate(fs: FittedSurrogate, problem: DiffusionProblem, test: TestSet, seed: int = 0,
             jacobians: bool = True, time_batches=(1,), repeats: int = 3) -> BenchRecord:
    H = problem.ops.h1_gram
    pred = fs.predict_fields(test.c, problem)
    e_l2 = eps_l2mu(pred, test.y, H)
    e_h1 = None
    if jacobians:
        d = test.d_ref
        J_pred = fs.jacobian_fields(test.c, problem, d)                  # (K, m, d)
        J_ref = test.tangents.transpose(0, 2, 1)                         # (K, m, d)
        e_h1 = eps_h1mu(J_pred, J_ref, decay_weights(d, fs.s), H)
    batch = test.K
    U = fs.model_inputs(test.c, problem)
    scale = np.max(np.abs(U), axis=0) if U.size else None
    times = measure_eval_time(fs.model.evaluate, fs.d_in, tuple(time_batches) + (batch,), repeats, seed,
                              scale=scale)
    return BenchRecord(kind=fs.kind, hyper=fs.hyper, seed=seed, s=fs.s, n=fs.n, n_jac=fs.n_jac,
                       N=fs.parameter_count, t_T=fs.t_T, t_E=times[batch], t_E_batch=batch,
                       eps_l2=e_l2, eps_h1=e_h1)


def fit_from_params(kind: str, problem, spec, params: dict, seed: int = 0) -> FittedSurrogate:
    params = dict(params)
    if kind == "sg":
        return fit_sg(problem, spec, **params)
    if kind == "tt":
        return fit_tt(problem, spec, seed=seed, **params)
    if kind == "nn":
        return fit_nn(problem, spec, seed=seed, **params)
    raise ValueError(f"unknown surrogate kind {kind!r}")


def ell_for_budget(a: float, b: float, target: int, d_cap: int = 256, tol: float = 1e-3) -> float:
    """Smallest ell (to ``tol``) whose index set has at least ``target`` members."""
    def size(ell):
        return len(build_index_set(a, b, ell, active_dimension(a, b, ell, d_cap)))

    lo, hi = 1e-6, 1.0
    while size(hi) < target:
        lo, hi = hi, 2.0 * hi
        if hi > 64:
            raise ValueError(f"no ell reaches |Lambda| = {target}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if size(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi
