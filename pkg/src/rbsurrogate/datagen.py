"""Sampling K^s inputs, forward and tangent solves, encoded datasets on disk."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .neural import TrainingDataset
from .pde import DiffusionSystem, FemOperators, Grid2D, assemble_fem, matern_eigenbasis
from .reduced_basis import ReducedBasis, SmoothnessSpec, analytic_basis, empirical_pca

log = logging.getLogger(__name__)

# seed streams: training draws and the shared test set never overlap
TRAIN_STREAM = 0
TEST_STREAM = 1


@dataclass(eq=False)
class DiffusionProblem:
    """Grid, FE operators and the Matern input eigenbasis for one resolution."""

    grid: Grid2D
    ops: FemOperators
    mu: np.ndarray
    psi: np.ndarray          # (m, d_true), mass-orthonormal columns
    gamma: float = 0.1
    delta: float = 0.5

    @property
    def d_true(self) -> int:
        return self.psi.shape[1]

    @property
    def m(self) -> int:
        return self.grid.dof_count

    def field(self, c: np.ndarray, s: float) -> np.ndarray:
        """x = sum_j c_j j^-s psi_j for one or many coefficient rows."""
        c = np.asarray(c, dtype=np.float64)
        lam = np.arange(1, c.shape[-1] + 1, dtype=np.float64) ** (-s)
        return (c * lam) @ self.psi[:, : c.shape[-1]].T

    def solve(self, x: np.ndarray) -> np.ndarray:
        return DiffusionSystem(self.ops, x).solve()


def make_problem(n: int = 32, d_true: int = 256, gamma: float = 0.1, delta: float = 0.5) -> DiffusionProblem:
    grid = Grid2D(n)
    ops = assemble_fem(grid)
    mu, psi = matern_eigenbasis(grid, gamma, delta, d_true, ops=ops)
    return DiffusionProblem(grid, ops, mu, psi, gamma, delta)


def sample_seeds(seed: int, n: int, stream: int = TRAIN_STREAM):
    """Independent per-sample generators; sample k is the same for every n > k."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), int(stream)]).spawn(n)]


def draw_coefficients(seed: int, n: int, d_true: int, stream: int = TRAIN_STREAM) -> np.ndarray:
    return np.vstack([g.uniform(-1.0, 1.0, size=d_true) for g in sample_seeds(seed, n, stream)]) \
        if n else np.zeros((0, d_true))


@dataclass(eq=False)
class SolveBatch:
    """Raw samples: K^s coefficients, input fields and solutions (rows)."""

    c: np.ndarray
    x: np.ndarray
    y: np.ndarray
    systems: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.c.shape[0]


def solve_batch(problem: DiffusionProblem, spec: SmoothnessSpec, c: np.ndarray,
                keep_factorizations: bool = False) -> SolveBatch:
    c = np.atleast_2d(c)
    if c.shape[1] > problem.d_true:
        raise ValueError(f"{c.shape[1]} coefficients exceed the {problem.d_true} basis functions")
    X = problem.field(c, spec.s)
    Y = np.empty_like(X)
    systems = []
    for k in range(c.shape[0]):
        system = DiffusionSystem(problem.ops, X[k])
        Y[k] = system.solve()
        if keep_factorizations:
            systems.append(system)
    return SolveBatch(c, X, Y, systems)


def input_basis(problem: DiffusionProblem, d_in: int, kind: str = "analytic", x_samples=None) -> ReducedBasis:
    """L2-orthonormal input encoder: the known psi_j, or PCA of sampled fields."""
    if kind == "analytic":
        return analytic_basis(problem.psi, d_in, problem.ops.mass, "l2")
    if kind == "pca":
        if x_samples is None:
            raise ValueError("PCA input encoder needs samples")
        return empirical_pca(np.asarray(x_samples).T, problem.ops.mass, d_in, "l2")
    raise ValueError(f"unknown input encoder {kind!r}")


def output_basis(problem: DiffusionProblem, y_samples, rank: int, gram: str = "h1") -> ReducedBasis:
    G = problem.ops.h1_gram if gram == "h1" else problem.ops.mass
    Y = np.asarray(y_samples)
    rank = min(rank, Y.shape[0] - 1, Y.shape[1])
    return empirical_pca(Y.T, G, rank, gram)


def tangent_jacobians(batch: SolveBatch, directions: np.ndarray, out: ReducedBasis | None):
    """Derivatives of the (encoded) solution along the columns of ``directions``.

    Returns (n, r, k) coefficient Jacobians, or (n, m, k) fields when
    ``out`` is None.  Each sample reuses its forward factorization.
    """
    if len(batch.systems) != batch.n:
        raise ValueError("batch was solved without keeping factorizations")
    k = directions.shape[1]
    rows = []
    for system in batch.systems:
        Z = system.tangent(directions)                 # (m, k)
        rows.append(Z if out is None else out._gb.T @ Z)
    return np.stack(rows) if rows else np.zeros((0, 0, k))


@dataclass(eq=False)
class EncodedDataset:
    """Encoded training data plus the raw draws it came from."""

    data: TrainingDataset
    c: np.ndarray
    in_basis: ReducedBasis
    out_basis: ReducedBasis
    n_solves: int
    n_jac: int
    manifest: dict = field(default_factory=dict)


def generate_dataset(problem: DiffusionProblem, spec: SmoothnessSpec, n: int, seed: int,
                     d_in: int, out_rank: int, with_jacobians: bool = False,
                     in_kind: str = "analytic", out_gram: str = "h1",
                     out_basis: ReducedBasis | None = None, c: np.ndarray | None = None) -> EncodedDataset:
    """Draw n inputs, solve, build missing encoders from the same samples, encode.

    Jacobian column i is the derivative of the output coefficients along the
    i-th input basis function, so it is the derivative with respect to input
    coefficient i.  Pass ``c`` to bypass the random draw.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if c is None:
        c = draw_coefficients(seed, n, spec.d_true)
    batch = solve_batch(problem, spec, c, keep_factorizations=with_jacobians)
    if in_kind == "pca" and n < 2:
        raise ValueError("PCA input encoder needs n >= 2")
    enc_in = input_basis(problem, d_in, in_kind, batch.x)
    if out_basis is None:
        if n < 2:
            raise ValueError("building an output basis needs n >= 2; pass out_basis")
        out_basis = output_basis(problem, batch.y, out_rank, out_gram)
    inputs = enc_in.encode(batch.x)
    outputs = out_basis.encode(batch.y)
    jac = None
    n_jac = 0
    if with_jacobians:
        jac = tangent_jacobians(batch, enc_in.basis, out_basis)
        n_jac = n * enc_in.rank
    manifest = {
        "kind": "dataset",
        "n": n,
        "seed": seed,
        "s": spec.s,
        "d_true": spec.d_true,
        "grid_n": problem.grid.n,
        "d_in": enc_in.rank,
        "d_out": out_basis.rank,
        "in_kind": in_kind,
        "out_gram": out_gram,
        "n_solves": n,
        "n_jac": n_jac,
        "encoder_hash": storage.content_hash(enc_in.basis, enc_in.mean, out_basis.basis, out_basis.mean),
    }
    return EncodedDataset(TrainingDataset(inputs, outputs, jac), np.asarray(c), enc_in, out_basis,
                          n, n_jac, manifest)


def save_dataset(ds: EncodedDataset, path) -> Path:
    arrays = {"inputs": ds.data.inputs, "outputs": ds.data.outputs, "c": ds.c}
    if ds.data.jacobians is not None:
        arrays["jacobians"] = ds.data.jacobians
    manifest = dict(ds.manifest)
    manifest["layout"] = ("row-major: inputs (n, d_in), outputs (n, d_out), "
                          "jacobians (n, d_out, d_in), c (n, d_true)")
    path = Path(path)
    storage.write_container(path, manifest, arrays)
    ds.in_basis.save(path / "in_basis")
    ds.out_basis.save(path / "out_basis")
    return path


def load_dataset(path, problem: DiffusionProblem) -> EncodedDataset:
    path = Path(path)
    manifest, arrays = storage.read_container(path)
    enc_in = ReducedBasis.load(path / "in_basis", problem.ops.mass)
    G = problem.ops.h1_gram if manifest["out_gram"] == "h1" else problem.ops.mass
    out = ReducedBasis.load(path / "out_basis", G)
    data = TrainingDataset(arrays["inputs"], arrays["outputs"], arrays.get("jacobians"))
    return EncodedDataset(data, arrays["c"], enc_in, out, manifest["n_solves"], manifest["n_jac"], manifest)


class ProbeOperator:
    """c -> encoded solution of x = sum_i c_i psi_i (analytic input encoder).

    ``c`` are encoder coordinates, i.e. already multiplied by j^-s.  With
    ``out=None`` the full nodal solution is returned.  Every call counts one
    forward solve unless the optional cache (keyed by c on a 1e-14 grid)
    serves it.
    """

    def __init__(self, problem: DiffusionProblem, d_in: int, out: ReducedBasis | None = None,
                 cache: bool = False):
        if d_in > problem.d_true:
            raise ValueError(f"d_in={d_in} exceeds the {problem.d_true} basis functions")
        self.problem = problem
        self.d_in = d_in
        self.out = out
        self.n_solves = 0
        self._cache = {} if cache else None

    def __call__(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (self.d_in,):
            raise ValueError(f"expected {self.d_in} coefficients, got shape {c.shape}")
        key = None
        if self._cache is not None:
            key = tuple(np.round(c / 1e-14).astype(np.int64).tolist())
            if key in self._cache:
                return self._cache[key].copy()
        x = self.problem.psi[:, : self.d_in] @ c
        y = self.problem.solve(x)
        self.n_solves += 1
        val = y if self.out is None else self.out.encode(y)
        if key is not None:
            self._cache[key] = val.copy()
        return val


def probe_operator(problem: DiffusionProblem, c, out: ReducedBasis | None = None) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return ProbeOperator(problem, c.size, out)(c)


# ---------------------------------------------------------------- test sets

@dataclass(eq=False)
class TestSet:
    """Fixed Monte-Carlo test samples with solutions and reference tangents.

    ``tangents[k, i]`` is the nodal field dG(x_k)[psi_i] for i < d_ref.
    """

    c: np.ndarray
    y: np.ndarray
    tangents: np.ndarray
    s: float
    seed: int

    @property
    def K(self) -> int:
        return self.c.shape[0]

    @property
    def d_ref(self) -> int:
        return self.tangents.shape[1]


def make_test_set(problem: DiffusionProblem, spec: SmoothnessSpec, K: int = 128, seed: int = 0,
                  d_ref: int = 32) -> TestSet:
    c = draw_coefficients(seed, K, spec.d_true, stream=TEST_STREAM)
    batch = solve_batch(problem, spec, c, keep_factorizations=True)
    d_ref = min(d_ref, problem.d_true)
    Z = tangent_jacobians(batch, problem.psi[:, :d_ref], None)       # (K, m, d_ref)
    return TestSet(c, batch.y, np.ascontiguousarray(Z.transpose(0, 2, 1)), spec.s, seed)


def load_or_make_test_set(path, problem: DiffusionProblem, spec: SmoothnessSpec, K: int, seed: int,
                          d_ref: int = 32) -> TestSet:
    """Shared test set cached on disk so every surrogate sees the same samples."""
    path = Path(path)
    if (path / "manifest.json").exists():
        manifest, arrays = storage.read_container(path)
        same = (manifest.get("K") == K and manifest.get("seed") == seed and manifest.get("s") == spec.s
                and manifest.get("grid_n") == problem.grid.n and manifest.get("d_ref") == d_ref
                and manifest.get("d_true") == spec.d_true)
        if same:
            return TestSet(arrays["c"], arrays["y"], arrays["tangents"], spec.s, seed)
        log.info("test set at %s does not match the request; regenerating", path)
    ts = make_test_set(problem, spec, K, seed, d_ref)
    storage.write_container(path, {"kind": "test_set", "K": K, "seed": seed, "s": spec.s,
                                   "grid_n": problem.grid.n, "d_ref": ts.d_ref, "d_true": spec.d_true},
                            {"c": ts.c, "y": ts.y, "tangents": ts.tangents})
    return ts
