"""Smolyak sparse-grid interpolation on nested Leja nodes.

Interpolation happens on [-1, 1]^d. A surrogate may carry a per-coordinate
``scale`` so that its public input ``c`` lives in prod_k [-scale_k, scale_k];
the affine map ``u = c / scale`` is applied internally.
"""
from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import storage

log = logging.getLogger(__name__)

NODE_TOL = 1e-14          # |c - xi| below this counts as hitting the node
DERIV_NODE_TOL = 1e-9     # derivative formula switches to the node rule below this
LEJA_CANDIDATES = 100_001


# ---------------------------------------------------------------- index sets

@dataclass(frozen=True, eq=False)
class MultiIndexSet:
    """Finite set of multi-indices, one per row of ``indices``."""

    indices: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]

    def as_tuples(self):
        return [tuple(int(v) for v in row) for row in self.indices]

    def is_downward_closed(self) -> bool:
        members = set(self.as_tuples())
        for nu in members:
            for j, v in enumerate(nu):
                if v > 0 and nu[:j] + (v - 1,) + nu[j + 1:] not in members:
                    return False
        return True

    @classmethod
    def from_indices(cls, indices, params=None):
        arr = np.asarray(sorted({tuple(map(int, r)) for r in indices}), dtype=np.int64)
        return cls(arr.reshape(len(arr), -1), dict(params or {}))


def build_index_set(a: float, b: float, ell: float, d: int) -> MultiIndexSet:
    """All nu in N_0^d with sum_j log(a + j b) nu_j < ell."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if ell <= 0:
        raise ValueError("ell must be positive")
    weights = []
    for j in range(1, d + 1):
        arg = a + j * b
        if arg <= 1.0:
            raise ValueError(
                f"log(a + j*b) = log({arg:g}) <= 0 at j={j}: index set would be unbounded"
            )
        weights.append(math.log(arg))

    out = []
    nu = [0] * d

    # weights need not be monotone, so every coordinate is visited
    def rec(k, budget):
        if k == d:
            out.append(tuple(nu))
            return
        v = 0
        while v * weights[k] < budget:
            nu[k] = v
            rec(k + 1, budget - v * weights[k])
            v += 1
        nu[k] = 0

    rec(0, ell)
    return MultiIndexSet(np.asarray(sorted(out), dtype=np.int64).reshape(-1, d),
                         {"a": a, "b": b, "ell": ell})


def smolyak_coefficients(index_set: MultiIndexSet) -> dict:
    """zeta_nu = sum over e in {0,1}^d with nu + e in the set of (-1)^|e|; zeros dropped.

    Only coordinates j with nu + e_j in the set can appear in e (downward
    closedness), which keeps the enumeration small in high dimension.
    """
    members = set(index_set.as_tuples())
    d = index_set.dim
    coeffs = {}
    for nu in members:
        up = [j for j in range(d) if nu[:j] + (nu[j] + 1,) + nu[j + 1:] in members]
        # depth-first over subsets of ``up`` in increasing order; a subset can
        # only lie in the set if all its sub-subsets do, so prune on the fly
        total = 0
        stack = [(list(nu), 0, 0)]
        while stack:
            cand, start, size = stack.pop()
            total += (-1) ** size
            for t in range(start, len(up)):
                j = up[t]
                cand[j] += 1
                if tuple(cand) in members:
                    stack.append((cand.copy(), t + 1, size + 1))
                cand[j] -= 1
        if total:
            coeffs[nu] = total
    return coeffs


# ---------------------------------------------------------------- 1-D nodes

def barycentric_weights(nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.float64)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


@functools.lru_cache(maxsize=None)
def _leja_sequence(count: int) -> tuple:
    grid = np.linspace(-1.0, 1.0, LEJA_CANDIDATES)
    nodes = [0.0]
    if count > 1:
        nodes.append(1.0)  # the +-1 tie goes to +1 by convention
    with np.errstate(divide="ignore"):
        logprod = np.zeros_like(grid)
        for xi in nodes:
            logprod += np.log(np.abs(grid - xi))
        while len(nodes) < count:
            k = int(np.argmax(logprod))  # first maximizer = leftmost
            xi = float(grid[k])
            nodes.append(xi)
            logprod += np.log(np.abs(grid - xi))
    return tuple(nodes)


class NodeFamily:
    """Nested 1-D node sequence with per-level barycentric weights.

    Level ``l`` uses the prefix ``nodes[:l + 1]``.
    """

    def __init__(self, nodes, kind="custom"):
        self.nodes = np.asarray(nodes, dtype=np.float64)
        self.kind = kind
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ValueError("nodes must be pairwise distinct")
        self._weights = {}

    def __len__(self):
        return len(self.nodes)

    def weights(self, level: int) -> np.ndarray:
        if level not in self._weights:
            if level + 1 > len(self.nodes):
                raise ValueError(f"level {level} needs {level + 1} nodes, family has {len(self.nodes)}")
            self._weights[level] = barycentric_weights(self.nodes[: level + 1])
        return self._weights[level]

    def basis(self, level: int, points) -> np.ndarray:
        return lagrange_basis(self.nodes[: level + 1], self.weights(level), points)

    def basis_derivative(self, level: int, points) -> np.ndarray:
        return lagrange_basis_derivative(self.nodes[: level + 1], self.weights(level), points)

    def extended(self, count: int) -> "NodeFamily":
        if count <= len(self) or self.kind != "leja":
            return self
        return leja_nodes(count)


def leja_nodes(count: int) -> NodeFamily:
    """Greedy Leja sequence on [-1, 1]: 0, 1, -1, then argmax of prod |xi - xi_i|
    over a uniform grid of 10^5 + 1 candidates, ties to the leftmost candidate."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return NodeFamily(_leja_sequence(int(count)), kind="leja")


def lagrange_basis(nodes, weights, points) -> np.ndarray:
    """Barycentric Lagrange basis values, shape (P, len(nodes))."""
    nodes = np.asarray(nodes, dtype=np.float64)
    pts = np.atleast_1d(np.asarray(points, dtype=np.float64))
    diff = pts[:, None] - nodes[None, :]
    hit = np.abs(diff) < NODE_TOL
    diff[hit] = 1.0
    t = weights[None, :] / diff
    with np.errstate(divide="ignore", invalid="ignore"):
        L = t / t.sum(axis=1, keepdims=True)   # rows hitting a node are overwritten below
    rows = np.flatnonzero(hit.any(axis=1))
    if rows.size:
        L[rows] = 0.0
        L[rows, np.argmax(hit[rows], axis=1)] = 1.0
    return L


def differentiation_matrix(nodes, weights) -> np.ndarray:
    """D[i, j] = L_j'(xi_i)."""
    nodes = np.asarray(nodes, dtype=np.float64)
    n = nodes.size
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (weights[j] / weights[i]) / (nodes[i] - nodes[j])
        D[i, i] = -D[i].sum()
    return D


def lagrange_basis_derivative(nodes, weights, points) -> np.ndarray:
    """d/dc of the barycentric Lagrange basis, shape (P, len(nodes))."""
    nodes = np.asarray(nodes, dtype=np.float64)
    pts = np.atleast_1d(np.asarray(points, dtype=np.float64))
    if nodes.size == 1:
        return np.zeros((pts.size, 1))
    diff = pts[:, None] - nodes[None, :]
    near = np.abs(diff) < DERIV_NODE_TOL
    diff[near] = 1.0
    t = weights[None, :] / diff
    with np.errstate(divide="ignore", invalid="ignore"):   # rows near a node are overwritten below
        S = t.sum(axis=1, keepdims=True)
        T = (t / diff).sum(axis=1, keepdims=True)
        dL = (t / S) * (T / S - 1.0 / diff)
    rows = np.flatnonzero(near.any(axis=1))
    if rows.size:
        D = differentiation_matrix(nodes, weights)
        dL[rows] = D[np.argmax(near[rows], axis=1)]
    return dL


def interp_eval_1d(nodes, weights, values, c):
    """Barycentric interpolant through (nodes, values) at c (scalar or array)."""
    L = lagrange_basis(nodes, np.asarray(weights, dtype=np.float64), c)
    out = L @ np.asarray(values, dtype=np.float64)
    return float(out[0]) if np.ndim(c) == 0 else out


def lebesgue_estimate(nodes, grid_points: int = 10_000) -> float:
    """max over a uniform grid on [-1, 1] of sum_i |L_i(c)| (a lower bound)."""
    nodes = np.asarray(nodes, dtype=np.float64)
    grid = np.linspace(-1.0, 1.0, grid_points)
    L = lagrange_basis(nodes, barycentric_weights(nodes), grid)
    return float(np.max(np.abs(L).sum(axis=1)))


# ---------------------------------------------------------------- surrogate

class SparseGridSurrogate:
    """Vector-valued Smolyak interpolant sharing one index set across outputs."""

    def __init__(self, index_set: MultiIndexSet, values: np.ndarray, nodes: NodeFamily,
                 scale=None, zeta: dict | None = None, n_probes: int | None = None):
        self.index_set = index_set
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        max_level = int(index_set.indices.max()) if len(index_set) else 0
        self.nodes = nodes.extended(max_level + 1)
        self.d_in = index_set.dim
        self.d_out = self.values.shape[1]
        self.scale = np.ones(self.d_in) if scale is None else np.asarray(scale, dtype=np.float64)
        self.zeta = smolyak_coefficients(index_set) if zeta is None else zeta
        self.n_probes = len(index_set) if n_probes is None else n_probes
        self._plan = self._make_plan()

    # the point of multi-index mu is (xi_{mu_1}, ..., xi_{mu_d}); nested nodes make
    # the union of all tensor sub-grids exactly {mu in Lambda}
    def _make_plan(self):
        pos = {mu: i for i, mu in enumerate(self.index_set.as_tuples())}
        plan = []
        for nu, z in sorted(self.zeta.items()):
            active = np.flatnonzero(np.asarray(nu) > 0)
            levels = [nu[k] for k in active]
            combos = list(itertools.product(*[range(l + 1) for l in levels]))
            box = np.array(combos, dtype=np.int64).reshape(len(combos), active.size)
            rows = []
            for sub in box:
                mu = [0] * self.d_in
                for k, v in zip(active, sub):
                    mu[k] = int(v)
                rows.append(pos[tuple(mu)])
            plan.append((float(z), active, np.asarray(levels, dtype=np.int64), box,
                         np.asarray(rows, dtype=np.int64)))
        return plan

    @property
    def parameter_count(self) -> int:
        return int(self.values.size)

    def grid_points(self) -> np.ndarray:
        """Interpolation points in the public (scaled) coordinates, one row per index."""
        return self.nodes.nodes[self.index_set.indices] * self.scale

    def _tables(self, U, derivative=False):
        tables = {}
        for _, active, levels, _, _ in self._plan:
            for k, l in zip(active, levels):
                key = (int(k), int(l))
                if key not in tables:
                    b = self.nodes.basis(l, U[:, k])
                    db = self.nodes.basis_derivative(l, U[:, k]) if derivative else None
                    tables[key] = (b, db)
        return tables

    def _as_batch(self, C):
        C = np.asarray(C, dtype=np.float64)
        single = C.ndim == 1
        C = np.atleast_2d(C)
        if C.shape[1] != self.d_in:
            raise ValueError(f"input has {C.shape[1]} coordinates, surrogate expects {self.d_in}")
        return C / self.scale, single

    def evaluate(self, C) -> np.ndarray:
        U, single = self._as_batch(C)
        P = U.shape[0]
        tables = self._tables(U)
        out = np.zeros((P, self.d_out))
        for z, active, levels, box, rows in self._plan:
            W = np.ones((P, rows.size))
            for t, (k, l) in enumerate(zip(active, levels)):
                W *= tables[(int(k), int(l))][0][:, box[:, t]]
            out += z * (W @ self.values[rows])
        return out[0] if single else out

    __call__ = evaluate

    def jacobian(self, C) -> np.ndarray:
        """d output / d c, shape (d_out, d_in) or (P, d_out, d_in)."""
        U, single = self._as_batch(C)
        P = U.shape[0]
        tables = self._tables(U, derivative=True)
        jac = np.zeros((P, self.d_out, self.d_in))
        for z, active, levels, box, rows in self._plan:
            vals = self.values[rows]
            for t, k in enumerate(active):
                W = np.ones((P, rows.size))
                for t2, (k2, l2) in enumerate(zip(active, levels)):
                    b, db = tables[(int(k2), int(l2))]
                    W *= (db if t2 == t else b)[:, box[:, t2]]
                jac[:, :, k] += z * (W @ vals)
        jac /= self.scale[None, None, :]
        return jac[0] if single else jac

    def map_values(self, fn) -> "SparseGridSurrogate":
        """Surrogate of ``fn`` applied to the outputs; exact for linear ``fn``."""
        return SparseGridSurrogate(self.index_set, fn(self.values), self.nodes, self.scale,
                                   self.zeta, self.n_probes)

    def save(self, path, extra: dict | None = None):
        manifest = {
            "kind": "sparse_grid",
            "index_set": self.index_set.as_tuples(),
            "params": self.index_set.params,
            "node_kind": self.nodes.kind,
            "node_count": len(self.nodes),
            "d_in": self.d_in,
            "d_out": self.d_out,
            "n_probes": self.n_probes,
            "layout": "values.bin is row-major (|Lambda| x d_out), row i <-> index_set[i]",
        }
        if self.nodes.kind != "leja":
            manifest["nodes"] = self.nodes.nodes.tolist()
        manifest.update(extra or {})
        storage.write_container(path, manifest, {"values": self.values, "scale": self.scale})

    @classmethod
    def load(cls, path):
        manifest, arrays = storage.read_container(path)
        d = manifest["d_in"]
        idx = np.asarray(manifest["index_set"], dtype=np.int64).reshape(-1, d)
        nodes = (leja_nodes(manifest["node_count"]) if manifest["node_kind"] == "leja"
                 else NodeFamily(manifest["nodes"]))
        return cls(MultiIndexSet(idx, manifest.get("params", {})), arrays["values"], nodes,
                   arrays["scale"], n_probes=manifest.get("n_probes"))


def build_sg_surrogate(probe, index_set: MultiIndexSet, nodes: NodeFamily | None = None,
                       scale=None) -> SparseGridSurrogate:
    """Probe once per unique grid point and assemble the Smolyak interpolant.

    ``probe`` maps a point c (length d_in, in scaled coordinates) to a vector.
    """
    if not index_set.is_downward_closed():
        raise ValueError("index set is not downward closed")
    max_level = int(index_set.indices.max()) if len(index_set) else 0
    nodes = leja_nodes(max_level + 1) if nodes is None else nodes.extended(max_level + 1)
    if len(nodes) < max_level + 1:
        raise ValueError(f"node family has {len(nodes)} nodes, index set needs {max_level + 1}")
    d = index_set.dim
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
    points = nodes.nodes[index_set.indices] * scale
    values = [np.atleast_1d(np.asarray(probe(p), dtype=np.float64)) for p in points]
    return SparseGridSurrogate(index_set, np.vstack(values), nodes, scale, n_probes=len(points))


def sg_eval(surrogate: SparseGridSurrogate, c):
    return surrogate.evaluate(c)


def sg_eval_batch(surrogate: SparseGridSurrogate, C):
    return surrogate.evaluate(np.atleast_2d(C))


def sg_jacobian(surrogate: SparseGridSurrogate, c):
    return surrogate.jacobian(c)
