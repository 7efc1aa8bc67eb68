"""Tensor-train collocation surrogates.

A surrogate's TT has an output core first, shape (1, d_out, r_0), followed by
one core per parametric dimension, shape (r_{k-1}, nu_k + 1, r_k) with
r_d = 1.  Mode k of the tensor is indexed by the Leja prefix of length
nu_k + 1, and values between nodes come from barycentric interpolation in
each core separately.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import storage
from .sparse_grid import NodeFamily, leja_nodes

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- TT format

class TensorTrain:
    """Plain list of 3-way cores with matching bond dimensions."""

    def __init__(self, cores):
        self.cores = [np.asarray(c, dtype=np.float64) for c in cores]
        for k, (a, b) in enumerate(zip(self.cores[:-1], self.cores[1:])):
            if a.shape[2] != b.shape[0]:
                raise ValueError(f"rank mismatch between cores {k} and {k + 1}: {a.shape} vs {b.shape}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")

    @property
    def ranks(self):
        return [c.shape[2] for c in self.cores[:-1]]

    @property
    def mode_sizes(self):
        return [c.shape[1] for c in self.cores]

    @property
    def parameter_count(self) -> int:
        return int(sum(c.size for c in self.cores))

    def copy(self):
        return TensorTrain([c.copy() for c in self.cores])

    def full(self) -> np.ndarray:
        out = self.cores[0]
        for c in self.cores[1:]:
            out = np.tensordot(out, c, axes=(-1, 0))
        return out[0, ..., 0]

    def norm(self) -> float:
        # contract <tt, tt> core by core
        G = np.ones((1, 1))
        for c in self.cores:
            G = np.einsum("ab,aic,bid->cd", G, c, c)
        return float(np.sqrt(max(G[0, 0], 0.0)))

    def entries(self, idx: np.ndarray) -> np.ndarray:
        """Entries at the rows of ``idx`` (P, n_modes)."""
        idx = np.atleast_2d(idx)
        v = self.cores[0][0, idx[:, 0], :]
        for k, c in enumerate(self.cores[1:], start=1):
            v = np.einsum("pa,pab->pb", v, c[:, idx[:, k], :].transpose(1, 0, 2))
        return v[:, 0]


def tt_round(tt: TensorTrain, rel_tol: float) -> TensorTrain:
    """Right-to-left QR orthogonalization, then left-to-right truncated SVDs.

    Each of the d - 1 truncations discards at most rel_tol / sqrt(d - 1) * ||tt||,
    so the total Frobenius error is at most rel_tol * ||tt||.  The result is
    left-orthogonal in every core but the last.
    """
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    cores = [c.copy() for c in tt.cores]
    d = len(cores)
    for k in range(d - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        Q, R = np.linalg.qr(cores[k].reshape(r0, n * r1).T)
        cores[k] = Q.T.reshape(-1, n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], R.T, axes=(2, 0))
    nrm = float(np.linalg.norm(cores[0]))
    if d == 1 or nrm == 0.0:
        return TensorTrain(cores)
    delta = rel_tol / math.sqrt(d - 1) * nrm
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        U, S, Vt = np.linalg.svd(cores[k].reshape(r0 * n, r1), full_matrices=False)
        tail = np.sqrt(np.cumsum(S[::-1] ** 2))[::-1]  # tail[i] = ||S[i:]||
        keep = int(np.sum(tail > delta))
        keep = max(keep, 1)
        cores[k] = U[:, :keep].reshape(r0, n, keep)
        cores[k + 1] = np.tensordot(S[:keep, None] * Vt[:keep], cores[k + 1], axes=(1, 0))
    return TensorTrain(cores)


# ---------------------------------------------------------------- degrees

@dataclass(frozen=True)
class DegreeSchedule:
    nu: tuple
    mode: str
    nu_max: int

    @property
    def d_in(self) -> int:
        return len(self.nu)

    @property
    def mode_sizes(self):
        return [v + 1 for v in self.nu]


def degree_schedule(nu_max: int, mode: str, d: int) -> DegreeSchedule:
    """Isotropic nu_k = nu_max, or nu_k = ceil(nu_max / log2(k + 1)) - 1.

    In anisotropic mode the dimension is cut at the last k with nu_k > 0.
    """
    if mode == "iso":
        return DegreeSchedule(tuple([int(nu_max)] * d), mode, int(nu_max))
    if mode != "aniso":
        raise ValueError(f"unknown schedule mode {mode!r}")
    if nu_max < 2:
        raise ValueError("anisotropic schedule needs nu_max >= 2")
    nu = [math.ceil(nu_max / math.log2(k + 1)) - 1 for k in range(1, d + 1)]
    positive = [k for k, v in enumerate(nu, start=1) if v > 0]
    d_eff = max(positive) if positive else 0
    return DegreeSchedule(tuple(nu[:d_eff]), mode, int(nu_max))


# ---------------------------------------------------------------- cross

def maxvol(A: np.ndarray, tol: float = 1e-2, max_iter: int = 500) -> np.ndarray:
    """Rows of a tall A (n x r) spanning a locally maximal-volume r x r submatrix.

    Swaps continue until every entry of A A[rows]^-1 is at most 1 + tol.
    """
    n, r = A.shape
    if r == 0:
        return np.zeros(0, dtype=np.int64)
    if n <= r:
        return np.arange(n, dtype=np.int64)
    P, _, _ = scipy.linalg.lu(A)
    rows = np.argmax(P, axis=0)[:r].astype(np.int64)
    B = np.linalg.solve(A[rows].T, A.T).T
    for _ in range(max_iter):
        i, j = np.unravel_index(np.argmax(np.abs(B)), B.shape)
        if abs(B[i, j]) <= 1.0 + tol:
            break
        rows[j] = i
        bj = B[:, j].copy()
        ri = B[i].copy()
        ri[j] -= 1.0
        B -= np.outer(bj, ri) / bj[i]
    return rows


@dataclass
class CrossInfo:
    n_probes: int = 0
    sweeps: int = 0
    converged: bool = False
    plateau: bool = False
    errors: list = field(default_factory=list)
    probes_per_sweep: list = field(default_factory=list)
    probe_seconds: float = 0.0


class _CachedProbe:
    def __init__(self, probe, d_out):
        self.probe = probe
        self.d_out = d_out
        self.cache = {}
        self.seconds = 0.0

    def __len__(self):
        return len(self.cache)

    def values(self, points):
        """points: (P, d) int array -> (P, d_out)."""
        out = np.empty((points.shape[0], self.d_out))
        for p, row in enumerate(points):
            key = tuple(int(v) for v in row)
            val = self.cache.get(key)
            if val is None:
                t0 = time.perf_counter()
                val = np.asarray(self.probe(key), dtype=np.float64).reshape(self.d_out)
                self.seconds += time.perf_counter() - t0
                self.cache[key] = val
            out[p] = val
        return out


def _fiber(cached, left, n_k, right):
    """T(left[a], j, right[b]) as an array (r_left, n_k, r_right).

    ``left`` rows are (i_out, j_1, ..., j_{k-1}); ``right`` rows are
    (j_{k+1}, ..., j_d).
    """
    ra, rb = left.shape[0], right.shape[0]
    a, j, b = np.meshgrid(np.arange(ra), np.arange(n_k), np.arange(rb), indexing="ij")
    a, j, b = a.ravel(), j.ravel(), b.ravel()
    pts = np.column_stack([left[a, 1:], j, right[b]]).astype(np.int64)
    vals = cached.values(pts)
    return vals[np.arange(a.size), left[a, 0]].reshape(ra, n_k, rb)


def _reveal(F, rank_cap, rank_tol):
    U, S, _ = np.linalg.svd(F, full_matrices=False)
    if S.size == 0 or S[0] == 0.0:
        return U[:, :1]
    r = int(np.sum(S > rank_tol * S[0]))
    return U[:, : max(1, min(r, rank_cap))]


def _interp_core(Q, rows):
    return np.linalg.solve(Q[rows].T, Q.T).T


def tt_cross(probe, mode_sizes, d_out: int | None, rank_cap: int, sweeps: int = 2,
             rank_tol: float = 1e-10, tol: float = 1e-10, seed=0):
    """Alternating maxvol cross interpolation of T(i, j_1, ..., j_d) = probe(j)[i].

    ``probe`` receives a tuple of parametric indices and returns all d_out
    output components at once, so the output mode is never sampled
    adaptively. Each sweep is a left-to-right pass followed by a
    right-to-left pass. Values probed in a pass that the previous iterate
    can predict serve as the convergence check, so no extra probes are spent
    on validation.

    Pass ``d_out=None`` to read the output size off the first probe.
    Returns ``(TensorTrain, CrossInfo)``.
    """
    if rank_cap < 1 or sweeps < 1:
        raise ValueError("rank_cap and sweeps must be >= 1")
    d = len(mode_sizes)
    if d < 1:
        raise ValueError("need at least one parametric mode")
    sizes = [int(s) for s in mode_sizes]
    rng = np.random.default_rng(seed)
    if d_out is None:
        first = np.atleast_1d(np.asarray(probe(tuple([0] * d)), dtype=np.float64))
        d_out = first.size
        cached = _CachedProbe(probe, d_out)
        cached.cache[tuple([0] * d)] = first
    else:
        cached = _CachedProbe(probe, d_out)
    info = CrossInfo()

    # largest admissible rank at bond k (between core k and k+1, core 0 = output)
    left_cap = [d_out]
    for s in sizes[:-1]:
        left_cap.append(left_cap[-1] * s)
    right_cap = [int(np.prod(sizes[k:])) for k in range(d)]
    bond_cap = [min(rank_cap, lc, rc) for lc, rc in zip(left_cap, right_cap)]

    # nested random right index sets J_0..J_{d-1}
    def grow_right(J, target):
        for _ in range(50 * max(target)):
            if all(len(J[k]) >= target[k] for k in range(d)):
                break
            full = [int(rng.integers(s)) for s in sizes]
            for k in range(d - 1, -1, -1):
                suffix = tuple(full[k:])
                if len(J[k]) < target[k] and suffix not in J[k]:
                    # keep nestedness: the tail of a new member must already be in J[k+1]
                    if k == d - 1 or suffix[1:] in J[k + 1]:
                        J[k].append(suffix)
        return J

    J = grow_right([[] for _ in range(d)], bond_cap)
    prev = None
    prev_err = None
    tt = None

    for sweep in range(sweeps):
        before = len(cached)
        num = 0.0
        den = 0.0

        def check(F, left, right, k):
            nonlocal num, den
            if prev is None:
                return
            a, j, b = np.meshgrid(np.arange(left.shape[0]), np.arange(sizes[k - 1]),
                                  np.arange(right.shape[0]), indexing="ij")
            idx = np.column_stack([left[a.ravel()], j.ravel(), right[b.ravel()]])
            pred = prev.entries(idx).reshape(F.shape)
            num += float(np.sum((F - pred) ** 2))
            den += float(np.sum(F ** 2))

        # ---- left-to-right
        cores = [None] * (d + 1)
        Jarr = [np.asarray(Jk, dtype=np.int64).reshape(len(Jk), d - k) for k, Jk in enumerate(J)]
        F0 = cached.values(Jarr[0]).T                       # (d_out, r0)
        Q = _reveal(F0, bond_cap[0], rank_tol)
        rows = maxvol(Q)
        cores[0] = _interp_core(Q, rows)[None]
        I = np.asarray(rows, dtype=np.int64)[:, None]       # left set over (i_out,)
        left_sets = [None] * (d + 1)
        left_sets[1] = I
        for k in range(1, d):
            F = _fiber(cached, I, sizes[k - 1], Jarr[k])
            check(F, I, Jarr[k], k)
            ra, n_k, rb = F.shape
            Q = _reveal(F.reshape(ra * n_k, rb), bond_cap[k], rank_tol)
            rows = maxvol(Q)
            cores[k] = _interp_core(Q, rows).reshape(ra, n_k, -1)
            I = np.column_stack([I[rows // n_k], rows % n_k])
            left_sets[k + 1] = I
        F = _fiber(cached, I, sizes[d - 1], np.zeros((1, 0), dtype=np.int64))
        check(F, I, np.zeros((1, 0), dtype=np.int64), d)
        cores[d] = F

        tt_fwd = TensorTrain(cores)
        if prev is None:
            prev = tt_fwd

        # ---- right-to-left
        cores = [None] * (d + 1)
        right = np.zeros((1, 0), dtype=np.int64)
        newJ = [None] * d
        for k in range(d, 0, -1):
            F = _fiber(cached, left_sets[k], sizes[k - 1], right)
            check(F, left_sets[k], right, k)
            ra, n_k, rb = F.shape
            Q = _reveal(F.reshape(ra, n_k * rb).T, bond_cap[k - 1], rank_tol)
            cols = maxvol(Q)
            cores[k] = _interp_core(Q, cols).T.reshape(-1, n_k, rb)
            right = np.column_stack([cols // rb, right[cols % rb]]).astype(np.int64)
            newJ[k - 1] = right
        cores[0] = cached.values(newJ[0]).T[None]
        tt = TensorTrain(cores)

        err = math.sqrt(num / den) if den > 0 else 0.0
        info.errors.append(err)
        info.sweeps = sweep + 1
        info.probes_per_sweep.append(len(cached) - before)
        J = [[tuple(int(v) for v in row) for row in Jk] for Jk in newJ]
        prev = tt
        if err <= tol:
            info.converged = True
            break
        if prev_err is not None and err > 0.9 * prev_err:
            info.plateau = True
        prev_err = err
        if sweep + 1 < sweeps:
            target = [min(len(J[k]) + 1, bond_cap[k]) for k in range(d)]
            J = grow_right(J, target)

    info.n_probes = len(cached)
    info.probe_seconds = cached.seconds
    return tt, info



# ---------------------------------------------------------------- surrogate

def _contract(B, core):
    # B: (P, n_k) basis values, core: (r0, n_k, r1) -> (P, r0, r1)
    return np.einsum("pj,ajb->pab", B, core)


def tt_eval(tt: TensorTrain, nodes: NodeFamily, nu, C) -> np.ndarray:
    """Evaluate a TT with output core at points ``C`` in [-1, 1]^d.

    ``nu[k]`` is the degree of parametric mode k, so core k + 1 has
    ``nu[k] + 1`` slices. Returns (d_out,) or (P, d_out).
    """
    C = np.asarray(C, dtype=np.float64)
    single = C.ndim == 1
    C = np.atleast_2d(C)
    R = np.ones((C.shape[0], 1))
    for k in range(len(nu) - 1, -1, -1):
        A = _contract(nodes.basis(nu[k], C[:, k]), tt.cores[k + 1])
        R = np.einsum("pab,pb->pa", A, R)
    out = R @ tt.cores[0][0].T
    return out[0] if single else out


class TTSurrogate:
    """Vector-valued TT collocation interpolant with per-coordinate input scaling."""

    def __init__(self, tt: TensorTrain, nu, nodes: NodeFamily | None = None, scale=None,
                 n_probes: int = 0, info: CrossInfo | None = None):
        self.tt = tt
        self.nu = tuple(int(v) for v in nu)
        if [c.shape[1] for c in tt.cores[1:]] != [v + 1 for v in self.nu]:
            raise ValueError("core mode sizes do not match the degree schedule")
        need = max(self.nu) + 1 if self.nu else 1
        self.nodes = leja_nodes(need) if nodes is None else nodes.extended(need)
        self.d_in = len(self.nu)
        self.d_out = tt.cores[0].shape[1]
        self.scale = np.ones(self.d_in) if scale is None else np.asarray(scale, dtype=np.float64)
        self.n_probes = int(n_probes)
        self.info = info

    @property
    def parameter_count(self) -> int:
        return self.tt.parameter_count

    @property
    def ranks(self):
        return self.tt.ranks

    def _as_batch(self, C):
        C = np.asarray(C, dtype=np.float64)
        single = C.ndim == 1
        C = np.atleast_2d(C)
        if C.shape[1] != self.d_in:
            raise ValueError(f"input has {C.shape[1]} coordinates, surrogate expects {self.d_in}")
        return C / self.scale, single

    def evaluate(self, C) -> np.ndarray:
        U, single = self._as_batch(C)
        out = tt_eval(self.tt, self.nodes, self.nu, U)
        return out[0] if single else out

    __call__ = evaluate

    def jacobian(self, C) -> np.ndarray:
        """d output / d c, shape (d_out, d_in) or (P, d_out, d_in)."""
        U, single = self._as_batch(C)
        P, d = U.shape
        A, dA = [], []
        for k in range(d):
            core = self.tt.cores[k + 1]
            A.append(_contract(self.nodes.basis(self.nu[k], U[:, k]), core))
            dA.append(_contract(self.nodes.basis_derivative(self.nu[k], U[:, k]), core))
        # right partial products R[k] = A_k ... A_{d-1} 1
        R = [None] * (d + 1)
        R[d] = np.ones((P, 1))
        for k in range(d - 1, -1, -1):
            R[k] = np.einsum("pab,pb->pa", A[k], R[k + 1])
        jac = np.empty((P, self.d_out, d))
        left = np.broadcast_to(self.tt.cores[0][0], (P,) + self.tt.cores[0][0].shape)
        for k in range(d):
            v = np.einsum("pab,pb->pa", dA[k], R[k + 1])
            jac[:, :, k] = np.einsum("por,pr->po", left, v)
            left = np.einsum("por,prs->pos", left, A[k])
        jac /= self.scale[None, None, :]
        return jac[0] if single else jac

    def map_values(self, fn) -> "TTSurrogate":
        """Apply a linear map to the outputs by transforming the output core only.

        ``fn`` acts on rows, like ``SparseGridSurrogate.map_values``.
        """
        core0 = np.asarray(fn(self.tt.cores[0][0].T)).T[None]
        return TTSurrogate(TensorTrain([core0] + self.tt.cores[1:]), self.nu, self.nodes,
                           self.scale, self.n_probes, self.info)

    def save(self, path, extra: dict | None = None):
        manifest = {
            "kind": "tensor_train",
            "nu": list(self.nu),
            "ranks": self.ranks,
            "node_kind": self.nodes.kind,
            "node_count": len(self.nodes),
            "d_in": self.d_in,
            "d_out": self.d_out,
            "n_probes": self.n_probes,
            "n_cores": len(self.tt.cores),
            "layout": "core_k.bin is row-major (r_{k-1}, mode_k, r_k); core_0 holds the output mode",
        }
        if self.nodes.kind != "leja":
            manifest["nodes"] = self.nodes.nodes.tolist()
        manifest.update(extra or {})
        arrays = {f"core_{k}": c for k, c in enumerate(self.tt.cores)}
        arrays["scale"] = self.scale
        storage.write_container(path, manifest, arrays)

    @classmethod
    def load(cls, path):
        manifest, arrays = storage.read_container(path)
        cores = [arrays[f"core_{k}"] for k in range(manifest["n_cores"])]
        nodes = (leja_nodes(manifest["node_count"]) if manifest["node_kind"] == "leja"
                 else NodeFamily(manifest["nodes"]))
        return cls(TensorTrain(cores), manifest["nu"], nodes, arrays["scale"],
                   manifest.get("n_probes", 0))


def build_tt_surrogate(probe, schedule: DegreeSchedule, rank_cap: int, sweeps: int = 2,
                       nodes: NodeFamily | None = None, scale=None, seed=0, **cross_kw) -> TTSurrogate:
    """TT-cross on the collocation tensor of ``probe`` (a map c -> R^d_out).

    The surrogate's ``n_probes`` is the number of distinct points probed.
    """
    nu = schedule.nu
    need = max(nu) + 1
    nodes = leja_nodes(need) if nodes is None else nodes.extended(need)
    scale = np.ones(len(nu)) if scale is None else np.asarray(scale, dtype=np.float64)
    xi = nodes.nodes

    def index_probe(idx):
        return probe(xi[np.asarray(idx, dtype=np.int64)] * scale)

    tt, info = tt_cross(index_probe, schedule.mode_sizes, None, rank_cap, sweeps, seed=seed, **cross_kw)
    if not info.converged:
        log.info("tt_cross stopped after %d sweeps without reaching tolerance (last check %.3g%s)",
                 info.sweeps, info.errors[-1] if info.errors else float("nan"),
                 ", plateau" if info.plateau else "")
    return TTSurrogate(tt, nu, nodes, scale, info.n_probes, info)


def tt_jacobian(surrogate: TTSurrogate, c):
    return surrogate.jacobian(c)
