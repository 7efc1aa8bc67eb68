"""Q1 finite elements for the log-diffusion problem on the unit square.

Nodes are numbered row-major with the x index running fastest:
``node(i, j) = j * (n + 1) + i`` for ``0 <= i, j <= n``.

The forward problem is ``-div(exp(x) grad y) = 1`` with ``y = 0`` on the
boundary. ``exp(x)`` is evaluated at 2x2 Gauss points after Q1 interpolation
of the nodal field ``x``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

_GAUSS_1D = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class SolverError(RuntimeError):
    """Raised when a linear solve fails or returns an unusable result."""


@dataclass(frozen=True)
class Grid2D:
    n_cells_per_side: int

    def __post_init__(self):
        if int(self.n_cells_per_side) != self.n_cells_per_side or self.n_cells_per_side < 2:
            raise ValueError(f"n_cells_per_side must be an integer >= 2, got {self.n_cells_per_side}")

    @property
    def n(self) -> int:
        return self.n_cells_per_side

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def dof_count(self) -> int:
        return (self.n + 1) ** 2

    def node(self, i, j):
        return j * (self.n + 1) + i

    def coordinates(self) -> np.ndarray:
        """(dof_count, 2) array of node coordinates."""
        t = np.linspace(0.0, 1.0, self.n + 1)
        xx, yy = np.meshgrid(t, t)  # yy varies along rows -> x fastest in ravel
        return np.column_stack([xx.ravel(), yy.ravel()])

    def cells(self) -> np.ndarray:
        """(n*n, 4) node indices per cell, local order (0,0),(1,0),(0,1),(1,1)."""
        ci, cj = np.meshgrid(np.arange(self.n), np.arange(self.n))
        ci, cj = ci.ravel(), cj.ravel()
        return np.column_stack([
            self.node(ci, cj), self.node(ci + 1, cj),
            self.node(ci, cj + 1), self.node(ci + 1, cj + 1),
        ])

    def boundary_dofs(self) -> np.ndarray:
        xy = self.coordinates()
        on = (np.isclose(xy[:, 0], 0) | np.isclose(xy[:, 0], 1)
              | np.isclose(xy[:, 1], 0) | np.isclose(xy[:, 1], 1))
        return np.flatnonzero(on)


def _reference_element():
    """Shape values and reference gradients at the four Gauss points.

    Returns phi (4q, 4a), grads (4q, 4a, 2) on the unit reference square and
    the Gauss weights (4q,), which sum to one.
    """
    gx, gy = np.meshgrid(_GAUSS_1D, _GAUSS_1D)
    gx, gy = gx.ravel(), gy.ravel()
    # local node a <-> (ax, ay)
    ax = np.array([0, 1, 0, 1])
    ay = np.array([0, 0, 1, 1])
    hat = lambda t, a: np.where(a == 1, t, 1.0 - t)
    dhat = lambda a: np.where(a == 1, 1.0, -1.0)
    phi = hat(gx[:, None], ax[None, :]) * hat(gy[:, None], ay[None, :])
    grads = np.empty((4, 4, 2))
    grads[..., 0] = dhat(ax)[None, :] * hat(gy[:, None], ay[None, :])
    grads[..., 1] = hat(gx[:, None], ax[None, :]) * dhat(ay)[None, :]
    weights = np.full(4, 0.25)
    return phi, grads, weights


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Assembled matrices and the index bookkeeping needed for fast reassembly."""

    grid: Grid2D
    mass: sp.csr_matrix
    stiffness_unit: sp.csr_matrix
    h1_gram: sp.csr_matrix
    dirichlet_dofs: np.ndarray
    interior_dofs: np.ndarray
    cells: np.ndarray
    phi: np.ndarray              # (4q, 4a) shape values at Gauss points
    stiff_q: np.ndarray          # (4q, 16) per-point element stiffness, unit coefficient
    _scatter_interior: sp.csr_matrix = field(repr=False)   # E*16 values -> interior CSR data
    _interior_pattern: sp.csr_matrix = field(repr=False)
    _scatter_nodes: sp.csr_matrix = field(repr=False)      # E*4 values -> nodal vector
    load: np.ndarray = field(repr=False, default=None)     # integral of each hat function

    @property
    def dof_count(self) -> int:
        return self.grid.dof_count

    def coefficient_at_points(self, x: np.ndarray) -> np.ndarray:
        """exp of the Q1-interpolated field at Gauss points, shape (E, 4q)."""
        with np.errstate(over="ignore"):   # overflow is reported by the solver as non-finite
            return np.exp(x[self.cells] @ self.phi.T)

    def interior_stiffness(self, kappa_q: np.ndarray) -> sp.csc_matrix:
        """Stiffness with pointwise coefficient kappa_q (E, 4q), interior rows/cols only."""
        vals = (kappa_q @ self.stiff_q).ravel()
        A = self._interior_pattern.copy()
        A.data = self._scatter_interior @ vals
        return A.tocsc()


def assemble_fem(grid: Grid2D) -> FemOperators:
    """Assemble mass, unit stiffness and H1 Gram on a uniform Q1 grid."""
    h = grid.h
    cells = grid.cells()
    n_el = cells.shape[0]
    m = grid.dof_count
    phi, grads, w = _reference_element()

    # h^2 (area) and 1/h^2 (gradient scaling) cancel for the stiffness
    stiff_q = np.einsum("q,qad,qbd->qab", w, grads, grads).reshape(4, 16)
    mass_el = h * h * np.einsum("q,qa,qb->ab", w, phi, phi)

    rows = np.repeat(cells, 4, axis=1).ravel()
    cols = np.tile(cells, (1, 4)).ravel()

    def build(vals):
        return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))

    mass = build(np.tile(mass_el.ravel(), n_el))
    stiffness = build(np.tile(stiff_q.sum(axis=0), n_el))
    mass.sum_duplicates()
    stiffness.sum_duplicates()

    bnd = grid.boundary_dofs()
    interior = np.setdiff1d(np.arange(m), bnd)
    pos = -np.ones(m, dtype=np.int64)
    pos[interior] = np.arange(interior.size)

    # scatter from element-local entries to the CSR data of the interior matrix
    keep = (pos[rows] >= 0) & (pos[cols] >= 0)
    r_int, c_int = pos[rows[keep]], pos[cols[keep]]
    n_int = interior.size
    pattern = sp.csr_matrix((np.ones(keep.sum()), (r_int, c_int)), shape=(n_int, n_int))
    pattern.sum_duplicates()
    pattern.sort_indices()
    lookup = sp.csr_matrix(
        (np.arange(pattern.nnz, dtype=np.float64) + 1, pattern.indices, pattern.indptr),
        shape=pattern.shape,
    )
    slot = np.asarray(lookup[r_int, c_int]).ravel().astype(np.int64) - 1
    scatter_int = sp.csr_matrix(
        (np.ones(slot.size), (slot, np.flatnonzero(keep))),
        shape=(pattern.nnz, n_el * 16),
    )
    scatter_nodes = sp.csr_matrix(
        (np.ones(n_el * 4), (cells.ravel(), np.arange(n_el * 4))), shape=(m, n_el * 4)
    )

    return FemOperators(
        grid=grid,
        mass=mass,
        stiffness_unit=stiffness,
        h1_gram=(mass + stiffness).tocsr(),
        dirichlet_dofs=bnd,
        interior_dofs=interior,
        cells=cells,
        phi=phi,
        stiff_q=stiff_q,
        _scatter_interior=scatter_int,
        _interior_pattern=pattern,
        _scatter_nodes=scatter_nodes,
        load=np.asarray(mass.sum(axis=1)).ravel(),
    )


class DiffusionSystem:
    """Factorized forward operator for one input field.

    The factorization is built once and reused by ``solve`` and every
    ``tangent`` call, so many directional derivatives cost one triangular
    solve pair each.
    """

    def __init__(self, ops: FemOperators, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (ops.dof_count,):
            raise ValueError(f"field has shape {x.shape}, expected ({ops.dof_count},)")
        if not np.all(np.isfinite(x)):
            raise SolverError("input field contains non-finite values")
        self.ops = ops
        self.x = x
        self.kappa_q = ops.coefficient_at_points(x)
        if not np.all(np.isfinite(self.kappa_q)):
            raise SolverError("exp(x) overflowed at quadrature points")
        self.A = ops.interior_stiffness(self.kappa_q)
        try:
            self._lu = spla.splu(
                self.A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"factorization failed: {exc}") from exc
        self._y = None

    def _solve_interior(self, rhs):
        sol = self._lu.solve(rhs)
        res = self.A @ sol - rhs
        scale = np.linalg.norm(rhs, axis=0)
        bad = ~np.all(np.isfinite(sol))
        rel = np.linalg.norm(res, axis=0) / np.where(scale > 0, scale, 1.0)
        if bad or np.any(rel > 1e-10):
            raise SolverError(f"linear solve inaccurate (relative residual {np.max(rel):.3e})")
        return sol

    def _expand(self, interior_vals):
        out = np.zeros((self.ops.dof_count,) + interior_vals.shape[1:])
        out[self.ops.interior_dofs] = interior_vals
        return out

    def solve(self) -> np.ndarray:
        if self._y is None:
            b = self.ops.load[self.ops.interior_dofs]
            self._y = self._expand(self._solve_interior(b))
        return self._y

    def tangent_rhs(self, h: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """Interior load vector(s) of the linearized problem, -K(h exp(x)) y."""
        ops = self.ops
        y = self.solve() if y is None else y
        H = np.asarray(h, dtype=np.float64)
        vec = H.ndim == 1
        if vec:
            H = H[:, None]
        h_q = np.einsum("eak,qa->eqk", H[ops.cells], ops.phi)
        gy = np.einsum("qab,eb->eqa", ops.stiff_q.reshape(4, 4, 4), y[ops.cells])
        contrib = -np.einsum("eq,eqk,eqa->eak", self.kappa_q, h_q, gy)
        rhs = ops._scatter_nodes @ contrib.reshape(-1, H.shape[1])
        rhs = rhs[ops.interior_dofs]
        return rhs[:, 0] if vec else rhs

    def tangent(self, h: np.ndarray) -> np.ndarray:
        """Directional derivative(s) DG(x)[h]; ``h`` may be (m,) or (m, k)."""
        rhs = self.tangent_rhs(h)
        return self._expand(self._solve_interior(rhs))


def solve_diffusion(ops: FemOperators, x: np.ndarray) -> np.ndarray:
    return DiffusionSystem(ops, x).solve()


def solve_tangent(ops: FemOperators, x, y, h) -> np.ndarray:
    """Solve -div(e^x grad z) = div(h e^x grad y), z = 0 on the boundary.

    Pass ``h`` as an (m, k) array to get all k directions from one
    factorization; for repeated calls hold on to a :class:`DiffusionSystem`.
    """
    system = DiffusionSystem(ops, x)
    system._y = np.asarray(y, dtype=np.float64)
    return system.tangent(h)


def matern_eigenbasis(grid: Grid2D, gamma: float, delta: float, count: int,
                      ops: FemOperators | None = None):
    """Leading eigenpairs of (gamma Id - delta Laplace)^-2 with natural BCs.

    Returns ``(mu, psi)``: eigenvalues sorted descending, and psi with the
    mass-orthonormal eigenfunctions as columns (dof_count, count).
    """
    if gamma <= 0 or delta <= 0:
        raise ValueError("gamma and delta must be positive")
    ops = assemble_fem(grid) if ops is None else ops
    m = ops.dof_count
    if not 1 <= count <= m:
        raise ValueError(f"count must be in [1, {m}], got {count}")
    A = (gamma * ops.mass + delta * ops.stiffness_unit).tocsc()
    try:
        if m <= 5000:
            theta, vecs = scipy.linalg.eigh(
                A.toarray(), ops.mass.toarray(), subset_by_index=[0, count - 1]
            )
        else:
            theta, vecs = spla.eigsh(A, k=count, M=ops.mass.tocsc(), sigma=0.0, which="LM")
            order = np.argsort(theta)
            theta, vecs = theta[order], vecs[:, order]
    except (np.linalg.LinAlgError, spla.ArpackNoConvergence) as exc:
        raise SolverError(f"eigensolver failed: {exc}") from exc
    if np.any(theta <= 0):
        raise SolverError("non-positive eigenvalue in Matern pencil")
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(count)])
    return theta ** -2.0, vecs
