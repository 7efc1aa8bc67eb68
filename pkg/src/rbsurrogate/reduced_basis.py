"""Encoders/decoders: Gram-orthonormal reduced bases, K^s sampling, X^s norms."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import storage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothnessSpec:
    """Input smoothness ``s`` with decay rule lambda_j = 1/j and truncation d_true."""

    s: float
    d_true: int = 256

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("s must be >= 0")
        if self.d_true < 1:
            raise ValueError("d_true must be >= 1")

    def amplitudes(self, d: int | None = None) -> np.ndarray:
        """lambda_j^s = j^-s for j = 1..d (default d_true)."""
        d = self.d_true if d is None else d
        return decay_weights(d, self.s)


def decay_weights(d: int, power: float) -> np.ndarray:
    return np.arange(1, d + 1, dtype=np.float64) ** (-float(power))


def sample_ks(spec: SmoothnessSpec, psi: np.ndarray, rng, c=None):
    """Draw ``c ~ U[-1,1]^d_true`` and return ``(c, x)`` with x = sum c_j j^-s psi_j.

    ``rng`` is a seed or a numpy Generator; pass ``c`` to skip the draw.
    ``psi`` holds basis functions as columns.
    """
    if psi.shape[1] < spec.d_true:
        raise ValueError(f"d_true={spec.d_true} exceeds the {psi.shape[1]} available basis functions")
    if c is None:
        rng = np.random.default_rng(rng)
        c = rng.uniform(-1.0, 1.0, size=spec.d_true)
    c = np.asarray(c, dtype=np.float64)
    x = psi[:, : spec.d_true] @ (c * spec.amplitudes())
    return c, x


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    """Affine subspace ``mean + span(basis)`` with G-orthonormal columns.

    Fields are stored as 1-D vectors; batches are passed as rows, i.e.
    ``encode`` takes (m,) or (N, m) and returns (r,) or (N, r).
    """

    mean: np.ndarray
    basis: np.ndarray                 # (m, r)
    gram: sp.spmatrix | np.ndarray = field(repr=False)
    gram_tag: str = "l2"
    captured_energy: np.ndarray = None
    discarded_energy: float = 0.0
    requested_rank: int | None = None
    _gb: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_gb", np.asarray(self.gram @ self.basis))
        if self.captured_energy is None:
            object.__setattr__(self, "captured_energy", np.zeros(self.rank))

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def truncate(self, r: int) -> "ReducedBasis":
        r = min(r, self.rank)
        extra = float(np.sum(self.captured_energy[r:]))
        return ReducedBasis(self.mean, self.basis[:, :r], self.gram, self.gram_tag,
                            self.captured_energy[:r], self.discarded_energy + extra, r)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"field length {x.shape[-1]} does not match basis dimension {self.dim}")
        return (x - self.mean) @ self._gb

    def decode(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        r = c.shape[-1]
        if r > self.rank:
            raise ValueError(f"{r} coefficients given, basis has rank {self.rank}")
        return self.mean + c @ self.basis[:, :r].T

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))

    def save(self, path, extra: dict | None = None):
        manifest = {
            "kind": "reduced_basis",
            "gram_tag": self.gram_tag,
            "rank": self.rank,
            "dim": self.dim,
            "discarded_energy": self.discarded_energy,
            "requested_rank": self.requested_rank,
            "layout": "basis.bin is column-major (dim x rank); mean.bin has length dim",
        }
        manifest.update(extra or {})
        storage.write_container(
            path, manifest,
            {"basis": self.basis, "mean": self.mean, "captured_energy": self.captured_energy},
            orders={"basis": "F"},
        )

    @classmethod
    def load(cls, path, gram):
        manifest, arrays = storage.read_container(path)
        return cls(arrays["mean"], arrays["basis"], gram, manifest["gram_tag"],
                   arrays["captured_energy"], manifest["discarded_energy"],
                   manifest.get("requested_rank"))


def encode(basis: ReducedBasis, x):
    return basis.encode(x)


def decode(basis: ReducedBasis, c):
    return basis.decode(c)


def empirical_pca(samples: np.ndarray, gram, r: int, gram_tag: str = "l2") -> ReducedBasis:
    """G-orthonormal PCA of the columns of ``samples`` (m x N).

    Works in sample space: eigendecompose the N x N matrix X~^T G X~ = V S^2 V^T
    and take basis = X~ V S^-1, which avoids factorizing the m x m Gram.
    Directions whose singular value is numerically zero are dropped, so the
    returned rank can be smaller than ``r``.
    """
    X = np.asarray(samples, dtype=np.float64)
    m, N = X.shape
    if N < 2:
        raise ValueError("need at least two samples")
    if r < 0 or r > min(m, N - 1):
        raise ValueError(f"rank r={r} must be in [0, min(m, N-1)] = [0, {min(m, N - 1)}]")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    GX = np.asarray(gram @ Xc)
    C = Xc.T @ GX
    C = 0.5 * (C + C.T)
    evals, V = np.linalg.eigh(C)
    evals, V = evals[::-1], V[:, ::-1]
    evals = np.clip(evals, 0.0, None)
    total = float(evals.sum())
    top = evals[0] if evals.size else 0.0
    # sigma below 1e-12 sigma_max, or eigenvalues at round-off level of the N x N problem
    floor = max(1e-24 * top, 8 * N * np.finfo(float).eps * top)
    usable = int(np.sum(evals[:r] > floor)) if top > 0 else 0
    if usable < r:
        log.info("empirical_pca: rank reduced from %d to %d (degenerate samples)", r, usable)
    lam = evals[:usable]
    B = Xc @ (V[:, :usable] / np.sqrt(lam))
    return ReducedBasis(
        mean=mean,
        basis=B,
        gram=gram,
        gram_tag=gram_tag,
        captured_energy=lam.copy(),
        discarded_energy=max(total - float(lam.sum()), 0.0),
        requested_rank=r,
    )


def analytic_basis(psi: np.ndarray, d: int, gram, gram_tag: str = "l2") -> ReducedBasis:
    """Encoder built from the known generating functions psi_1..psi_d, zero mean."""
    if not 1 <= d <= psi.shape[1]:
        raise ValueError(f"d={d} outside 1..{psi.shape[1]} available basis functions")
    return ReducedBasis(np.zeros(psi.shape[0]), np.array(psi[:, :d]), gram, gram_tag)


def xs_weighted_seminorm(J: np.ndarray, s_tilde: float) -> float:
    """Frobenius norm of J diag(lambda_i^s_tilde) with lambda_i = 1/i."""
    J = np.asarray(J, dtype=np.float64)
    return float(np.linalg.norm(J * decay_weights(J.shape[-1], s_tilde)))
