"""Fully connected coefficient-map networks with exact input Jacobians.

Values and weighted input Jacobians are pushed forward together: besides the
activations h_l each layer carries the tangent block T_l = dh_l/dc diag(w),
where ``w`` holds per-input weights (lambda_i^s~ for the derivative-informed
loss, ones otherwise).  Reverse mode through both h and T then yields exact
parameter gradients for the H1 objective, which involves second derivatives
of the activation.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import storage
from .reduced_basis import decay_weights

log = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- activations

def _gelu(a):
    Phi = 0.5 * (1.0 + erf(a / _SQRT2))
    phi = _INV_SQRT2PI * np.exp(-0.5 * a * a)
    return a * Phi, Phi + a * phi, phi * (2.0 - a * a)


def _tanh(a):
    t = np.tanh(a)
    d = 1.0 - t * t
    return t, d, -2.0 * t * d


ACTIVATIONS = {"gelu": _gelu, "tanh": _tanh}


# ---------------------------------------------------------------- network

class MlpSurrogate:
    """g~ = A_L o sigma o ... o sigma o A_0 with A_l(x) = W_l x + b_l.

    ``weights[l]`` has shape (d_{l+1}, d_l).  Batches are rows.
    """

    def __init__(self, weights, biases, activation="gelu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(W, dtype=np.float64) for W in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight rows {W.shape[0]} != bias length {b.shape[0]}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input size {W.shape[1]} does not chain")
        self.activation = activation

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]

    @property
    def parameter_count(self) -> int:
        return int(sum(W.size + b.size for W, b in zip(self.weights, self.biases)))

    def copy(self):
        return MlpSurrogate(self.weights, self.biases, self.activation)

    def params(self):
        return self.weights + self.biases

    def evaluate(self, C) -> np.ndarray:
        return mlp_forward(self, C)

    __call__ = evaluate

    def jacobian(self, C) -> np.ndarray:
        return mlp_input_jacobian(self, C)

    def save(self, path, extra: dict | None = None):
        manifest = {"kind": "mlp", "dims": self.dims, "activation": self.activation,
                    "layout": "W_l.bin row-major (d_{l+1}, d_l); b_l.bin length d_{l+1}"}
        manifest.update(extra or {})
        arrays = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W_{l}"] = W
            arrays[f"b_{l}"] = b
        storage.write_container(path, manifest, arrays)

    @classmethod
    def load(cls, path):
        manifest, arrays = storage.read_container(path)
        L = len(manifest["dims"]) - 1
        return cls([arrays[f"W_{l}"] for l in range(L)], [arrays[f"b_{l}"] for l in range(L)],
                   manifest["activation"])


def init_mlp(d_in: int, d_out: int, width: int, depth: int, activation="gelu", seed=0) -> MlpSurrogate:
    """Glorot-uniform weights, zero biases; ``depth`` hidden layers of size ``width``."""
    rng = np.random.default_rng(seed)
    dims = [d_in] + [width] * depth + [d_out]
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-lim, lim, size=(b, a)))
        biases.append(np.zeros(b))
    return MlpSurrogate(weights, biases, activation)


def _as_batch(net, C):
    C = np.asarray(C, dtype=np.float64)
    single = C.ndim == 1
    C = np.atleast_2d(C)
    if C.shape[1] != net.d_in:
        raise ValueError(f"input has {C.shape[1]} coordinates, network expects {net.d_in}")
    return C, single


def mlp_forward(net: MlpSurrogate, C) -> np.ndarray:
    C, single = _as_batch(net, C)
    act = ACTIVATIONS[net.activation]
    h = C
    L = len(net.weights)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W.T + b
        h = act(a)[0] if l < L - 1 else a
    return h[0] if single else h


def _forward_tangent(net, C, w):
    """Forward pass carrying T = dh/dc diag(w); keeps what the backward pass needs."""
    act = ACTIVATIONS[net.activation]
    P = C.shape[0]
    h = C
    T = np.broadcast_to(np.diag(w), (P, w.size, w.size))
    tape = []
    L = len(net.weights)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W.T + b
        Ta = np.matmul(W, T)
        if l < L - 1:
            s0, s1, s2 = act(a)
            tape.append((h, T, a, Ta, s1, s2))
            h = s0
            T = s1[:, :, None] * Ta
        else:
            tape.append((h, T, a, Ta, None, None))
            h, T = a, Ta
    return h, T, tape


def mlp_input_jacobian(net: MlpSurrogate, C) -> np.ndarray:
    """dg~/dc, shape (d_out, d_in) or (P, d_out, d_in)."""
    C, single = _as_batch(net, C)
    _, J, _ = _forward_tangent(net, C, np.ones(net.d_in))
    return J[0] if single else J


# ---------------------------------------------------------------- losses

@dataclass
class TrainingDataset:
    inputs: np.ndarray                  # (n, d_in)
    outputs: np.ndarray                 # (n, d_out)
    jacobians: np.ndarray | None = None  # (n, d_out, d_in)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=np.float64))
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs disagree on the sample count")
        if self.jacobians is not None:
            self.jacobians = np.asarray(self.jacobians, dtype=np.float64)
            expect = (self.n, self.outputs.shape[1], self.inputs.shape[1])
            if self.jacobians.shape != expect:
                raise ValueError(f"jacobians have shape {self.jacobians.shape}, expected {expect}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def subset(self, rows):
        J = None if self.jacobians is None else self.jacobians[rows]
        return TrainingDataset(self.inputs[rows], self.outputs[rows], J)


def _h1_weights(d_in, s_tilde):
    return decay_weights(d_in, s_tilde)


def loss_l2(net: MlpSurrogate, batch: TrainingDataset) -> float:
    r = mlp_forward(net, batch.inputs) - batch.outputs
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_h1(net: MlpSurrogate, batch: TrainingDataset, s_tilde: float) -> float:
    if batch.jacobians is None:
        raise ValueError("H1 loss needs jacobians in the batch")
    w = _h1_weights(net.d_in, s_tilde)
    out, T, _ = _forward_tangent(net, batch.inputs, w)
    r = out - batch.outputs
    R = T - batch.jacobians * w
    return float(np.mean(np.sum(r * r, axis=1)) + np.mean(np.sum(R * R, axis=(1, 2))))


def param_gradient(net: MlpSurrogate, batch: TrainingDataset, objective="L2", s_tilde: float = 0.0):
    """Loss and its exact gradient, as ``(loss, [dW_0, ..., dW_L, db_0, ..., db_L])``."""
    P = batch.n
    if objective == "L2":
        act = ACTIVATIONS[net.activation]
        hs, As = [], []
        h = batch.inputs
        L = len(net.weights)
        for l, (W, b) in enumerate(zip(net.weights, net.biases)):
            hs.append(h)
            a = h @ W.T + b
            if l < L - 1:
                s0, s1, _ = act(a)
                As.append(s1)
                h = s0
            else:
                h = a
        r = h - batch.outputs
        loss = float(np.sum(r * r) / P)
        abar = 2.0 / P * r
        gW, gb = [None] * L, [None] * L
        for l in range(L - 1, -1, -1):
            gW[l] = abar.T @ hs[l]
            gb[l] = abar.sum(axis=0)
            if l:
                abar = (abar @ net.weights[l]) * As[l - 1]
        return loss, gW + gb
    if objective != "H1":
        raise ValueError(f"unknown objective {objective!r}")
    if batch.jacobians is None:
        raise ValueError("H1 objective needs jacobians in the batch")
    w = _h1_weights(net.d_in, s_tilde)
    out, T, tape = _forward_tangent(net, batch.inputs, w)
    r = out - batch.outputs
    R = T - batch.jacobians * w
    loss = float((np.sum(r * r) + np.sum(R * R)) / P)
    abar = 2.0 / P * r
    Tabar = 2.0 / P * R
    L = len(net.weights)
    gW, gb = [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        h_in, T_in, _, _, _, _ = tape[l]
        W = net.weights[l]
        gW[l] = abar.T @ h_in + np.tensordot(Tabar, T_in, axes=([0, 2], [0, 2]))
        gb[l] = abar.sum(axis=0)
        if l:
            hbar = abar @ W
            Tbar = np.matmul(W.T, Tabar)
            _, _, _, Ta, s1, s2 = tape[l - 1]
            abar = hbar * s1 + np.sum(Tbar * Ta, axis=2) * s2
            Tabar = s1[:, :, None] * Tbar
    return loss, gW + gb


def objective_loss(net, batch, objective, s_tilde):
    return loss_l2(net, batch) if objective == "L2" else loss_h1(net, batch, s_tilde)


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = "L2"
    s_tilde: float = 0.0
    epochs: int = 500
    batch_size: int = 32
    lr_schedule: list | None = None     # [(first_epoch, rate), ...]
    val_fraction: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in ("L2", "H1"):
            raise ValueError(f"objective must be L2 or H1, got {self.objective!r}")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def schedule(self):
        if self.lr_schedule is not None:
            return sorted((int(e), float(r)) for e, r in self.lr_schedule)
        e = self.epochs
        return [(0, 1e-3), (int(0.5 * e), 1e-4), (int(0.8 * e), 1e-5)]

    def rate(self, epoch: int) -> float:
        current = self.schedule()[0][1]
        for start, r in self.schedule():
            if epoch >= start:
                current = r
        return current


@dataclass
class TrainResult:
    net: MlpSurrogate
    trace: list = field(default_factory=list)    # (epoch, train_loss, val_loss)
    seconds: float = 0.0
    best_epoch: int = -1

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_loss", "val_loss"])
            for row in self.trace:
                wr.writerow([row[0], repr(row[1]), repr(row[2])])


def train(net: MlpSurrogate, data: TrainingDataset, config: TrainConfig) -> TrainResult:
    """Adam on shuffled mini-batches; returns the snapshot with the best validation loss.

    Validation uses the training objective.  With val_fraction = 0 the
    training loss takes its place for snapshot selection.
    """
    if config.objective == "H1" and data.jacobians is None:
        raise ValueError("H1 training needs a dataset with jacobians")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(data.n)
    n_val = int(round(config.val_fraction * data.n))
    if n_val >= data.n:
        n_val = data.n - 1
    val = data.subset(np.sort(perm[:n_val])) if n_val else None
    trn = data.subset(np.sort(perm[n_val:]))

    net = net.copy()
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    best = None
    best_loss = math.inf
    result = TrainResult(net)
    for epoch in range(config.epochs):
        lr = config.rate(epoch)
        order = rng.permutation(trn.n)
        total = 0.0
        for start in range(0, trn.n, config.batch_size):
            rows = order[start:start + config.batch_size]
            loss, grads = param_gradient(net, trn.subset(rows), config.objective, config.s_tilde)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (learning rate {lr:g}); lower the rate")
            total += loss * rows.size
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= config.beta1
                mi += (1.0 - config.beta1) * g
                vi *= config.beta2
                vi += (1.0 - config.beta2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
        train_loss = total / trn.n
        val_loss = objective_loss(net, val, config.objective, config.s_tilde) if val else train_loss
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        result.trace.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best_loss = val_loss
            best = net.copy()
            result.best_epoch = epoch
    result.net = best
    result.seconds = time.perf_counter() - t0
    return result
