"""Acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the terminal summary
and printed directly under ``-s``) before asserting.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from rbsurrogate import storage
from rbsurrogate.bench import BenchRecord, pareto_frontier
from rbsurrogate.cli import main as cli_main
from rbsurrogate.datagen import generate_dataset, make_problem, make_test_set
from rbsurrogate.neural import TrainingDataset, init_mlp, loss_h1, loss_l2, param_gradient
from rbsurrogate.pde import DiffusionSystem, Grid2D, assemble_fem, solve_diffusion
from rbsurrogate.pipelines import ell_for_budget, evaluate, fit_nn, fit_sg
from rbsurrogate.reduced_basis import SmoothnessSpec, empirical_pca
from rbsurrogate.sparse_grid import (MultiIndexSet, barycentric_weights, build_index_set, build_sg_surrogate,
                                     lagrange_basis, leja_nodes, smolyak_coefficients)
from rbsurrogate.tensor_train import TensorTrain, tt_cross, tt_eval, tt_round


def report(number, ok, detail, seconds, limit):
    ok = bool(ok) and seconds < limit
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s, limit {limit:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def problem():
    return make_problem(32, 256)


@pytest.fixture(scope="module")
def test_sets(problem):
    return {s: make_test_set(problem, SmoothnessSpec(s, 256), K=128, seed=1234, d_ref=32) for s in (1.0, 3.0)}


def test_1_smolyak_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    sizes = []
    for ell in (3.22, 5.55):                     # |Lambda| = 10 and 30 for (a, b) = (2, 1), d = 3
        ix = build_index_set(2.0, 1.0, ell, 3)
        sizes.append(len(ix))
        coefs = rng.standard_normal(len(ix))

        def p(C):
            C = np.atleast_2d(C)
            return np.prod(C[:, None, :] ** ix.indices[None], axis=2) @ coefs

        sg = build_sg_surrogate(lambda c: p(c), ix)
        C = rng.uniform(-1, 1, (1000, 3))
        ref = p(C)
        worst = max(worst, np.abs(sg.evaluate(C)[:, 0] - ref).max() / np.abs(ref).max())
    report(1, sizes == [10, 30] and worst < 1e-10, f"|Lambda|={sizes} max rel err {worst:.2e}",
           time.perf_counter() - t0, 5)


def test_2_zeta_sum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    sums = []
    for _ in range(50):
        d = int(rng.integers(1, 5))
        members = {(0,) * d}
        target = int(rng.integers(1, 40))
        for _ in range(2000):
            if len(members) >= target:
                break
            nu = list(sorted(members)[rng.integers(len(members))])
            nu[rng.integers(d)] += 1
            nu = tuple(nu)
            if all(nu[:j] + (nu[j] - 1,) + nu[j + 1:] in members for j in range(d) if nu[j]):
                members.add(nu)
        ix = MultiIndexSet.from_indices(members)
        assert ix.is_downward_closed()
        sums.append(sum(smolyak_coefficients(ix).values()))
    report(2, all(s == 1 for s in sums), f"50 sets, sums in {sorted(set(sums))}", time.perf_counter() - t0, 1)


def test_3_tt_dense_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    nu = (3, 3, 3, 3)
    r = [1, 2, 3, 3, 3, 1]
    tt = TensorTrain([rng.standard_normal((r[k], n, r[k + 1])) for k, n in enumerate([2, 4, 4, 4, 4])])
    F = tt.full()
    xi = leja_nodes(4).nodes
    w = barycentric_weights(xi)
    C = rng.uniform(-1, 1, (100, 4))
    dense = np.array([np.einsum("oabcd,a,b,c,d->o", F, *[lagrange_basis(xi, w, [c[k]])[0] for k in range(4)])
                      for c in C])
    e_eval = np.abs(tt_eval(tt, leja_nodes(4), nu, C) - dense).max() / np.abs(dense).max()
    e_round = np.linalg.norm(tt_round(tt, 1e-12).full() - F) / np.linalg.norm(F)
    report(3, e_eval < 1e-12 and e_round < 1e-11, f"eval err {e_eval:.1e}, round-trip err {e_round:.1e}",
           time.perf_counter() - t0, 5)


def test_4_tt_cross_sum():
    t0 = time.perf_counter()
    d, nu, rank = 3, 4, 2
    xi = leja_nodes(nu + 1).nodes
    tt, info = tt_cross(lambda j: [xi[list(j)].sum()], [nu + 1] * d, 1, rank_cap=rank, sweeps=2)
    grid = np.array(list(itertools.product(range(nu + 1), repeat=d)))
    err = np.abs(tt.full()[0][tuple(grid.T)] - xi[grid].sum(axis=1)).max()
    bound = 2 * d * (nu + 1) * rank ** 2
    report(4, err < 1e-11 and max(info.probes_per_sweep) <= bound,
           f"max err {err:.1e}, probes per sweep {info.probes_per_sweep} <= {bound}", time.perf_counter() - t0, 5)


def test_5_pca_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    m, N, r = 50, 200, 10
    X = rng.standard_normal((m, N)) * np.geomspace(5, 0.05, m)[:, None]
    A = rng.standard_normal((m, m))
    G = A @ A.T + m * np.eye(m)
    b = empirical_pca(X, G, r)
    Xc = X - X.mean(axis=1, keepdims=True)
    ev = np.sort(np.linalg.eigvalsh(Xc.T @ G @ Xc))[::-1]
    R = Xc - b.basis @ (b.basis.T @ G @ Xc)
    energy = np.einsum("ik,ij,jk->", R, G, R)
    rel = abs(energy - ev[r:].sum()) / ev[r:].sum()
    report(5, rel < 1e-9, f"tail energy rel err {rel:.1e}", time.perf_counter() - t0, 5)


def test_6_pde_correctness():
    t0 = time.perf_counter()
    ops = assemble_fem(Grid2D(64))
    y = solve_diffusion(ops, np.zeros(ops.dof_count))
    center = y[ops.grid.node(32, 32)]
    ref = 0.07367
    rng = np.random.default_rng(4)
    fd_errs = []
    for _ in range(5):
        x = 0.5 * rng.standard_normal(ops.dof_count)
        h = rng.standard_normal(ops.dof_count)
        z = DiffusionSystem(ops, x).tangent(h)
        fd = (solve_diffusion(ops, x + 1e-5 * h) - solve_diffusion(ops, x - 1e-5 * h)) / 2e-5
        fd_errs.append(np.linalg.norm(z - fd) / np.linalg.norm(fd))
    ok = abs(center - ref) < 2e-3 and max(fd_errs) < 1e-4
    report(6, ok, f"center {center:.5f} vs {ref}, tangent FD rel err {max(fd_errs):.1e}",
           time.perf_counter() - t0, 60)


def test_7_gradient_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for act in ("gelu", "tanh"):
        net = init_mlp(4, 3, 8, 3, act, 7)
        for b in net.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
        batch = TrainingDataset(rng.standard_normal((6, 4)), rng.standard_normal((6, 3)),
                                rng.standard_normal((6, 3, 4)))
        for obj in ("L2", "H1"):
            f = (lambda: loss_l2(net, batch)) if obj == "L2" else (lambda: loss_h1(net, batch, 1.0))
            _, grads = param_gradient(net, batch, obj, 1.0)
            for p, g in zip(net.params(), grads):
                for i in np.ndindex(p.shape):
                    old = p[i]
                    p[i] = old + 1e-6
                    up = f()
                    p[i] = old - 1e-6
                    dn = f()
                    p[i] = old
                    fd = (up - dn) / 2e-6
                    # entries far below the array's scale are compared against that scale
                    scale = max(abs(fd), 1e-3 * np.abs(g).max())
                    worst = max(worst, abs(g[i] - fd) / scale)
    report(7, worst < 1e-5, f"max rel err {worst:.1e} over L2/H1 x gelu/tanh", time.perf_counter() - t0, 30)


def test_8_sg_convergence_rate(problem, test_sets):
    t0 = time.perf_counter()
    spec = SmoothnessSpec(3.0, 256)
    ns, errs = [], []
    for target in (30, 120, 500):
        fs = fit_sg(problem, spec, 1.2, 0.5, ell_for_budget(1.2, 0.5, target), out_rank=32)
        rec = evaluate(fs, problem, test_sets[3.0], jacobians=False, repeats=1)
        ns.append(fs.n)
        errs.append(rec.eps_l2)
    rate = -math.log(errs[-1] / errs[0]) / math.log(ns[-1] / ns[0])
    mono = all(b < a for a, b in zip(errs, errs[1:]))
    report(8, mono and rate >= 1.0, f"n={ns} eps={[f'{e:.2e}' for e in errs]} rate {rate:.2f}",
           time.perf_counter() - t0, 600)


@pytest.mark.slow
def test_9_derivative_informed_benefit(problem, test_sets):
    t0 = time.perf_counter()
    spec = SmoothnessSpec(1.0, 256)
    res = {"L2": [], "H1": []}
    for seed in (0, 1, 2):
        ds = generate_dataset(problem, spec, 256, seed, 32, 32, with_jacobians=True)
        for obj in ("L2", "H1"):
            fs = fit_nn(problem, spec, 256, seed, width=64, depth=3, objective=obj, epochs=500, dataset=ds)
            res[obj].append(evaluate(fs, problem, test_sets[1.0], jacobians=False, repeats=1).eps_l2)
    m1, m2 = np.median(res["H1"]), np.median(res["L2"])
    report(9, m1 <= m2, f"median eps_l2 H1 {m1:.4f} vs L2 {m2:.4f}", time.perf_counter() - t0, 1200)


def test_10_smoothness_ordering(problem, test_sets):
    t0 = time.perf_counter()
    ell = ell_for_budget(2.0, 1.0, 200)
    errs = {}
    for s in (3.0, 1.0):
        fs = fit_sg(problem, SmoothnessSpec(s, 256), 2.0, 1.0, ell)
        errs[s] = evaluate(fs, problem, test_sets[s], jacobians=False, repeats=1).eps_l2
    factor = errs[1.0] / errs[3.0]
    report(10, factor >= 3, f"n={fs.n} eps s=3 {errs[3.0]:.2e}, s=1 {errs[1.0]:.2e}, factor {factor:.1f}",
           time.perf_counter() - t0, 600)


def _dominance_oracle(pts):
    c, e = pts[:, 0], pts[:, 1]
    le = (c[None, :] <= c[:, None]) & (e[None, :] <= e[:, None])
    lt = (c[None, :] < c[:, None]) | (e[None, :] < e[:, None])
    return sorted(np.flatnonzero(~np.any(le & lt, axis=1)).tolist())


def test_11_pareto_oracle():
    rng = np.random.default_rng(6)
    # integer grid (many exact ties) and integer cost with continuous error (long frontier)
    cases = [np.column_stack([rng.integers(0, 50, 1000), rng.integers(0, 50, 1000)]).astype(float),
             np.column_stack([rng.integers(0, 1000, 1000), rng.random(1000) ** 0.2 * 1e3]).astype(float)]
    seconds, agree, sizes = 0.0, True, []
    for pts in cases:
        recs = [BenchRecord("nn", hyper={"i": i}, n=int(c), eps_l2=e) for i, (c, e) in enumerate(pts)]
        t0 = time.perf_counter()
        got = sorted(r.hyper["i"] for r in pareto_frontier(recs))
        seconds = max(seconds, time.perf_counter() - t0)
        agree &= got == _dominance_oracle(pts)
        sizes.append(len(got))
    report(11, agree, f"frontier sizes {sizes}, oracle agrees: {agree}", seconds, 1)


@pytest.mark.slow
def test_12_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "det.toml"
    cfg.write_text("[nn]\nn = 64\nobjective = \"H1\"\nepochs = 40\n")
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["gen", "--config", str(cfg), "--seed", "3", "--threads", "1", "--out", str(out)]) == 0
        assert cli_main(["fit", "--config", str(cfg), "--seed", "3", "--threads", "1", "--out", str(out),
                         "--kind", "nn", "--dataset", str(out / "dataset")]) == 0
        hashes.append((storage.hash_directory(out / "dataset"), storage.hash_directory(out / "surrogate")))
    same = hashes[0] == hashes[1]
    report(12, same, f"dataset {hashes[0][0][:12]} surrogate {hashes[0][1][:12]} identical: {same}",
           time.perf_counter() - t0, 300)
