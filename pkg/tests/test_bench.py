import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsurrogate.bench import (BenchRecord, eps_h1mu, eps_l2mu, measure_eval_time, pareto_frontier,
                               read_records, write_records, write_report)
from rbsurrogate.config import load_config, merge
from rbsurrogate.datagen import make_problem
from rbsurrogate.ensemble import run_ensemble
from rbsurrogate.pipelines import active_dimension
from rbsurrogate.sparse_grid import build_index_set


def _dominance_oracle(points):
    keep = []
    for i, (c, e) in enumerate(points):
        dominated = any(c2 <= c and e2 <= e and (c2 < c or e2 < e) for j, (c2, e2) in enumerate(points) if j != i)
        if not dominated:
            keep.append(i)
    return keep


def _recs(points):
    return [BenchRecord("sg", hyper={"i": i}, n=c, eps_l2=e) for i, (c, e) in enumerate(points)]


def test_eps_l2_cases():
    y = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert eps_l2mu(y, y) == 0.0
    assert eps_l2mu(np.zeros_like(y), y) == pytest.approx(1.0)
    # errors of norm 1 and 2 against references of norm 2 and 1
    pred = np.array([[1.0], [3.0]])
    ref = np.array([[2.0], [1.0]])
    assert eps_l2mu(pred, ref) == pytest.approx(1.0)
    G = np.diag([2.0, 1.0])
    assert eps_l2mu([[0.0, 0.0]], [[1.0, 1.0]], G) == pytest.approx(1.0)
    assert eps_l2mu([[0.0, 1.0]], [[1.0, 1.0]], G) == pytest.approx(np.sqrt(2 / 3))
    with pytest.raises(ValueError):
        eps_l2mu(y, np.zeros_like(y))


def test_eps_h1_cases():
    rng = np.random.default_rng(0)
    J = rng.standard_normal((3, 4, 5))
    assert eps_h1mu(J, J, np.ones(5)) == 0.0
    P = J + 0.1 * rng.standard_normal(J.shape)
    assert eps_h1mu(P, J, np.ones(5)) == pytest.approx(np.linalg.norm(P - J) / np.linalg.norm(J))
    # one sample, 2x2, weights (1, 1/2)
    Jr = np.array([[1.0, 2.0], [0.0, 4.0]])
    Jp = np.array([[1.0, 0.0], [1.0, 4.0]])
    num = 1.0 + 0.5 ** 2 * 4.0
    den = 1.0 + 0.5 ** 2 * (4.0 + 16.0)
    assert abs(eps_h1mu(Jp, Jr, [1.0, 0.5]) - np.sqrt(num / den)) < 1e-14
    with pytest.raises(ValueError):
        eps_h1mu(J, np.zeros_like(J), np.ones(5))


def test_measure_eval_time():
    def stub(C):
        time.sleep(0.002)

    t = measure_eval_time(stub, 3, batch_sizes=(1, 4), repeats=3)
    assert set(t) == {1, 4}
    assert 0.001 < t[1] and t[4] * 4 == pytest.approx(t[1], rel=0.5)
    W = np.random.default_rng(1).standard_normal((8, 64))
    fn = lambda C: np.tanh(C @ W)
    a = measure_eval_time(fn, 8, (1, 1024), repeats=5)
    b = measure_eval_time(fn, 8, (1, 1024), repeats=1)
    assert a[1] >= 0.5 * a[1024]
    assert 0.1 < a[1] / b[1] < 10


def test_pareto_small_cases():
    assert [r.hyper["i"] for r in pareto_frontier(_recs([(1, 1), (2, 2)]))] == [0]
    assert [r.hyper["i"] for r in pareto_frontier(_recs([(1, 2), (2, 1)]))] == [0, 1]
    assert [r.hyper["i"] for r in pareto_frontier(_recs([(1, 1), (1, 1), (2, 1)]))] == [0, 1]
    assert pareto_frontier([]) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), max_size=60))
def test_pareto_matches_oracle(points):
    got = sorted(r.hyper["i"] for r in pareto_frontier(_recs(points)))
    assert got == _dominance_oracle(points)


def test_pareto_random_floats():
    rng = np.random.default_rng(2)
    pts = [tuple(p) for p in rng.random((100, 2))]
    assert sorted(r.hyper["i"] for r in pareto_frontier(_recs(pts))) == _dominance_oracle(pts)


def test_record_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        BenchRecord("nn", n=-1)
    recs = [BenchRecord("nn", {"width": 8}, seed=2, s=1.0, n=64, n_jac=2048, N=100, t_T=1.5, t_E=1e-5,
                        t_E_batch=128, eps_l2=0.1, eps_h1=0.2),
            BenchRecord("sg", {"a": 0.2}, status="skipped", reason="unbounded")]
    write_records(recs, tmp_path)
    back = read_records(tmp_path / "records.csv")
    assert back[0] == recs[0]
    assert back[1].status == "skipped" and back[1].eps_h1 is None
    assert (tmp_path / "records.json").is_file()


def test_report_files(tmp_path):
    recs = _recs([(1, 3.0), (2, 1.0), (3, 2.0)]) + [BenchRecord("sg", status="failed", reason="x")]
    write_report(recs, tmp_path)
    for name in ("records.csv", "pareto.csv", "error_vs_n.csv", "error_vs_tE.csv", "error_vs_N.csv",
                 "error_vs_tT.csv"):
        assert (tmp_path / name).is_file()
    pareto = read_records(tmp_path / "pareto.csv")
    assert [r.n for r in pareto] == [1, 2]


@pytest.fixture(scope="module")
def small_cfg():
    return merge(load_config(), {"problem": {"grid_n": 8, "d_true": 32}, "test": {"K": 8, "d_ref": 4},
                                 "encoder": {"out_rank": 6},
                                 "ensemble": {"s": [2.0], "kinds": [], "seeds": [0, 1]}})


@pytest.fixture(scope="module")
def small_problem():
    return make_problem(8, 32)


def test_ensemble_empty(tmp_path, small_cfg):
    recs = run_ensemble(small_cfg, tmp_path)
    assert recs == []
    assert read_records(tmp_path / "records.csv") == []
    assert (tmp_path / "pareto.csv").is_file()


def test_ensemble_one_sg(tmp_path, small_cfg, small_problem):
    cfg = merge(small_cfg, {"ensemble": {"kinds": ["sg"], "sg": {"a": [2.0], "b": [1.0], "ell": [3.0]}}})
    recs = run_ensemble(cfg, tmp_path, problem=small_problem)
    assert len(recs) == 1 and recs[0].status == "ok"
    d = active_dimension(2.0, 1.0, 3.0, 32)
    assert recs[0].n == len(build_index_set(2.0, 1.0, 3.0, d))
    assert 0 < recs[0].eps_l2 < 1


def test_ensemble_two_seeds_and_skips(tmp_path, small_cfg, small_problem):
    cfg = merge(small_cfg, {
        "nn": {"epochs": 3, "width": 8, "depth": 1, "d_in": 4},
        "ensemble": {"kinds": ["nn", "sg"],
                     "nn": {"n": [16], "width": [8], "depth": [1], "objective": ["L2"]},
                     "sg": {"a": [0.2], "b": [0.2], "ell": [2.0]}},
    })
    recs = run_ensemble(cfg, tmp_path, problem=small_problem)
    nn = [r for r in recs if r.kind == "nn"]
    assert [r.seed for r in nn] == [0, 1]
    assert nn[0].hyper == nn[1].hyper and nn[0].eps_l2 != nn[1].eps_l2
    sg = [r for r in recs if r.kind == "sg"]
    assert len(sg) == 1 and sg[0].status == "skipped" and "unbounded" in sg[0].reason
