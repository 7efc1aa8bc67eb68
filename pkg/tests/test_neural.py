import numpy as np
import pytest
from scipy.special import erf

from rbsurrogate.neural import (MlpSurrogate, TrainConfig, TrainingDataset, TrainingDiverged, init_mlp, loss_h1,
                                loss_l2, mlp_forward, mlp_input_jacobian, param_gradient, train)


def _chain_oracle(net, c):
    """Plain loop over layers, one sample at a time."""
    sig = {"gelu": lambda a: 0.5 * a * (1 + erf(a / np.sqrt(2))), "tanh": np.tanh}[net.activation]
    h = np.asarray(c, dtype=float)
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = W @ h + b
        if l < len(net.weights) - 1:
            h = sig(h)
    return h


def _batch(rng, n, d_in, d_out, jac=True):
    return TrainingDataset(rng.standard_normal((n, d_in)), rng.standard_normal((n, d_out)),
                           rng.standard_normal((n, d_out, d_in)) if jac else None)


def _loss(net, batch, objective, s_tilde):
    return loss_l2(net, batch) if objective == "L2" else loss_h1(net, batch, s_tilde)


def test_zero_network():
    net = init_mlp(3, 2, 4, 2, "tanh", 0)
    for W in net.weights:
        W[:] = 0
    np.testing.assert_array_equal(net(np.ones(3)), 0.0)
    net.biases[-1][:] = [1.5, -2.0]
    np.testing.assert_array_equal(net(np.ones((2, 3))), [[1.5, -2.0]] * 2)


def test_identity_chain_linearizes():
    net = MlpSurrogate([np.eye(4)] * 3, [np.zeros(4)] * 3, "tanh")
    c = 1e-8 * np.array([0.3, -0.2, 0.9, 0.1])
    assert np.linalg.norm(net(c) - c) / np.linalg.norm(c) < 1e-6


@pytest.mark.parametrize("act", ["gelu", "tanh"])
def test_forward_matches_chain_oracle(act):
    rng = np.random.default_rng(0)
    net = init_mlp(5, 3, 7, 3, act, 1)
    for b in net.biases:
        b[:] = rng.standard_normal(b.shape)
    C = rng.standard_normal((6, 5))
    np.testing.assert_allclose(mlp_forward(net, C), np.vstack([_chain_oracle(net, c) for c in C]), atol=1e-13)


def test_linear_net_jacobian():
    net = init_mlp(4, 3, 5, 0, "gelu", 2)
    assert len(net.weights) == 1
    np.testing.assert_array_equal(net.jacobian(np.ones(4)), net.weights[0])


def test_tanh_jacobian_at_zero():
    net = init_mlp(4, 2, 6, 2, "tanh", 3)
    J = mlp_input_jacobian(net, np.zeros(4))
    np.testing.assert_allclose(J, net.weights[2] @ net.weights[1] @ net.weights[0], atol=1e-15)


@pytest.mark.parametrize("act", ["gelu", "tanh"])
def test_input_jacobian_matches_fd(act):
    rng = np.random.default_rng(4)
    net = init_mlp(6, 3, 10, 3, act, 4)
    for c in rng.standard_normal((10, 6)):
        J = net.jacobian(c)
        fd = np.column_stack([(net(c + e) - net(c - e)) / 2e-6 for e in 1e-6 * np.eye(6)])
        assert np.abs(J - fd).max() / np.abs(J).max() < 1e-6


def test_losses_by_hand():
    net = init_mlp(2, 2, 3, 1, "gelu", 0)
    for p in net.params():
        p[:] = 0
    Y = np.array([[1.0, 2.0], [0.0, -1.0]])
    Jd = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [1.0, 0.0]]])
    b = TrainingDataset(np.ones((2, 2)), Y, Jd)
    assert loss_l2(net, b) == pytest.approx((5 + 1) / 2)
    assert loss_h1(net, b, 0.0) == pytest.approx(3.0 + (1 + 5) / 2)
    with pytest.raises(ValueError):
        loss_h1(net, TrainingDataset(np.ones((2, 2)), Y), 0.0)


def test_zero_residual_gives_zero_gradient():
    rng = np.random.default_rng(5)
    net = init_mlp(3, 2, 5, 2, "tanh", 5)
    X = rng.standard_normal((4, 3))
    b = TrainingDataset(X, net(X), net.jacobian(X))
    for obj in ("L2", "H1"):
        loss, grads = param_gradient(net, b, obj, 1.0)
        assert loss == pytest.approx(0.0, abs=1e-28)
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-14)


@pytest.mark.parametrize("act", ["gelu", "tanh"])
@pytest.mark.parametrize("objective", ["L2", "H1"])
def test_param_gradient_matches_fd(act, objective):
    rng = np.random.default_rng(6)
    net = init_mlp(4, 3, 8, 3, act, 6)
    for bias in net.biases:
        bias[:] = 0.1 * rng.standard_normal(bias.shape)
    batch = _batch(rng, 5, 4, 3)
    loss, grads = param_gradient(net, batch, objective, 1.0)
    assert loss == pytest.approx(_loss(net, batch, objective, 1.0), rel=1e-13)
    for p, g in zip(net.params(), grads):
        fd = np.empty_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + 1e-6
            up = _loss(net, batch, objective, 1.0)
            p[i] = old - 1e-6
            dn = _loss(net, batch, objective, 1.0)
            p[i] = old
            fd[i] = (up - dn) / 2e-6
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-5


def test_linear_least_squares_gradient():
    rng = np.random.default_rng(7)
    net = init_mlp(3, 2, 1, 0, "gelu", 7)
    net.biases[0][:] = rng.standard_normal(2)
    X, Y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    _, (gW, gb) = param_gradient(net, TrainingDataset(X, Y), "L2")
    R = X @ net.weights[0].T + net.biases[0] - Y
    np.testing.assert_allclose(gW, 2 / 6 * R.T @ X, atol=1e-10)
    np.testing.assert_allclose(gb, 2 / 6 * R.sum(axis=0), atol=1e-10)


def test_train_linear_realizable():
    rng = np.random.default_rng(8)
    A, c = rng.standard_normal((2, 3)), rng.standard_normal(2)
    X = rng.uniform(-1, 1, (64, 3))
    data = TrainingDataset(X, X @ A.T + c)
    cfg = TrainConfig(epochs=500, lr_schedule=[(0, 1e-2)], batch_size=8, val_fraction=0.0, seed=1)
    res = train(init_mlp(3, 2, 1, 0, "gelu", 0), data, cfg)
    assert loss_l2(res.net, data) < 1e-6
    np.testing.assert_allclose(res.net.weights[0], A, atol=1e-3)


def test_training_is_deterministic():
    rng = np.random.default_rng(9)
    data = _batch(rng, 40, 3, 2)
    cfg = TrainConfig(objective="H1", s_tilde=1.0, epochs=15, seed=3)
    a = train(init_mlp(3, 2, 6, 2, "gelu", 1), data, cfg)
    b = train(init_mlp(3, 2, 6, 2, "gelu", 1), data, cfg)
    assert a.trace == b.trace
    for p, q in zip(a.net.params(), b.net.params()):
        np.testing.assert_array_equal(p, q)


def test_best_snapshot_returned():
    rng = np.random.default_rng(10)
    data = _batch(rng, 60, 3, 2, jac=False)
    res = train(init_mlp(3, 2, 8, 2, "tanh", 2), data, TrainConfig(epochs=40, seed=0, val_fraction=0.2))
    vals = [v for _, _, v in res.trace]
    assert res.best_epoch == int(np.argmin(vals))
    val = data.subset(np.sort(np.random.default_rng(0).permutation(60)[:12]))
    assert loss_l2(res.net, val) == pytest.approx(min(vals), rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    rng = np.random.default_rng(11)
    data = TrainingDataset(rng.standard_normal((32, 3)), 1e300 * rng.standard_normal((32, 2)))
    with pytest.raises(TrainingDiverged):
        train(init_mlp(3, 2, 4, 1, "gelu", 0), data, TrainConfig(epochs=3, lr_schedule=[(0, 1.0)]))


def test_h1_training_improves_derivatives():
    """Quadratic target with exact Jacobians; compare H1 errors on held-out points."""
    rng = np.random.default_rng(12)
    A = rng.standard_normal((2, 3, 3))

    def target(X):
        return np.einsum("kij,pi,pj->pk", A, X, X)

    def jac(X):
        return np.einsum("kij,pj->pki", A + A.transpose(0, 2, 1), X)

    X = rng.uniform(-1, 1, (24, 3))
    data = TrainingDataset(X, target(X), jac(X))
    Xt = rng.uniform(-1, 1, (200, 3))
    test = TrainingDataset(Xt, target(Xt), jac(Xt))
    out = {}
    for obj in ("L2", "H1"):
        cfg = TrainConfig(objective=obj, epochs=300, batch_size=8, lr_schedule=[(0, 3e-3), (200, 3e-4)],
                          val_fraction=0.0, seed=0)
        out[obj] = loss_h1(train(init_mlp(3, 2, 16, 2, "gelu", 0), data, cfg).net, test, 0.0)
    assert out["H1"] < out["L2"]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="H2")
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0.7)
    with pytest.raises(ValueError):
        train(init_mlp(2, 1, 2, 1), TrainingDataset(np.ones((3, 2)), np.ones((3, 1))), TrainConfig(objective="H1"))


def test_round_trip(tmp_path):
    net = init_mlp(3, 2, 5, 2, "tanh", 4)
    net.save(tmp_path / "net")
    back = MlpSurrogate.load(tmp_path / "net")
    c = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(back(c), net(c))
    assert back.parameter_count == 3 * 5 + 5 + 5 * 5 + 5 + 5 * 2 + 2
