import json

import numpy as np
import pytest

from isosft.errors import ArchitectureMismatch, OutOfDomain
from isosft.geom import metric_tensor
from isosft.solver import metric_term
from isosft.surfnet import (SurfNet, backprop_scalar, load_checkpoint,
                            save_checkpoint, sigmoid, softplus,
                            softplus_second)


def random_net(dims, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    net = SurfNet(dims, seed=seed)
    return net.with_theta(net.theta + rng.normal(0, scale, net.theta.size))


def fd_gradient(f, theta, h):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


def test_zero_net_outputs_zero_and_flat_jacobian():
    net = SurfNet.zeros()
    p = np.array([0.3, 0.9])
    np.testing.assert_array_equal(net.eval(p), np.zeros(3))
    b = net.eval_with_jacobian(p)
    np.testing.assert_array_equal(b.jacobian, np.zeros((3, 2)))
    # every hidden unit sits at softplus(0) = ln 2
    cache = net.forward(p[None])
    np.testing.assert_allclose(cache.inputs[1], np.log(2.0))


def test_eval_is_deterministic():
    net = SurfNet(seed=5)
    p = np.array([0.25, 0.75])
    assert net.eval(p).tobytes() == net.eval(p).tobytes()
    assert SurfNet(seed=5).theta.tobytes() == net.theta.tobytes()


@pytest.mark.parametrize("p", [[-0.01, 0.5], [0.5, 1.0 + 1e-6], [2, 2]])
def test_eval_rejects_points_outside_unit_square(p):
    with pytest.raises(OutOfDomain):
        SurfNet([2, 4, 3]).eval(np.array(p))


def test_eval_accepts_boundary_within_tolerance():
    SurfNet([2, 4, 3]).eval(np.array([1.0 + 5e-10, -5e-10]))


def test_glorot_bounds_and_zero_biases():
    net = SurfNet([2, 128, 256, 128, 3], seed=3)
    for W, b in zip(net.weights, net.biases):
        bound = np.sqrt(6.0 / sum(W.shape))
        assert np.abs(W).max() <= bound
        assert np.all(b == 0)


def test_softplus_derivatives():
    x = np.linspace(-40, 40, 1000)
    logistic = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(sigmoid(x), logistic, atol=1e-12, rtol=0)
    h = 1e-5
    fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
    np.testing.assert_allclose(fd, sigmoid(x), atol=1e-8)
    assert np.all(np.isfinite(softplus_second(x)))
    # linear branch above 30 and no overflow far out
    assert softplus(np.array([31.0]))[0] == 31.0
    assert np.isfinite(softplus(np.array([1e4, -1e4]))).all()


def test_input_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    worst = 0.0
    for k in range(50):
        net = random_net([2, 8, 3], k)
        P = rng.uniform(h, 1 - h, size=(20, 2))
        J = net.eval_with_jacobian(P).jacobian
        fd = np.stack([(net.eval(P + h * e) - net.eval(P - h * e)) / (2 * h)
                       for e in np.eye(2)], axis=2)
        worst = max(worst, rel_err(J, fd))
    assert worst < 1e-5


def test_single_point_and_batch_agree():
    net = random_net([2, 6, 5, 3], 1)
    P = np.random.default_rng(1).uniform(size=(4, 2))
    batch = net.eval_with_jacobian(P)
    for i, p in enumerate(P):
        one = net.eval_with_jacobian(p)
        np.testing.assert_allclose(one.value, batch.value[i], atol=1e-14)
        np.testing.assert_allclose(one.jacobian, batch.jacobian[i],
                                   atol=1e-14)


def test_readout_bias_gradient_of_output_sum():
    net = SurfNet.zeros([2, 4, 3])
    cache = net.forward(np.array([[0.2, 0.4]]))
    g = net.backward(cache, np.ones((1, 3)))
    np.testing.assert_array_equal(g[-3:], [1.0, 1.0, 1.0])


def test_gradient_vanishes_at_constant_fit():
    c = np.array([3.0, -1.0, 7.0])
    net = SurfNet([2, 4, 3], seed=0)
    theta = net.theta.copy()
    theta[-3 - 12:-3] = 0.0   # readout weights
    theta[-3:] = c
    net = net.with_theta(theta)
    P = np.random.default_rng(2).uniform(size=(5, 2))
    cache = net.forward(P)
    g = net.backward(cache, 2 * (net.values(cache) - c))
    assert np.linalg.norm(g) < 1e-12


def test_first_order_gradient_check():
    rng = np.random.default_rng(10)
    worst = 0.0
    for k in range(20):
        dims = [2, int(rng.integers(2, 6)), int(rng.integers(2, 6)), 3]
        net = random_net(dims, 100 + k)
        P = rng.uniform(size=(7, 2))
        target = rng.normal(size=(7, 3))

        def f(theta):
            y = net.with_theta(theta).eval(P)
            return np.sum(np.linalg.norm(y - target, axis=1))

        cache = net.forward(P)
        r = net.values(cache) - target
        g = net.backward(cache, r / np.linalg.norm(r, axis=1)[:, None])
        worst = max(worst, rel_err(g, fd_gradient(f, net.theta, 1e-6)))
    assert worst < 1e-5


def test_second_order_gradient_check():
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(20):
        net = random_net([2, 4, 3], 200 + k)
        P = rng.uniform(size=(1, 2))
        A = rng.normal(size=(3, 2))
        G = metric_tensor(A)[None]

        def f(theta):
            J = net.with_theta(theta).eval_with_jacobian(P).jacobian
            D = metric_tensor(J) - G
            return np.sum(D * D)

        b = net.eval_with_jacobian(P)
        _, g_jac = metric_term(b.jacobian, G)
        g = net.backward(b.cache, np.zeros((1, 3)), g_jac)
        worst = max(worst, rel_err(g, fd_gradient(f, net.theta, 1e-6)))
    assert worst < 1e-4


def test_backprop_scalar_sums_terms_in_order():
    net = random_net([2, 5, 3], 3)
    P = np.random.default_rng(3).uniform(size=(3, 2))
    c1 = net.forward(P)
    c2 = net.forward(P, jacobian=True)
    gv = np.ones((3, 3))
    gj = np.ones((3, 3, 2))
    total = backprop_scalar(net, [(c1, gv, None), (c2, gv, gj)])
    np.testing.assert_allclose(total, net.backward(c1, gv)
                               + net.backward(c2, gv, gj))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = random_net([2, 16, 8, 3], 4)
    metrics = metric_tensor(np.random.default_rng(4).normal(size=(5, 3, 2)))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, net, metrics)
    back, m2, raw = load_checkpoint(path)
    assert back.theta.tobytes() == net.theta.tobytes()
    assert m2.tobytes() == metrics.tobytes()
    assert back.layer_dims == net.layer_dims
    assert raw["seed"] == net.seed
    data = json.loads(path.read_text())
    data["layer_dims"] = [2, 16, 9, 3]
    path.write_text(json.dumps(data))
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path)
