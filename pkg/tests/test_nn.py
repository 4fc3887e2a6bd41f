import numpy as np
import pytest

from vreg.nn import (BatchNorm, Conv, Dense, Flatten, MaxPool, Network, ReLU, RMSProp, ShapeMismatch,
                     desk_architecture, gradient_check, paper_architecture, relative_error)
from vreg.volume import FileFormatError


def layer_cases(rng):
    f64 = np.float64
    return [
        ("conv2d", Conv(2, 3, 3, 2, rng, f64), (2, 2, 5, 6)),
        ("conv3d", Conv(1, 2, 3, 3, rng, f64), (2, 1, 4, 5, 3)),
        ("pool2d", MaxPool(2, 2), (2, 2, 4, 6)),
        ("pool3d", MaxPool(2, 3), (2, 1, 4, 4, 5)),
        ("relu", ReLU(), (3, 7)),
        ("bn-spatial", BatchNorm(3, dtype=f64), (4, 3, 3, 3)),
        ("bn-dense", BatchNorm(5, dtype=f64), (6, 5)),
        ("flatten", Flatten(), (2, 3, 4)),
        ("dense", Dense(7, 4, rng, f64), (3, 7)),
    ]


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("train", [True, False])
def test_layer_gradients(seed, train):
    rng = np.random.default_rng(seed)
    for name, layer, shape in layer_cases(rng):
        worst = gradient_check(layer, rng.normal(size=shape), rng, train=train)
        assert max(worst.values()) < 1e-3, (name, worst)


@pytest.mark.parametrize("shape", [(1, 12, 12), (1, 8, 8, 8)])
@pytest.mark.parametrize("bn", [False, True])
def test_whole_network_gradient(shape, bn):
    net = Network(desk_architecture(shape, 6, (2, 3), (8,), bn), seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3,) + shape)
    w = rng.normal(size=(3, 6))
    net.zero_grad()
    net.forward(x, True)
    dx = net.backward(w)
    flat, g = x.reshape(-1), dx.reshape(-1)
    for i in rng.choice(flat.size, 10, replace=False):
        o = flat[i]
        flat[i] = o + 1e-6
        up = float(np.sum(w * net.forward(x, True)))
        flat[i] = o - 1e-6
        down = float(np.sum(w * net.forward(x, True)))
        flat[i] = o
        assert relative_error((up - down) / 2e-6, g[i]) < 1e-3


def test_relative_error_floor():
    assert relative_error(0.0, 1e-12) < 1e-3
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 2.1)


def test_single_dense_layer_is_linear_map():
    net = Network({"input": [1, 2, 2], "layers": [{"kind": "flatten"}, {"kind": "dense", "out": 3}]}, seed=0,
                  dtype=np.float64)
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    W, b = net.layers[1].params["W"], net.layers[1].params["b"]
    np.testing.assert_allclose(net.forward(x)[0], W @ x.ravel() + b)


def test_maxpool_routes_gradient_to_argmax():
    p = MaxPool(2, 2)
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    assert p.forward(x)[0, 0, 0, 0] == 5.0
    np.testing.assert_array_equal(p.backward(np.ones((1, 1, 1, 1)))[0, 0], [[0, 1], [0, 0]])


def test_batchnorm_inference_uses_running_stats():
    bn = BatchNorm(2, dtype=np.float64)
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(64, 2))
    for _ in range(200):
        bn.forward(x, train=True)
    out = bn.forward(x, train=False)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=0.05)


def test_shape_mismatch():
    net = Network(desk_architecture((1, 8, 8), 6), seed=0)
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((1, 1, 9, 8)))
    with pytest.raises(ShapeMismatch):
        Network({"input": [2, 4, 4], "layers": [{"kind": "flatten"}, {"kind": "dense", "out": 3},
                                                {"kind": "dense", "out": 3}]}).layers[1].out_shape((7,))


def test_architectures():
    assert Network(paper_architecture((1, 32, 32), 6), 0).arity == 6
    arch = desk_architecture((1, 16, 16), 12, batch_norm=True)
    assert [l["kind"] for l in arch["layers"]].count("bn") == 4


def test_serialization_is_bit_exact(tmp_path):
    net = Network(desk_architecture((1, 8, 8), 6, batch_norm=True), seed=3)
    net.forward(np.random.default_rng(0).normal(size=(4, 1, 8, 8)), train=True)  # move BN running stats
    net.save(tmp_path / "p.vpol")
    back = Network.load(tmp_path / "p.vpol")
    for (_, n1, a), (_, n2, b) in zip(net.tensors(), back.tensors()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    assert back.to_bytes() == net.to_bytes()
    x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    np.testing.assert_array_equal(net.forward(x), back.forward(x))


def test_policy_file_errors(tmp_path):
    raw = Network(desk_architecture((1, 8, 8), 6), seed=0).to_bytes()
    with pytest.raises(FileFormatError):
        Network.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FileFormatError):
        Network.from_bytes(raw[:-4])
    with pytest.raises(FileFormatError):
        Network.from_bytes(raw + b"\0")


def test_seeded_initialisation():
    a = Network(desk_architecture((1, 8, 8), 6), seed=5).to_bytes()
    assert a == Network(desk_architecture((1, 8, 8), 6), seed=5).to_bytes()
    assert a != Network(desk_architecture((1, 8, 8), 6), seed=6).to_bytes()


def test_rmsprop_step():
    net = Network({"input": [2], "layers": [{"kind": "dense", "out": 1}]}, seed=0, dtype=np.float64)
    layer = net.layers[0]
    layer.params["W"][:] = 0.0
    layer.grads["W"][:] = [[2.0, -4.0]]
    opt = RMSProp(net, lr=0.1, rho=0.9, eps=1e-300)
    opt.step()
    # first step: cache = 0.1 g^2, update = lr g / sqrt(0.1 g^2) = lr sign(g) / sqrt(0.1)
    np.testing.assert_allclose(layer.params["W"], [[-0.1 / np.sqrt(0.1), 0.1 / np.sqrt(0.1)]])


def test_copy_and_set_all():
    net = Network(desk_architecture((1, 8, 8), 6), seed=0)
    c = net.copy()
    c.set_all(0.0)
    assert np.all(c.forward(np.ones((1, 1, 8, 8))) == 0)
    assert not np.all(net.forward(np.ones((1, 1, 8, 8))) == 0)
