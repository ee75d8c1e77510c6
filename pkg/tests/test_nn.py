import numpy as np
import pytest

from gradcheck import check_grad
from regolith import nn


def _mlp_layers(rng, dims):
    return [(rng.normal(size=(a, b)), rng.normal(size=b))
            for a, b in zip(dims[:-1], dims[1:])]


def test_identity_linear_layer():
    x = np.random.default_rng(0).normal(size=(5, 4))
    layers = [(np.eye(4), np.zeros(4))]
    assert np.allclose(nn.mlp_forward(layers, x), x)


def test_zero_input_zero_bias_gives_zero():
    rng = np.random.default_rng(1)
    layers = [(rng.normal(size=(4, 8)), np.zeros(8)), (rng.normal(size=(8, 2)), np.zeros(2))]
    y = nn.mlp_forward(layers, np.zeros((3, 4)))
    assert np.allclose(y, 0.0)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    layers = _mlp_layers(rng, [6, 10, 10, 3])
    x = rng.normal(size=(7, 6))
    w = rng.normal(size=(7, 3))  # random loss projection

    def loss():
        return float(np.sum(nn.mlp_forward(layers, x) * w))

    dlayers, dx = nn.mlp_backward(layers, x, w.copy())
    for (wmat, b), (dw, db) in zip(layers, dlayers):
        check_grad(loss, wmat, dw, rng)
        check_grad(loss, b, db, rng)
    check_grad(loss, x, dx, rng)


def test_conv_identity_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    y, _ = nn.conv2d_forward(x, k, np.zeros(3))
    assert np.allclose(y, x)


def test_conv_averaging_kernel_on_constant_image():
    x = np.full((1, 1, 8, 8), 0.7)
    k = np.full((1, 1, 3, 3), 1.0 / 9.0)
    y, _ = nn.conv2d_forward(x, k, np.zeros(1))
    # interior cells stay constant (same padding distorts only the border)
    assert np.allclose(y[0, 0, 1:-1, 1:-1], 0.7)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    w = rng.normal(size=(2, 4, 6, 6))

    def loss():
        y, _ = nn.conv2d_forward(x, k, b)
        return float(np.sum(y * w))

    _, cols = nn.conv2d_forward(x, k, b)
    dk, db, dx = nn.conv2d_backward(cols, x.shape, k, w)
    check_grad(loss, k, dk, rng)
    check_grad(loss, b, db, rng)
    check_grad(loss, x, dx, rng)


def test_pool_and_upsample_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(2, 3, 4, 4))

    def loss_pool():
        y, _ = nn.maxpool2_forward(x)
        return float(np.sum(y * w))

    _, idx = nn.maxpool2_forward(x)
    dx = nn.maxpool2_backward(idx, x.shape, w)
    check_grad(loss_pool, x, dx, rng)

    x2 = rng.normal(size=(2, 3, 4, 4))
    w2 = rng.normal(size=(2, 3, 8, 8))

    def loss_up():
        return float(np.sum(nn.upsample2_forward(x2) * w2))

    dx2 = nn.upsample2_backward(w2)
    check_grad(loss_up, x2, dx2, rng)


def test_unet_shapes_and_gradients():
    rng = np.random.default_rng(6)
    store = nn.ParamStore()
    net = nn.UNet(store, "u", c_in=4, c_base=4, c_out=1, n_down=3, n_up=2,
                  rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 4, 32, 32))
    y, cache = net.forward_cached(x)
    assert y.shape == (2, 1, 16, 16)

    w = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(net.forward(x) * w))

    store.zero_grad()
    for p in store.values():
        p.ensure_grad()
    dx = net.backward(cache, w)
    for name in ["u.d0.k", "u.d1.b", "u.mid.k", "u.u0.k", "u.u1.b", "u.head.k"]:
        check_grad(loss, store[name].value, store[name].grad, rng, probes=8)
    check_grad(loss, x, dx, rng, probes=8)


def test_unet_full_depth_output_resolution():
    rng = np.random.default_rng(7)
    store = nn.ParamStore()
    net = nn.UNet(store, "u", c_in=2, c_base=4, c_out=1, n_down=3, n_up=3, rng=rng)
    y = net.forward(rng.normal(size=(1, 2, 32, 32)).astype(np.float32))
    assert y.shape == (1, 1, 32, 32)


def test_sgd_zero_lr_and_scalar_update():
    store = nn.ParamStore()
    store.add("w", np.array([1.0]))
    store["w"].grad = np.array([1.0])
    nn.sgd_step(store, lr=0.0)
    assert store["w"].value[0] == 1.0
    nn.sgd_step(store, lr=0.1, momentum=0.0)
    assert abs(store["w"].value[0] - 0.9) < 1e-12


def test_sgd_missing_grad():
    store = nn.ParamStore()
    store.add("w", np.array([1.0]))
    with pytest.raises(nn.MissingGrad):
        nn.sgd_step(store, lr=0.1)


def test_quadratic_bowl_converges():
    store = nn.ParamStore()
    store.add("w", np.array([3.0, -2.0]))
    target = np.array([0.5, 1.5])
    for _ in range(200):
        w = store["w"].value
        store["w"].grad = 2.0 * (w - target)
        nn.sgd_step(store, lr=0.05, momentum=0.9)
    assert float(np.sum((store["w"].value - target) ** 2)) < 1e-6


def test_adam_converges_on_bowl():
    store = nn.ParamStore()
    store.add("w", np.array([3.0, -2.0]))
    target = np.array([0.5, 1.5])
    for _ in range(400):
        w = store["w"].value
        store["w"].grad = 2.0 * (w - target)
        nn.adam_step(store, lr=0.05)
    assert float(np.sum((store["w"].value - target) ** 2)) < 1e-6


def test_shape_mismatch_raises():
    with pytest.raises(nn.ShapeMismatch):
        nn.linear_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))
    with pytest.raises(nn.ShapeMismatch):
        nn.maxpool2_forward(np.zeros((1, 1, 5, 6)))


def test_forward_deterministic():
    rng = np.random.default_rng(8)
    store = nn.ParamStore()
    mlp = nn.Mlp(store, "m", [5, 16, 16, 2], rng, dtype=np.float32)
    x = rng.normal(size=(11, 5)).astype(np.float32)
    a = mlp.forward(x)
    b = mlp.forward(x)
    assert np.array_equal(a, b)
