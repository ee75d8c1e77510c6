"""Minimal trainable-network engine: dense and 2D conv stacks with exact
reverse-mode gradients and stochastic-gradient optimizers.

The operator set is fixed (affine, ReLU, same-padding conv, 2x max-pool,
2x nearest upsampling); there is no general autodiff tape. Forward passes
are bit-deterministic for fixed weights and inputs on a single thread.
Training runs in float32; gradient checks use float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible with the operator."""


class MissingGrad(RuntimeError):
    """An optimizer step was requested but a parameter has no gradient."""


# Optional NaN guard: when enabled, every op asserts finite outputs. Kept off
# during benchmarks, switched on by the test suite.
NAN_GUARD = False


def _guard(a: np.ndarray) -> np.ndarray:
    if NAN_GUARD and not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite values produced by an nn op")
    return a


@dataclass
class Param:
    """A named tensor with an optional gradient and optimizer state."""

    value: np.ndarray
    grad: np.ndarray | None = None
    state: dict = field(default_factory=dict)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad


class ParamStore(dict):
    """Named parameter container. Keys are unique; shapes are fixed after
    construction."""

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self:
            raise KeyError(f"duplicate parameter name: {name}")
        p = Param(value=value)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            if p.grad is not None:
                p.grad.fill(0.0)

    def n_values(self) -> int:
        return int(sum(p.value.size for p in self.values()))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, p in self.items():
            out.add(k, p.value.astype(dtype))
        return out

    def select(self, prefixes: Iterable[str]) -> list[str]:
        pref = tuple(prefixes)
        return [k for k in self if k.startswith(pref)]


# ---------------------------------------------------------------------------
# Dense stacks
# ---------------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: {x.shape} @ {w.shape}")
    return _guard(x @ w + b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mlp_forward(layers: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Forward through [affine, ReLU]* affine. ``layers`` is a list of (w, b)."""
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = linear_forward(h, w, b)
        if i != last:
            h = relu(h)
    return h


def mlp_forward_cached(layers, x):
    """Forward keeping pre-activation inputs for the backward pass."""
    inputs = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = linear_forward(h, w, b)
        if i != last:
            h = relu(h)
        inputs.append(h)
    return h, inputs


def mlp_backward(layers, x, dy):
    """Exact reverse-mode gradients of :func:`mlp_forward`.

    Returns (dlayers, dx) where dlayers matches the (w, b) structure. The
    forward intermediates are recomputed internally, so this is a pure
    function of (layers, x, dy).
    """
    _, inputs = mlp_forward_cached(layers, x)
    return mlp_backward_from_cache(layers, inputs, dy)


def mlp_backward_from_cache(layers, inputs, dy):
    dlayers: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore
    grad = dy
    last = len(layers) - 1
    for i in range(last, -1, -1):
        w, _ = layers[i]
        h_in = inputs[i]
        if i != last:
            # inputs[i + 1] holds relu(pre-activation); zero entries mark the
            # clamped region (relu derivative).
            grad = grad * (inputs[i + 1] > 0.0)
        dw = h_in.reshape(-1, h_in.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        db = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        dlayers[i] = (dw, db)
        grad = grad @ w.T
    return dlayers, grad


class Mlp:
    """A named dense stack whose parameters live in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 rng: np.random.Generator, dtype=np.float32,
                 out_scale: float = 1.0) -> None:
        self.store = store
        self.name = name
        self.dims = list(dims)
        self.param_names: list[tuple[str, str]] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / d_in)
            if i == len(dims) - 2:
                scale = out_scale * np.sqrt(1.0 / d_in)
            w = rng.normal(0.0, scale, size=(d_in, d_out)).astype(dtype)
            b = np.zeros(d_out, dtype=dtype)
            wn, bn = f"{name}.w{i}", f"{name}.b{i}"
            store.add(wn, w)
            store.add(bn, b)
            self.param_names.append((wn, bn))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.store[wn].value, self.store[bn].value)
                for wn, bn in self.param_names]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.layers(), x)

    def forward_cached(self, x: np.ndarray):
        return mlp_forward_cached(self.layers(), x)

    def backward(self, inputs, dy) -> np.ndarray:
        """Accumulate parameter grads into the store; return dx."""
        dlayers, dx = mlp_backward_from_cache(self.layers(), inputs, dy)
        for (wn, bn), (dw, db) in zip(self.param_names, dlayers):
            self.store[wn].ensure_grad()[...] += dw
            self.store[bn].ensure_grad()[...] += db
        return dx


# ---------------------------------------------------------------------------
# 2D conv stacks (NCHW, same padding, stride 1)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*kh*kw) patch matrix with zero padding."""
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, h, w), strides=(sb, sc, sh, sw, sh, sw),
        writeable=False,
    )
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * h * w, c * kh * kw)


def _col2im(dcols: np.ndarray, x_shape: tuple, kh: int, kw: int) -> np.ndarray:
    b, c, h, w = x_shape
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d = dcols.reshape(b, h, w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + h, j:j + w] += d[:, :, i, j]
    return dxp[:, :, ph:ph + h, pw:pw + w]


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray):
    """Same-padding stride-1 convolution. k is (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"conv2d: x {x.shape}, k {k.shape}")
    bsz, _, h, w = x.shape
    cout, cin, kh, kw = k.shape
    cols = _im2col(x, kh, kw)
    y = cols @ k.reshape(cout, cin * kh * kw).T + b
    y = y.reshape(bsz, h, w, cout).transpose(0, 3, 1, 2)
    return _guard(y), cols


def conv2d_backward(cols: np.ndarray, x_shape: tuple, k: np.ndarray, dy: np.ndarray):
    bsz, _, h, w = x_shape
    cout, cin, kh, kw = k.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(bsz * h * w, cout)
    dk = (dy_mat.T @ cols).reshape(cout, cin, kh, kw)
    db = dy_mat.sum(axis=0)
    dcols = dy_mat @ k.reshape(cout, cin * kh * kw)
    dx = _col2im(dcols, x_shape, kh, kw)
    return dk, db, dx


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2 needs even dims, got {x.shape}")
    xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(b, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return _guard(y), idx


def maxpool2_backward(idx: np.ndarray, x_shape: tuple, dy: np.ndarray) -> np.ndarray:
    b, c, h, w = x_shape
    dxr = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    dx = dxr.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(b, c, h, w)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling."""
    return _guard(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class UNet:
    """A compact three-level U-Net on NCHW rasters.

    ``n_down`` pooling levels contract the input; ``n_up`` upsampling levels
    (with skip concatenation) expand it back. With n_up < n_down the output
    raster is coarser than the input by a factor of 2^(n_down - n_up).
    A 1x1 head maps to ``c_out`` channels; hidden convs are 3x3 + ReLU.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_base: int,
                 c_out: int, n_down: int = 3, n_up: int = 2,
                 rng: np.random.Generator | None = None, dtype=np.float32) -> None:
        if n_up > n_down:
            raise ShapeMismatch("n_up must not exceed n_down")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.name = name
        self.n_down = n_down
        self.n_up = n_up
        self.down_channels = [c_base * (2 ** i) for i in range(n_down)]
        self.conv_names: dict[str, str] = {}

        def add_conv(tag: str, cin: int, cout: int, k: int = 3):
            scale = np.sqrt(2.0 / (cin * k * k))
            kern = rng.normal(0.0, scale, size=(cout, cin, k, k)).astype(dtype)
            store.add(f"{name}.{tag}.k", kern)
            store.add(f"{name}.{tag}.b", np.zeros(cout, dtype=dtype))
            self.conv_names[tag] = f"{name}.{tag}"

        prev = c_in
        for i, ch in enumerate(self.down_channels):
            add_conv(f"d{i}", prev, ch)
            prev = ch
        add_conv("mid", prev, prev)
        # Upsampling convs consume [up(prev), skip] concatenation.
        for j in range(n_up):
            skip = self.down_channels[n_down - 1 - j]
            cout = max(c_base, skip // 2)
            add_conv(f"u{j}", prev + skip, cout)
            prev = cout
        add_conv("head", prev, c_out, k=1)

    def _conv(self, tag: str):
        base = self.conv_names[tag]
        return self.store[f"{base}.k"].value, self.store[f"{base}.b"].value

    def forward_cached(self, x: np.ndarray):
        cache: dict = {"x_shapes": {}, "cols": {}, "pool": {}, "acts": {}}
        skips = []
        h = x
        for i in range(self.n_down):
            k, b = self._conv(f"d{i}")
            cache["x_shapes"][f"d{i}"] = h.shape
            y, cols = conv2d_forward(h, k, b)
            cache["cols"][f"d{i}"] = cols
            a = relu(y)
            cache["acts"][f"d{i}"] = a
            skips.append(a)
            a_p, idx = maxpool2_forward(a)
            cache["pool"][f"d{i}"] = (idx, a.shape)
            h = a_p
        k, b = self._conv("mid")
        cache["x_shapes"]["mid"] = h.shape
        y, cols = conv2d_forward(h, k, b)
        cache["cols"]["mid"] = cols
        h = relu(y)
        cache["acts"]["mid"] = h
        for j in range(self.n_up):
            h = upsample2_forward(h)
            skip = skips[self.n_down - 1 - j]
            cache[f"u{j}_split"] = h.shape[1]
            h = np.concatenate([h, skip], axis=1)
            k, b = self._conv(f"u{j}")
            cache["x_shapes"][f"u{j}"] = h.shape
            y, cols = conv2d_forward(h, k, b)
            cache["cols"][f"u{j}"] = cols
            h = relu(y)
            cache["acts"][f"u{j}"] = h
        k, b = self._conv("head")
        cache["x_shapes"]["head"] = h.shape
        y, cols = conv2d_forward(h, k, b)
        cache["cols"]["head"] = cols
        return y, cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def _accum(self, tag: str, dk: np.ndarray, db: np.ndarray) -> None:
        base = self.conv_names[tag]
        self.store[f"{base}.k"].ensure_grad()[...] += dk
        self.store[f"{base}.b"].ensure_grad()[...] += db

    def backward(self, cache: dict, dy: np.ndarray) -> np.ndarray:
        """Accumulate conv grads into the store; return d(input)."""
        k, _ = self._conv("head")
        dk, db, grad = conv2d_backward(cache["cols"]["head"],
                                       cache["x_shapes"]["head"], k, dy)
        self._accum("head", dk, db)
        dskips: dict[int, np.ndarray] = {}
        for j in range(self.n_up - 1, -1, -1):
            grad = grad * (cache["acts"][f"u{j}"] > 0.0)
            k, _ = self._conv(f"u{j}")
            dk, db, grad = conv2d_backward(cache["cols"][f"u{j}"],
                                           cache["x_shapes"][f"u{j}"], k, grad)
            self._accum(f"u{j}", dk, db)
            split = cache[f"u{j}_split"]
            dskips[self.n_down - 1 - j] = grad[:, split:]
            grad = upsample2_backward(grad[:, :split])
        grad = grad * (cache["acts"]["mid"] > 0.0)
        k, _ = self._conv("mid")
        dk, db, grad = conv2d_backward(cache["cols"]["mid"],
                                       cache["x_shapes"]["mid"], k, grad)
        self._accum("mid", dk, db)
        for i in range(self.n_down - 1, -1, -1):
            idx, a_shape = cache["pool"][f"d{i}"]
            grad = maxpool2_backward(idx, a_shape, grad)
            if i in dskips:
                grad = grad + dskips[i]
            grad = grad * (cache["acts"][f"d{i}"] > 0.0)
            k, _ = self._conv(f"d{i}")
            dk, db, grad = conv2d_backward(cache["cols"][f"d{i}"],
                                           cache["x_shapes"][f"d{i}"], k, grad)
            self._accum(f"d{i}", dk, db)
        return grad


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0,
             names: Iterable[str] | None = None) -> None:
    """In-place SGD with classical momentum."""
    keys = list(names) if names is not None else list(store.keys())
    for name in keys:
        p = store[name]
        if p.grad is None:
            raise MissingGrad(f"no gradient for parameter {name!r}")
        if momentum != 0.0:
            buf = p.state.get("momentum")
            if buf is None:
                buf = np.zeros_like(p.value)
                p.state["momentum"] = buf
            buf *= momentum
            buf += p.grad
            p.value -= lr * buf
        else:
            p.value -= lr * p.grad


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              names: Iterable[str] | None = None) -> None:
    """In-place Adam with bias correction."""
    keys = list(names) if names is not None else list(store.keys())
    for name in keys:
        p = store[name]
        if p.grad is None:
            raise MissingGrad(f"no gradient for parameter {name!r}")
        m = p.state.setdefault("m", np.zeros_like(p.value))
        v = p.state.setdefault("v", np.zeros_like(p.value))
        t = p.state.get("t", 0) + 1
        p.state["t"] = t
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(p.grad)
        mh = m / (1.0 - beta1 ** t)
        vh = v / (1.0 - beta2 ** t)
        p.value -= lr * mh / (np.sqrt(vh) + eps)


def optimizer_step(store: ParamStore, kind: str, lr: float,
                   momentum: float = 0.9,
                   names: Iterable[str] | None = None) -> None:
    if kind == "adam":
        adam_step(store, lr, names=names)
    elif kind == "sgd":
        sgd_step(store, lr, momentum=momentum, names=names)
    else:
        raise ValueError(f"unknown optimizer {kind!r}")
