"""A small convolutional action-value network in numpy, with hand-written backprop.

Tensors are channels-first: ``(N, C, *spatial)`` with one spatial axis per
image dimension (2 or 3).  Every layer caches what its backward pass needs
during ``forward`` and accumulates parameter gradients in ``grads``.
"""

from __future__ import annotations

import io
import itertools
import json
import struct

import numpy as np

from .volume import FileFormatError

POLICY_MAGIC = b"VPOL"


class ShapeMismatch(ValueError):
    pass


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}  # non-trainable buffers

    def describe(self) -> dict:
        return {"kind": self.kind}

    def out_shape(self, shape):
        return shape

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Conv(Layer):
    """Same-padded convolution with a cubic kernel, stride 1."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, ndim=2, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.ndim = in_ch, out_ch, kernel, ndim
        fan_in = in_ch * kernel ** ndim
        lim = np.sqrt(6.0 / fan_in)
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["W"] = rng.uniform(-lim, lim, size=(out_ch, in_ch) + (kernel,) * ndim).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "in": self.in_ch, "out": self.out_ch, "kernel": self.kernel, "ndim": self.ndim}

    def out_shape(self, shape):
        if shape[0] != self.in_ch:
            raise ShapeMismatch(f"conv expects {self.in_ch} channels, got {shape[0]}")
        return (self.out_ch,) + tuple(shape[1:])

    def _offsets(self):
        return list(itertools.product(range(self.kernel), repeat=self.ndim))

    def forward(self, x, train=False):
        p = self.kernel // 2
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * self.ndim)
        offs = self._offsets()
        # im2col as (C, K, N, *spatial) so one GEMM covers the whole batch
        cols = np.empty((c, len(offs), n) + spatial, dtype=x.dtype)
        for k, off in enumerate(offs):
            sl = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
            cols[:, k] = xp[sl].swapaxes(0, 1)
        cols = cols.reshape(c * len(offs), -1)
        out = self.params["W"].reshape(self.out_ch, -1) @ cols
        out += self.params["b"][:, None]
        self._cache = (cols, x.shape)
        return np.moveaxis(out.reshape((self.out_ch, n) + spatial), 0, 1)

    def backward(self, dout):
        cols, xshape = self._cache
        n, c = xshape[:2]
        spatial = xshape[2:]
        p = self.kernel // 2
        d = np.moveaxis(dout, 1, 0).reshape(self.out_ch, -1)
        W2 = self.params["W"].reshape(self.out_ch, -1)
        self.grads["W"] += (d @ cols.T).reshape(self.grads["W"].shape)
        self.grads["b"] += d.sum(axis=1)
        dcols = (W2.T @ d).reshape((c, -1, n) + spatial)
        dxp = np.zeros((n, c) + tuple(s + 2 * p for s in spatial), dtype=dout.dtype)
        for k, off in enumerate(self._offsets()):
            sl = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
            dxp[sl] += dcols[:, k].swapaxes(0, 1)
        inner = (slice(None), slice(None)) + tuple(slice(p, p + s) for s in spatial)
        return dxp[inner]


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing voxels that do not fill a window are dropped."""

    kind = "pool"

    def __init__(self, size=2, ndim=2):
        super().__init__()
        self.size, self.ndim = size, ndim

    def describe(self):
        return {"kind": self.kind, "size": self.size, "ndim": self.ndim}

    def out_shape(self, shape):
        return (shape[0],) + tuple(s // self.size for s in shape[1:])

    def forward(self, x, train=False):
        s, nd = self.size, self.ndim
        out_sp = tuple(d // s for d in x.shape[2:])
        offs = list(itertools.product(range(s), repeat=nd))
        views = [x[(slice(None), slice(None)) + tuple(slice(o, o + q * s, s) for o, q in zip(off, out_sp))]
                 for off in offs]
        out = views[0].copy()
        idx = np.zeros(out.shape, dtype=np.int8)
        for k, v in enumerate(views[1:], 1):
            better = v > out
            out[better] = v[better]
            idx[better] = k
        self._cache = (x.shape, out_sp, idx, offs)
        return out

    def backward(self, dout):
        xshape, out_sp, idx, offs = self._cache
        s = self.size
        dx = np.zeros(xshape, dtype=dout.dtype)
        for k, off in enumerate(offs):
            sl = (slice(None), slice(None)) + tuple(slice(o, o + q * s, s) for o, q in zip(off, out_sp))
            dx[sl] = np.where(idx == k, dout, 0)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class BatchNorm(Layer):
    """Per-channel normalization.

    Training mode normalizes with batch statistics and updates running
    averages; inference mode uses the frozen running statistics.
    """

    kind = "bn"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state["mean"] = np.zeros(channels, dtype=dtype)
        self.state["var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x, train=False):
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.state["mean"] = (m * self.state["mean"] + (1 - m) * mean).astype(self.state["mean"].dtype)
            self.state["var"] = (m * self.state["var"] + (1 - m) * var).astype(self.state["var"].dtype)
        else:
            mean, var = self.state["mean"], self.state["var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        self._cache = (xhat, inv, train, axes)
        return (self.params["gamma"].reshape(bs) * xhat + self.params["beta"].reshape(bs)).astype(x.dtype)

    def backward(self, dout):
        xhat, inv, train, axes = self._cache
        bs = self._bshape(dout)
        self.grads["gamma"] += (dout * xhat).sum(axis=axes)
        self.grads["beta"] += dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bs)
        if not train:
            return dxhat * inv.reshape(bs)
        m = dout.size / self.channels
        return (inv.reshape(bs) / m) * (m * dxhat - dxhat.sum(axis=axes).reshape(bs)
                                        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs))


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        lim = np.sqrt(6.0 / n_in)
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["W"] = rng.uniform(-lim, lim, size=(n_out, n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeMismatch(f"dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout):
        self.grads["W"] += dout.T @ self._x
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"]


# -- architectures ---------------------------------------------------------

def desk_architecture(input_shape, arity, channels=(4, 8, 16), hidden=(64,), batch_norm=False,
                      pool_after=2) -> dict:
    """Small conv net: ``len(channels)`` conv blocks, then dense layers, then the action head."""
    return _arch(input_shape, arity, channels, hidden, batch_norm, pool_after)


def paper_architecture(input_shape, arity) -> dict:
    """Full-size layout: conv 8-32-32-128-128 (pool after the first two), dense 512-512-64."""
    return _arch(input_shape, arity, (8, 32, 32, 128, 128), (512, 512, 64), True, 2)


def _arch(input_shape, arity, channels, hidden, batch_norm, pool_after):
    layers = []
    for i, c in enumerate(channels):
        layers.append({"kind": "conv", "out": int(c), "kernel": 3})
        if batch_norm:
            layers.append({"kind": "bn"})
        layers.append({"kind": "relu"})
        if i < pool_after:
            layers.append({"kind": "pool", "size": 2})
    layers.append({"kind": "flatten"})
    for h in hidden:
        layers.append({"kind": "dense", "out": int(h)})
        if batch_norm:
            layers.append({"kind": "bn"})
        layers.append({"kind": "relu"})
    layers.append({"kind": "dense", "out": int(arity)})
    return {"input": [int(s) for s in input_shape], "layers": layers}


class Network:
    """Sequential network built from an architecture descriptor."""

    def __init__(self, arch: dict, seed: int = 0, dtype=np.float32):
        self.arch = json.loads(json.dumps(arch))
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        shape = tuple(arch["input"])
        ndim = len(shape) - 1
        self.layers: list[Layer] = []
        for spec in arch["layers"]:
            kind = spec["kind"]
            if kind == "conv":
                layer = Conv(shape[0], spec["out"], spec.get("kernel", 3), ndim, rng, dtype)
            elif kind == "pool":
                layer = MaxPool(spec.get("size", 2), ndim)
            elif kind == "relu":
                layer = ReLU()
            elif kind == "bn":
                layer = BatchNorm(shape[0], spec.get("momentum", 0.9), spec.get("eps", 1e-5), dtype)
            elif kind == "flatten":
                layer = Flatten()
            elif kind == "dense":
                layer = Dense(shape[0], spec["out"], rng, dtype)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape

    @property
    def input_shape(self) -> tuple:
        return tuple(self.arch["input"])

    @property
    def arity(self) -> int:
        return int(self.output_shape[0])

    def tensors(self):
        """``(layer_index, name, array)`` for all trainable and buffer tensors, in declaration order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((i, name, layer.params[name]))
            for name in sorted(layer.state):
                out.append((i, name, layer.state[name]))
        return out

    def parameters(self):
        return [(layer, name) for layer in self.layers for name in sorted(layer.params)]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _check(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"network expects input {self.input_shape}, got {tuple(x.shape[1:])}")

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        self._check(x)
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, dout):
        """Back-propagate ``dout`` (gradient wrt outputs); returns the input gradient."""
        d = np.asarray(dout, dtype=self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def input_gradient(self, x, train=False):
        """Gradient of the summed outputs with respect to the input, one backward pass."""
        y = self.forward(x, train)
        self.zero_grad()
        return self.backward(np.ones_like(y))

    def copy(self, dtype=None) -> "Network":
        dtype = self.dtype if dtype is None else dtype
        net = Network(self.arch, 0, dtype)
        net.load_tensors(self)
        net.zero_grad()
        return net

    def load_tensors(self, other: "Network"):
        for (i, name, src) in other.tensors():
            layer = self.layers[i]
            store = layer.params if name in layer.params else layer.state
            store[name] = np.array(src, dtype=self.dtype)

    def set_all(self, value: float):
        for i, name, t in self.tensors():
            t[...] = value

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        desc = json.dumps(self.arch, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(POLICY_MAGIC)
        buf.write(struct.pack("<I", len(desc)))
        buf.write(desc)
        for _, _, t in self.tensors():
            buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Network":
        if raw[:4] != POLICY_MAGIC:
            raise FileFormatError("not a policy file (bad magic)")
        (n,) = struct.unpack_from("<I", raw, 4)
        arch = json.loads(raw[8:8 + n].decode())
        net = cls(arch, 0, np.float32)
        off = 8 + n
        for i, name, t in net.tensors():
            size = t.size * 4
            if off + size > len(raw):
                raise FileFormatError("policy file truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=t.size, offset=off).reshape(t.shape)
            layer = net.layers[i]
            store = layer.params if name in layer.params else layer.state
            store[name] = arr.astype(np.float32)
            off += size
        if off != len(raw):
            raise FileFormatError("trailing bytes in policy file")
        net.zero_grad()
        return net

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class RMSProp:
    """RMS-propagation update without momentum."""

    def __init__(self, net: Network, lr=6e-5, rho=0.9, eps=1e-6):
        self.net, self.lr, self.rho, self.eps = net, lr, rho, eps
        self.cache = {(id(layer), name): np.zeros_like(layer.params[name]) for layer, name in net.parameters()}

    def step(self):
        for layer, name in self.net.parameters():
            g = layer.grads[name]
            c = self.cache[(id(layer), name)]
            c *= self.rho
            c += (1 - self.rho) * g * g
            layer.params[name] -= (self.lr * g / (np.sqrt(c) + self.eps)).astype(layer.params[name].dtype)


# -- verification ----------------------------------------------------------

def relative_error(a, b, floor=1e-6) -> np.ndarray:
    """``|a - b| / max(|a| + |b|, floor)``; the floor keeps true zeros from dividing by noise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def gradient_check(layer: Layer, x, rng, n_probe: int = 20, h: float = 1e-6, train: bool = True) -> dict:
    """Compare ``layer.backward`` with central differences of ``sum(w * layer(x))``.

    Works in float64 on copies of the inputs; probes ``n_probe`` random
    entries of the input and of every parameter.  Returns the worst relative
    error per tensor (``"input"`` and the parameter names).
    """
    x = np.array(x, dtype=np.float64)
    for k in list(layer.params):
        layer.params[k] = layer.params[k].astype(np.float64)
    for k in list(layer.state):
        layer.state[k] = layer.state[k].astype(np.float64)
    saved_state = {k: v.copy() for k, v in layer.state.items()}
    w = rng.normal(size=layer.forward(x, train).shape)

    def objective():
        val = float(np.sum(w * layer.forward(x, train)))
        for k, v in saved_state.items():  # running statistics must not drift between probes
            layer.state[k] = v.copy()
        return val

    layer.zero_grad()
    layer.forward(x, train)
    dx = layer.backward(w)
    for k, v in saved_state.items():
        layer.state[k] = v.copy()
    worst = {}
    targets = [("input", x, dx)] + [(k, layer.params[k], layer.grads[k]) for k in sorted(layer.params)]
    for name, arr, grad in targets:
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        errs = []
        for i in rng.choice(flat.size, min(n_probe, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            errs.append(float(relative_error((up - down) / (2 * h), gflat[i])))
        worst[name] = max(errs)
    return worst
