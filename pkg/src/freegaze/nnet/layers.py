"""Layers with hand-written backward passes.

Tensors are NHWC. Every layer caches what its backward pass needs during
``forward`` and *accumulates* parameter gradients in ``backward``; call
``zero_grad`` between steps.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import NonFiniteError


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix: str = ""):
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def zero_grad(self):
        for m in self.modules():
            for k, p in m.params.items():
                m.grads[k] = np.zeros_like(p)

    def astype(self, dtype):
        for m in self.modules():
            for d in (m.params, m.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        self.zero_grad()
        return self

    @property
    def dtype(self):
        for _, p in self.named_params():
            return p.dtype
        return np.dtype(np.float32)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.named_params())
        out.update(self.named_buffers())
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        mine = self.state_tensors()
        missing = set(mine) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for m_name, m in self._leaf_paths():
            for d in (m.params, m.buffers):
                for k in d:
                    src = tensors[m_name + k]
                    if src.shape != d[k].shape:
                        raise ValueError(f"{m_name + k}: shape {src.shape} != {d[k].shape}")
                    d[k] = np.array(src, dtype=d[k].dtype)
        self.zero_grad()

    def _leaf_paths(self, prefix=""):
        yield prefix, self
        for name, child in self.children.items():
            yield from child._leaf_paths(f"{prefix}{name}.")

    def conv_specs(self, shape):
        """Propagate an NHWC shape (without batch) and list conv/dense geometry.

        Returns ``(out_shape, specs)`` where each spec is a tuple
        ``(name, n_prev, s, n, m, m_prev)``.
        """
        raise NotImplementedError(type(self).__name__)

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())


def _check_finite(name, arr):
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by layer {name!r}")


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_out_size(size, k, stride):
    return same_padding(size, k, stride)[0]


class Conv2D(Module):
    def __init__(self, cin, cout, k=3, stride=1, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        std = math.sqrt(2.0 / (k * k * cin))
        self.params["W"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)
        if bias:
            self.params["b"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def _cols(self, x):
        b, h, w, c = x.shape
        k, s = self.k, self.stride
        ho, pt, pb = same_padding(h, k, s)
        wo, pl, pr = same_padding(w, k, s)
        if k == 1 and s == 1:
            return x.reshape(-1, c), (ho, wo, pt, pl)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        win = win[:, :ho, :wo]  # (b, ho, wo, c, k, k)
        return win.reshape(b * ho * wo, c * k * k), (ho, wo, pt, pl)

    def _wmat(self):
        w = self.params["W"]
        return w.transpose(2, 0, 1, 3).reshape(-1, self.cout)  # rows ordered (c, i, j)

    def forward(self, x, train=False):
        if x.shape[-1] != self.cin:
            raise ValueError(f"conv expects {self.cin} channels, got {x.shape[-1]}")
        x = x.astype(self.params["W"].dtype, copy=False)
        cols, (ho, wo, pt, pl) = self._cols(x)
        out = cols @ self._wmat()
        if "b" in self.params:
            out += self.params["b"]
        self._cache = (x.shape, cols, ho, wo, pt, pl)
        return out.reshape(x.shape[0], ho, wo, self.cout)

    def backward(self, dout):
        xshape, cols, ho, wo, pt, pl = self._cache
        b, h, w, c = xshape
        k, s = self.k, self.stride
        d2 = dout.reshape(-1, self.cout).astype(cols.dtype, copy=False)
        gw = cols.T @ d2
        self.grads["W"] += gw.reshape(c, k, k, self.cout).transpose(1, 2, 0, 3)
        if "b" in self.params:
            self.grads["b"] += d2.sum(axis=0)
        dcols = d2 @ self._wmat().T
        if k == 1 and s == 1:
            return dcols.reshape(xshape)
        dcols = dcols.reshape(b, ho, wo, c, k, k)
        hp = max((ho - 1) * s + k, h + pt)
        wp = max((wo - 1) * s + k, w + pl)
        dxp = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
        return dxp[:, pt:pt + h, pl:pl + w]

    def conv_specs(self, shape, name="conv"):
        h, w, c = shape
        m = _conv_out_size(h, self.k, self.stride)
        return (m, _conv_out_size(w, self.k, self.stride), self.cout), [
            (name, c, self.k, self.cout, m, h)
        ]


class BatchNorm(Module):
    def __init__(self, c, momentum=0.9, eps=1e-5, gain=1.0, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.full(c, gain, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["mean"] = np.zeros(c, dtype=dtype)
        self.buffers["var"] = np.ones(c, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def forward(self, x, train=False):
        dt = self.params["gamma"].dtype
        axes = tuple(range(x.ndim - 1))
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch norm in train mode needs a batch of at least 2")
            x64 = x.astype(np.float64)
            mean = x64.mean(axis=axes)
            var = ((x64 - mean) ** 2).mean(axis=axes)
            m = self.momentum
            self.buffers["mean"] = (m * self.buffers["mean"] + (1 - m) * mean).astype(dt)
            self.buffers["var"] = (m * self.buffers["var"] + (1 - m) * var).astype(dt)
        else:
            mean = self.buffers["mean"].astype(np.float64)
            var = self.buffers["var"].astype(np.float64)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((x - mean.astype(dt)) * inv.astype(dt)).astype(dt, copy=False)
        self._cache = (xhat, inv.astype(dt), train)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dout):
        xhat, inv, train = self._cache
        axes = tuple(range(dout.ndim - 1))
        self.grads["gamma"] += (dout * xhat).sum(axis=axes, dtype=np.float64).astype(xhat.dtype)
        self.grads["beta"] += dout.sum(axis=axes, dtype=np.float64).astype(xhat.dtype)
        dxhat = dout * self.params["gamma"]
        if not train:
            return dxhat * inv
        mean_d = dxhat.mean(axis=axes, dtype=np.float64).astype(xhat.dtype)
        mean_dx = (dxhat * xhat).mean(axis=axes, dtype=np.float64).astype(xhat.dtype)
        return inv * (dxhat - mean_d - xhat * mean_dx)

    def conv_specs(self, shape, name="bn"):
        return shape, []


class ReLU(Module):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask

    def conv_specs(self, shape, name="relu"):
        return shape, []


class Dense(Module):
    def __init__(self, din, dout, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.din, self.dout = din, dout
        self.params["W"] = (rng.standard_normal((din, dout)) * math.sqrt(2.0 / din)).astype(dtype)
        self.params["b"] = np.zeros(dout, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        x = x.astype(self.params["W"].dtype, copy=False)
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] += self._x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["W"].T

    def conv_specs(self, shape, name="dense"):
        (d,) = shape
        return (self.dout,), [(name, d, 1, self.dout, 1, 1)]


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        b, h, w, c = self._shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), self._shape).copy()

    def conv_specs(self, shape, name="pool"):
        return (shape[-1],), []


class MaxPool2D(Module):
    def __init__(self, k=3, stride=2):
        super().__init__()
        self.k, self.stride = k, stride

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        k, s = self.k, self.stride
        ho, pt, pb = same_padding(h, k, s)
        wo, pl, pr = same_padding(w, k, s)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        flat = win.reshape(b, ho, wo, c, k * k)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg, ho, wo, pt, pl, xp.shape)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        xshape, arg, ho, wo, pt, pl, pshape = self._cache
        k, s = self.k, self.stride
        dxp = np.zeros(pshape, dtype=dout.dtype)
        di, dj = np.divmod(arg, k)
        for i in range(k):
            for j in range(k):
                sel = (di == i) & (dj == j)
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dout * sel
        h, w = xshape[1:3]
        return dxp[:, pt:pt + h, pl:pl + w]

    def conv_specs(self, shape, name="maxpool"):
        h, w, c = shape
        return (_conv_out_size(h, self.k, self.stride), _conv_out_size(w, self.k, self.stride), c), []


class Sequential(Module):
    def __init__(self, *named):
        super().__init__()
        for name, m in named:
            self.add(name, m)

    def forward(self, x, train=False):
        for name, m in self.children.items():
            x = m.forward(x, train)
            _check_finite(name, x)
        return x

    def backward(self, dout):
        for m in reversed(list(self.children.values())):
            dout = m.backward(dout)
        return dout

    def conv_specs(self, shape, name=""):
        specs = []
        for cname, m in self.children.items():
            shape, s = m.conv_specs(shape, f"{name}.{cname}" if name else cname)
            specs += s
        return shape, specs


class ResidualBlock(Module):
    """Two 3x3 conv/BN stages plus shortcut; the shortcut projects (1x1 conv + BN)
    whenever stride or channel count changes."""

    def __init__(self, cin, cout, stride=1, zero_init=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add("conv1", Conv2D(cin, cout, 3, stride, rng=rng, dtype=dtype))
        self.add("bn1", BatchNorm(cout, dtype=dtype))
        self.add("relu1", ReLU())
        self.add("conv2", Conv2D(cout, cout, 3, 1, rng=rng, dtype=dtype))
        self.add("bn2", BatchNorm(cout, gain=0.0 if zero_init else 1.0, dtype=dtype))
        self.project = stride != 1 or cin != cout
        if self.project:
            self.add("proj", Conv2D(cin, cout, 1, stride, rng=rng, dtype=dtype))
            self.add("proj_bn", BatchNorm(cout, dtype=dtype))
        self.add("relu_out", ReLU())

    def forward(self, x, train=False):
        c = self.children
        y = c["conv1"].forward(x, train)
        y = c["relu1"].forward(c["bn1"].forward(y, train))
        y = c["bn2"].forward(c["conv2"].forward(y, train), train)
        sc = c["proj_bn"].forward(c["proj"].forward(x, train), train) if self.project else x
        return c["relu_out"].forward(y + sc)

    def backward(self, dout):
        c = self.children
        d = c["relu_out"].backward(dout)
        dy = c["conv2"].backward(c["bn2"].backward(d))
        dx = c["conv1"].backward(c["bn1"].backward(c["relu1"].backward(dy)))
        if self.project:
            return dx + c["proj"].backward(c["proj_bn"].backward(d))
        return dx + d

    def conv_specs(self, shape, name="block"):
        c = self.children
        s1, a = c["conv1"].conv_specs(shape, f"{name}.conv1")
        s2, b = c["conv2"].conv_specs(s1, f"{name}.conv2")
        specs = a + b
        if self.project:
            specs += c["proj"].conv_specs(shape, f"{name}.proj")[1]
        return s2, specs
