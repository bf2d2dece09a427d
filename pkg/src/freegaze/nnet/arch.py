"""Network graphs: the two-path DCT embedding network, the RGB ResNet-18
reference, and the small MLP heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (BatchNorm, Conv2D, Dense, GlobalAvgPool, MaxPool2D, Module, ReLU,
                     ResidualBlock, Sequential, _check_finite)

PROJECTION_DIM = 128
ESTIMATOR_HIDDEN = 128


def _ch(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


@dataclass
class ArchitectureSpec:
    name: str = "freegaze8"  # "freegaze8" | "resnet18_rgb"
    width: float = 1.0
    cy: int = 6
    cc: int = 3

    def __post_init__(self):
        if not 0 < self.width <= 1:
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width}")
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}")

    @property
    def feature_dim(self) -> int:
        return _ch(512, self.width)

    def to_json(self):
        return asdict(self)


class DctEmbeddingNet(Module):
    """Late-concatenation embedding network over (Y, CbCr) coefficient grids.

    Y path: input BN, block A (stride 1), block B (stride 2).
    CbCr path: input BN, one 3x3 conv + BN + ReLU.
    Trunk: concat, block C (stride 2), block D, global average pool.
    """

    def __init__(self, spec: ArchitectureSpec, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = spec.width
        a, b, t = _ch(64, w), _ch(128, w), _ch(512, w)
        self.y_path = self.add("y", Sequential(
            ("in_bn", BatchNorm(spec.cy, dtype=dtype)),
            ("block_a", ResidualBlock(spec.cy, a, 1, rng=rng, dtype=dtype)),
            ("block_b", ResidualBlock(a, b, 2, rng=rng, dtype=dtype)),
        ))
        self.c_path = self.add("cbcr", Sequential(
            ("in_bn", BatchNorm(2 * spec.cc, dtype=dtype)),
            ("conv", Conv2D(2 * spec.cc, b, 3, 1, rng=rng, dtype=dtype)),
            ("bn", BatchNorm(b, dtype=dtype)),
            ("relu", ReLU()),
        ))
        self.trunk = self.add("trunk", Sequential(
            ("block_c", ResidualBlock(2 * b, t, 2, rng=rng, dtype=dtype)),
            ("block_d", ResidualBlock(t, t, 1, rng=rng, dtype=dtype)),
            ("pool", GlobalAvgPool()),
        ))
        self._split = b

    def forward(self, inputs, train=False):
        y, cbcr = inputs
        fy = self.y_path.forward(y, train)
        fc = self.c_path.forward(cbcr, train)
        if fy.shape[1:3] != fc.shape[1:3]:
            raise ValueError(f"path outputs disagree spatially: {fy.shape} vs {fc.shape}")
        return self.trunk.forward(np.concatenate([fy, fc], axis=-1), train)

    def backward(self, dh):
        d = self.trunk.backward(dh)
        return self.y_path.backward(d[..., :self._split]), self.c_path.backward(d[..., self._split:])

    def conv_specs(self, shapes, name=""):
        ys, cs = shapes
        oy, a = self.y_path.conv_specs(ys, "y")
        oc, b = self.c_path.conv_specs(cs, "cbcr")
        out, c = self.trunk.conv_specs((oy[0], oy[1], oy[2] + oc[2]), "trunk")
        return out, a + b + c

    @staticmethod
    def input_shapes(spec: ArchitectureSpec, resolution: int):
        return (resolution // 8, resolution // 8, spec.cy), (resolution // 16, resolution // 16, 2 * spec.cc)

    def path_shapes(self, spec: ArchitectureSpec, resolution: int):
        ys, cs = self.input_shapes(spec, resolution)
        return self.y_path.conv_specs(ys)[0], self.c_path.conv_specs(cs)[0]


class ResNet18Rgb(Module):
    """RGB ResNet-18 feature extractor (no dense layers), used as the cost and
    latency reference."""

    def __init__(self, spec: ArchitectureSpec, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = spec.width
        layers = [
            ("in_bn", BatchNorm(3, dtype=dtype)),
            ("stem", Conv2D(3, _ch(64, w), 7, 2, rng=rng, dtype=dtype)),
            ("stem_bn", BatchNorm(_ch(64, w), dtype=dtype)),
            ("stem_relu", ReLU()),
            ("maxpool", MaxPool2D(3, 2)),
        ]
        cin = _ch(64, w)
        for stage, base in enumerate((64, 128, 256, 512), start=1):
            cout = _ch(base, w)
            for k in range(2):
                stride = 2 if (k == 0 and stage > 1) else 1
                layers.append((f"layer{stage}_{k}", ResidualBlock(cin, cout, stride, rng=rng, dtype=dtype)))
                cin = cout
        layers.append(("pool", GlobalAvgPool()))
        self.body = self.add("body", Sequential(*layers))

    def forward(self, x, train=False):
        return self.body.forward(x, train)

    def backward(self, dh):
        return self.body.backward(dh)

    def conv_specs(self, shape, name=""):
        return self.body.conv_specs(shape)

    @staticmethod
    def input_shapes(spec, resolution):
        return (resolution, resolution, 3)


ARCHITECTURES = {"freegaze8": DctEmbeddingNet, "resnet18_rgb": ResNet18Rgb}


def build_embedding(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> Module:
    rng = np.random.default_rng([seed, 0xE3B])
    return ARCHITECTURES[spec.name](spec, rng=rng, dtype=dtype)


class MLPHead(Module):
    """dense -> ReLU -> dense."""

    def __init__(self, din, hidden, dout, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.body = self.add("mlp", Sequential(
            ("fc1", Dense(din, hidden, rng=rng, dtype=dtype)),
            ("relu", ReLU()),
            ("fc2", Dense(hidden, dout, rng=rng, dtype=dtype)),
        ))

    def forward(self, h, train=False):
        return self.body.forward(h, train)

    def backward(self, dz):
        return self.body.backward(dz)

    def conv_specs(self, shape, name="head"):
        return self.body.conv_specs(shape, name)


def projection_head(feature_dim: int, seed: int = 0, dtype=np.float32) -> MLPHead:
    rng = np.random.default_rng([seed, 0x9E0])
    return MLPHead(feature_dim, feature_dim, PROJECTION_DIM, rng=rng, dtype=dtype)


def gaze_estimator(feature_dim: int, seed: int = 0, dtype=np.float32) -> MLPHead:
    rng = np.random.default_rng([seed, 0x6A2E])
    return MLPHead(feature_dim, ESTIMATOR_HIDDEN, 2, rng=rng, dtype=dtype)


def forward_backward(net: Module, inputs, upstream, train=True):
    """One forward pass and one backward pass with the given output gradient.

    Returns ``(outputs, param_grads, input_grads)``; gradients are fresh (the
    network's accumulators are zeroed first).
    """
    net.zero_grad()
    out = net.forward(inputs, train)
    if np.shape(upstream) != out.shape:
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} != output {out.shape}")
    dx = net.backward(np.asarray(upstream, dtype=out.dtype))
    _check_finite("backward", dx[0] if isinstance(dx, tuple) else dx)
    return out, {k: g.copy() for k, g in net.named_grads()}, dx
