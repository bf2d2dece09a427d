"""Analytic FLOPs / memory model for convolutional networks.

FLOPs are multiply-accumulate counts (no factor of two). Batch norm, ReLU and
pooling contribute no FLOPs; dense layers are treated as 1x1 convolutions on a
1x1 grid.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import DimensionError
from .nnet import ArchitectureSpec, build_embedding, gaze_estimator
from .nnet.arch import DctEmbeddingNet, MLPHead, ResNet18Rgb
from .nnet.layers import (BatchNorm, Conv2D, Dense, GlobalAvgPool, MaxPool2D, Module, ReLU,
                          ResidualBlock, Sequential)

FOOTER = "FLOPs are multiply-accumulates over conv and dense layers; BN, ReLU and pooling count as zero."

SUPPORTED = (Conv2D, Dense, BatchNorm, ReLU, GlobalAvgPool, MaxPool2D, Sequential, ResidualBlock,
             DctEmbeddingNet, ResNet18Rgb, MLPHead)


class UnsupportedLayerError(TypeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    n_prev: int
    s: int
    n: int
    m: int
    m_prev: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) != v or v < 1:
                raise ValueError(f"LayerSpec.{k} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class LayerCost:
    flops: int
    memory: int
    out_size: int


def layer_cost(spec: LayerSpec) -> LayerCost:
    """F = n_prev s^2 n m^2, M = m_prev^2 n_prev + m^2 n + m^2 s^2 n_prev, O = n m^2."""
    n_prev, s, n, m, m_prev = spec.n_prev, spec.s, spec.n, spec.m, spec.m_prev
    flops = n_prev * s * s * n * m * m
    memory = m_prev * m_prev * n_prev + m * m * n + m * m * s * s * n_prev
    return LayerCost(flops=flops, memory=memory, out_size=n * m * m)


@dataclass
class LayerRow:
    name: str
    spec: LayerSpec
    cost: LayerCost

    def as_dict(self):
        return {"layer": self.name, **asdict(self.spec), **asdict(self.cost)}


@dataclass
class NetworkCost:
    arch: str
    resolution: int
    flops: int = 0
    params: int = 0
    layers: list[LayerRow] = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def summary_line(self) -> str:
        return f"{self.arch},{self.resolution},{self.gflops:.4f},{self.params}"


def _check_supported(net: Module):
    for m in net.modules():
        if not isinstance(m, SUPPORTED):
            raise UnsupportedLayerError(f"no cost rule for layer type {type(m).__name__}")


def graph_cost(parts, arch="custom", resolution=0) -> NetworkCost:
    """Cost of a chain of ``(prefix, module, input_shape)`` parts."""
    total = NetworkCost(arch=arch, resolution=resolution)
    for prefix, net, shape in parts:
        _check_supported(net)
        _, specs = net.conv_specs(shape)
        for name, n_prev, s, n, m, m_prev in specs:
            ls = LayerSpec(n_prev, s, n, m, m_prev)
            row = LayerRow(f"{prefix}{name}", ls, layer_cost(ls))
            total.layers.append(row)
            total.flops += row.cost.flops
            total.params += s * s * n_prev * n + n
        total.params += sum(2 * m.params["gamma"].size for m in net.modules() if isinstance(m, BatchNorm))
    return total


def network_cost(arch: ArchitectureSpec, resolution: int, include_estimator: bool = False) -> NetworkCost:
    """Totals for the embedding network (optionally plus the gaze estimator head)
    applied to a ``resolution`` x ``resolution`` source image."""
    if resolution <= 0 or resolution % 16:
        raise DimensionError(f"resolution must be a positive multiple of 16, got {resolution}")
    net = build_embedding(arch)
    parts = [("", net, net.input_shapes(arch, resolution))]
    if include_estimator:
        parts.append(("estimator.", gaze_estimator(arch.feature_dim), (arch.feature_dim,)))
    return graph_cost(parts, arch.name, resolution)


def empty_cost(resolution: int = 0) -> NetworkCost:
    return graph_cost([("", Sequential(), (resolution, resolution, 3))], "empty", resolution)


def cost_ratio(a: ArchitectureSpec, b: ArchitectureSpec, resolution: int) -> float:
    """FLOPs(a) / FLOPs(b) at equal source resolution."""
    return network_cost(a, resolution).flops / network_cost(b, resolution).flops


@dataclass
class ScalingReport:
    shape1: tuple
    shape2: tuple
    rows: list[dict]

    @property
    def first_memory_ratio(self) -> float:
        return self.rows[0]["M1"] / self.rows[0]["M2"]

    def flops_ratios(self) -> list[float]:
        return [r["F1"] / r["F2"] for r in self.rows]


def scaling_analysis(shape1, shape2, channels=(64, 64, 64, 64), s=3) -> ScalingReport:
    """Compare two input shapes (H, W, C) feeding the same stack of stride-1 convs.

    The first layer's FLOPs must match. Each later layer's F_l = n_{l-1} s^2 O_l
    and M_l = O_{l-1} + O_l + s^2 n_{l-1} m_l^2 are reported per input, so their
    ratio tracks O_l(I1) / O_l(I2).
    """
    (h1, w1, c1), (h2, w2, c2) = shape1, shape2
    if h1 != w1 or h2 != w2:
        raise DimensionError("scaling analysis expects square inputs")
    rows = []
    prev = (c1, c2)
    for layer, n in enumerate(channels, start=1):
        a = layer_cost(LayerSpec(prev[0], s, n, h1, h1))
        b = layer_cost(LayerSpec(prev[1], s, n, h2, h2))
        rows.append({"layer": layer, "F1": a.flops, "F2": b.flops, "M1": a.memory, "M2": b.memory,
                     "O1": a.out_size, "O2": b.out_size})
        prev = (n, n)
    if rows and rows[0]["F1"] != rows[0]["F2"]:
        raise ValueError("first-layer FLOPs differ; scaling analysis assumes they are equal")
    return ScalingReport(tuple(shape1), tuple(shape2), rows)


CSV_FIELDS = ["layer", "n_prev", "s", "n", "m", "m_prev", "flops", "memory", "out_size"]


def write_cost_csv(cost: NetworkCost, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in cost.layers:
            w.writerow(row.as_dict())
        fh.write(f"# total_flops={cost.flops} params={cost.params}\n# {FOOTER}\n")
