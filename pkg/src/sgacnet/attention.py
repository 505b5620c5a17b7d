"""Channel and spatial attention gates and the two-branch fusion module.

Three gate kinds are provided:

``SE``
    squeeze-and-excitation: GAP -> FC -> ReLU -> FC -> sigmoid, one gate per
    channel.
``SPA147``
    spatial pyramid attention: the input is average pooled to 7x7, 4x4 and
    1x1; each pooled map is collapsed to a C-vector by a depthwise conv whose
    kernel equals the bin size, the three vectors are concatenated and passed
    through the same FC -> ReLU -> FC -> sigmoid head as SE.
``SPGE``
    spatial group-wise enhance: channels are split into G groups; within a
    group, each position's feature is dotted with the group's mean feature,
    the resulting map is normalised over space, scaled and shifted by
    per-group parameters and squashed into a spatial gate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import functional as F
from .errors import DimensionError, InvalidSpecError
from .nn import Conv2d, Linear, Module, Parameter
from .tensor import Tensor, as_tensor


class AttentionKind(str, Enum):
    SE = "SE"
    SPGE = "SPGE"
    SPA147 = "SPA147"

    @classmethod
    def parse(cls, value) -> "AttentionKind":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise InvalidSpecError(f"unknown attention kind {value!r}; expected one of "
                               f"{[k.value for k in cls]}")


@dataclass
class GateResult:
    gated: Tensor
    gates: Tensor


def effective_reduction(channels: int, reduction: int, min_hidden: int = 4) -> int:
    """Largest r <= ``reduction`` dividing ``channels`` with channels/r >= min_hidden
    (or r = 1 when the width is already below ``min_hidden``)."""
    if reduction < 1:
        raise InvalidSpecError(f"reduction must be >= 1, got {reduction}")
    for r in range(min(reduction, channels), 0, -1):
        if channels % r == 0 and (channels // r >= min_hidden or r == 1):
            return r
    return 1


class _ExcitationHead(Module):
    """FC -> ReLU -> FC -> sigmoid on an (n, d) descriptor, returns (n, C, 1, 1)."""

    def __init__(self, d_in, channels, hidden, rng=None):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def forward(self, desc):
        n = desc.shape[0]
        z = self.fc2(F.relu(self.fc1(desc)))
        return F.reshape(F.sigmoid(z), (n, -1, 1, 1))


class SEGate(Module):
    def __init__(self, channels, reduction=16, rng=None):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise InvalidSpecError(f"reduction {reduction} must divide channel count {channels}")
        self.channels = channels
        self.head = _ExcitationHead(channels, channels, channels // reduction, rng)

    def forward(self, x) -> GateResult:
        x = as_tensor(x)
        n, c = x.shape[:2]
        desc = F.reshape(F.global_avg_pool(x), (n, c))
        gates = self.head(desc)
        return GateResult(F.mul(x, gates), gates)


class SPAGate(Module):
    def __init__(self, channels, bins=(7, 4, 1), reduction=16, rng=None):
        super().__init__()
        bins = tuple(int(b) for b in bins)
        if not bins or any(b < 1 for b in bins) or any(a <= b for a, b in zip(bins, bins[1:])):
            raise InvalidSpecError(f"bins must be a strictly decreasing positive list, got {bins}")
        if reduction < 1 or channels % reduction:
            raise InvalidSpecError(f"reduction {reduction} must divide channel count {channels}")
        self.bins = bins
        self.channels = channels
        self.resize = [Conv2d(channels, channels, b, groups=channels, rng=rng) for b in bins]
        self.head = _ExcitationHead(len(bins) * channels, channels, channels // reduction, rng)

    def descriptor(self, x) -> Tensor:
        n, c = x.shape[:2]
        parts = [F.reshape(conv(F.adaptive_avg_pool(x, b, b)), (n, c))
                 for b, conv in zip(self.bins, self.resize)]
        return F.concat(parts, axis=1)

    def forward(self, x) -> GateResult:
        x = as_tensor(x)
        gates = self.head(self.descriptor(x))
        return GateResult(F.mul(x, gates), gates)


class SPGEGate(Module):
    """Spatial group-wise enhance; ``eps`` guards the spatial variance."""

    def __init__(self, channels, groups=4, eps=1e-5):
        super().__init__()
        if groups < 1 or channels % groups:
            raise InvalidSpecError(f"groups {groups} must divide channel count {channels}")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones((1, groups, 1, 1), dtype=np.float32))
        self.bias = Parameter(np.zeros((1, groups, 1, 1), dtype=np.float32))

    def forward(self, x) -> GateResult:
        x = as_tensor(x)
        n, c, h, w = x.shape
        g = self.groups
        xg = F.reshape(x, (n * g, c // g, h, w))
        sim = F.scale(F.mean(F.mul(xg, F.global_avg_pool(xg)), axis=1), c // g)  # (n*g, 1, h, w)
        sim = F.reshape(sim, (n, g, h, w))
        centred = F.sub(sim, F.mean(sim, axis=(2, 3)))
        var = F.mean(F.mul(centred, centred), axis=(2, 3))
        t = F.mul(centred, F.power(F.add(var, self.eps), -0.5))
        gates = F.sigmoid(F.add(F.mul(t, self.weight), self.bias))  # (n, g, h, w)
        gated = F.mul(xg, F.reshape(gates, (n * g, 1, h, w)))
        return GateResult(F.reshape(gated, (n, c, h, w)), gates)


def make_gate(kind, channels, *, reduction=16, groups=4, bins=(7, 4, 1), rng=None) -> Module:
    kind = AttentionKind.parse(kind)
    if kind is AttentionKind.SE:
        return SEGate(channels, effective_reduction(channels, reduction), rng)
    if kind is AttentionKind.SPA147:
        return SPAGate(channels, bins, effective_reduction(channels, reduction), rng)
    return SPGEGate(channels, math.gcd(groups, channels))


class AttentionFusion(Module):
    """Gate each modality with its own attention kind and sum the results."""

    def __init__(self, channels, kind_rgb="SPA147", kind_depth="SE", rng=None, **gate_kw):
        super().__init__()
        self.kind_rgb = AttentionKind.parse(kind_rgb)
        self.kind_depth = AttentionKind.parse(kind_depth)
        self.gate_rgb = make_gate(self.kind_rgb, channels, rng=rng, **gate_kw)
        self.gate_depth = make_gate(self.kind_depth, channels, rng=rng, **gate_kw)

    def forward(self, rgb, depth, diagnostics=None):
        rgb, depth = as_tensor(rgb), as_tensor(depth)
        if rgb.shape != depth.shape:
            axis = next(a for a, p, q in zip("nchw", rgb.shape, depth.shape) if p != q) \
                if rgb.ndim == depth.ndim else "rank"
            raise DimensionError(f"rgb {rgb.shape} and depth {depth.shape} differ", axis=axis)
        r = self.gate_rgb(rgb)
        d = self.gate_depth(depth)
        if diagnostics is not None:
            diagnostics.append({"rgb_gates": r.gates, "depth_gates": d.gates})
        return F.add(r.gated, d.gated)
