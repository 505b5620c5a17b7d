"""Light-weighted decoder and the dense baseline decoder.

A lightweight residual unit (LRU) on a C-channel map ``y``::

    r      = relu(BN(conv1x1_{C->Cb}(y)))                    shared reduction
    z_d    = A2(CAM(A1(r)))      A = depthwise 1x3 then 3x1, dilation 1
    z_m    = A2(CAM(A1(r)))      same layout, dilation dr
    out    = shuffle(BN(conv1x1_{Cb->C}(z_d + z_m)) + BN(conv1x1_{C->C}(y)), g)

CAM gates channels with ``sigmoid(conv1x1(GAP(v)))``.

Both decoder stages share one skeleton: a 3x3 conv-BN-ReLU changes the width,
the map is upsampled x2, the projected encoder skip is added, then the body
refines it. The body is one LRU for the light decoder and a stack of
non-bottleneck-1D blocks for the dense baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import functional as F
from .errors import DimensionError, InvalidSpecError
from .nn import (AsymConvPair, BatchNorm2d, Conv2d, ConvBNAct, Module, NonBottleneck1D,
                 Upsampler, check_channels)
from .tensor import as_tensor


@dataclass(frozen=True)
class LruConfig:
    channels: int
    bottleneck: int | None = None
    dilation: int = 2
    shuffle_groups: int = 2

    def resolved_bottleneck(self) -> int:
        cb = self.bottleneck or max(self.channels // 2, 1)
        if cb > self.channels:
            raise InvalidSpecError(f"bottleneck {cb} exceeds channels {self.channels}")
        if self.dilation < 1:
            raise InvalidSpecError(f"dilation must be >= 1, got {self.dilation}")
        if self.channels % self.shuffle_groups:
            raise InvalidSpecError(f"shuffle groups {self.shuffle_groups} must divide {self.channels}")
        return cb


class ChannelAttention(Module):
    def __init__(self, channels, rng=None):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, rng=rng)

    def gates(self, y):
        return F.sigmoid(self.conv(F.global_avg_pool(y)))

    def forward(self, y):
        y = as_tensor(y)
        return F.mul(y, self.gates(y))


class LRUBranch(Module):
    """A2(CAM(A1(r))) with depthwise asymmetric pairs at one dilation."""

    def __init__(self, channels, dilation=1, depthwise=True, rng=None):
        super().__init__()
        self.a1 = AsymConvPair(channels, dilation, depthwise, rng=rng)
        self.cam = ChannelAttention(channels, rng=rng)
        self.a2 = AsymConvPair(channels, dilation, depthwise, rng=rng)

    def forward(self, r):
        return self.a2(self.cam(self.a1(r)))


class LightweightResidualUnit(Module):
    def __init__(self, cfg: LruConfig, rng=None):
        super().__init__()
        cb = cfg.resolved_bottleneck()
        c = cfg.channels
        self.cfg = cfg
        self.reduce = ConvBNAct(c, cb, 1, rng=rng)
        self.d_branch = LRUBranch(cb, 1, rng=rng)
        self.m_branch = LRUBranch(cb, cfg.dilation, rng=rng)
        self.expand = Conv2d(cb, c, 1, bias=False, rng=rng)
        self.expand_bn = BatchNorm2d(c)
        self.skip = Conv2d(c, c, 1, bias=False, rng=rng)
        self.skip_bn = BatchNorm2d(c)

    def forward(self, y):
        y = as_tensor(y)
        check_channels(y, self.cfg.channels, "LRU")
        r = self.reduce(y)
        z = F.add(self.d_branch(r), self.m_branch(r))
        out = F.add(self.expand_bn(self.expand(z)), self.skip_bn(self.skip(y)))
        return F.channel_shuffle(out, self.cfg.shuffle_groups)


class DecoderStage(Module):
    """entry 3x3 -> upsample x2 -> + projected skip -> body.

    ``kind`` is ``"LD"`` (one LRU with m-branch dilation ``dilation``) or
    ``"NDM"`` (``ndm_blocks`` non-bottleneck-1D blocks).
    """

    def __init__(self, c_in, c_out, c_skip, kind="LD", dilation=2, upsample="L3x3",
                 ndm_blocks=3, shuffle_groups=2, rng=None):
        super().__init__()
        if kind not in ("LD", "NDM"):
            raise InvalidSpecError(f"decoder kind must be 'LD' or 'NDM', got {kind!r}")
        self.kind = kind
        self.c_out = c_out
        self.entry = ConvBNAct(c_in, c_out, 3, rng=rng)
        self.up = Upsampler(c_out, upsample, 2)
        self.skip_proj = ConvBNAct(c_skip, c_out, 1, rng=rng)
        if kind == "LD":
            self.body = [LightweightResidualUnit(LruConfig(c_out, None, dilation, shuffle_groups), rng)]
        else:
            self.body = [NonBottleneck1D(c_out, rng=rng) for _ in range(ndm_blocks)]

    def forward(self, y, skip):
        y = self.up(self.entry(as_tensor(y)))
        skip = as_tensor(skip)
        if skip.shape[2:] != y.shape[2:]:
            axis = "h" if skip.shape[2] != y.shape[2] else "w"
            raise DimensionError(f"skip resolution {skip.shape[2:]} does not match upsampled "
                                 f"decoder map {y.shape[2:]}", axis=axis)
        y = F.add(y, self.skip_proj(skip))
        for block in self.body:
            y = block(y)
        return y
