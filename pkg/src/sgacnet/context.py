"""Context modules bridging encoder and decoder.

:class:`AdaptivePyramidContext` builds, for every pooling scale ``s``:

* region features ``z_s``: ``relu(conv1x1(adaptive_avg_pool(x, s)))`` with
  ``inner`` channels, one vector per region of an s x s grid;
* affinities ``a_s = sigmoid(conv1x1(x) + conv1x1(GAP(x)))`` with ``s*s``
  channels, one per region, the second term broadcasting the global
  descriptor over every pixel;
* the per-pixel context ``y_s(p) = sum_r a_s(p, r) * z_s(r)``.

The context terms are summed over scales, concatenated to ``x`` and fused by
a 1x1 conv + BN + ReLU. Affinities are independent sigmoids, not a softmax
over regions.

:class:`PyramidPooling` is the classic pooling pyramid kept as the baseline:
pool, 1x1 conv, nearest resize back, concatenate, 1x1 conv.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import functional as F
from .errors import InvalidSpecError
from .nn import Conv2d, ConvBNAct, Module, check_channels
from .tensor import as_tensor, check_4d


@dataclass(frozen=True)
class ApcConfig:
    bins: tuple[int, ...] = (1, 2, 3, 6)
    inner: int | None = None
    out_channels: int | None = None

    def validate(self):
        if not self.bins or any(b < 1 for b in self.bins) or list(self.bins) != sorted(set(self.bins)):
            raise InvalidSpecError(f"bins must be positive and strictly ascending, got {self.bins}")
        if self.inner is not None and self.inner < 1:
            raise InvalidSpecError(f"inner channels must be >= 1, got {self.inner}")
        return self


class AdaptivePyramidContext(Module):
    def __init__(self, c_in, cfg: ApcConfig = ApcConfig(), rng=None):
        super().__init__()
        cfg.validate()
        self.c_in = c_in
        self.bins = tuple(cfg.bins)
        self.inner = cfg.inner or max(c_in // 4, 1)
        c_out = cfg.out_channels or c_in
        self.local = [Conv2d(c_in, self.inner, 1, rng=rng) for _ in self.bins]
        self.affinity = [Conv2d(c_in, s * s, 1, rng=rng) for s in self.bins]
        self.guide = [Conv2d(c_in, s * s, 1, bias=False, rng=rng) for s in self.bins]
        self.fuse = ConvBNAct(c_in + self.inner, c_out, 1, rng=rng)

    def affinities(self, x, k):
        s = self.bins[k]
        logits = F.add(self.affinity[k](x), self.guide[k](F.global_avg_pool(x)))
        return F.sigmoid(logits), s

    def context(self, x, diagnostics=None):
        """Summed per-pixel context term (n, inner, h, w)."""
        x = as_tensor(x)
        n, _, h, w = x.shape
        total = None
        for k, s in enumerate(self.bins):
            z = F.relu(self.local[k](F.adaptive_avg_pool(x, s, s)))  # (n, inner, s, s)
            alpha, _ = self.affinities(x, k)  # (n, s*s, h, w)
            if diagnostics is not None:
                diagnostics.append(alpha)
            y = F.matmul(F.reshape(z, (n, self.inner, s * s)), F.reshape(alpha, (n, s * s, h * w)))
            y = F.reshape(y, (n, self.inner, h, w))
            total = y if total is None else F.add(total, y)
        return total

    def forward(self, x, diagnostics=None):
        x = as_tensor(x)
        check_4d(x)
        check_channels(x, self.c_in, "APC")
        return self.fuse(F.concat([x, self.context(x, diagnostics)], axis=1))


class PyramidPooling(Module):
    def __init__(self, c_in, c_out=None, bins=(1, 2, 3, 6), rng=None):
        super().__init__()
        if not bins or any(b < 1 for b in bins):
            raise InvalidSpecError(f"bins must be positive, got {bins}")
        self.c_in = c_in
        self.bins = tuple(bins)
        red = max(c_in // len(self.bins), 1)
        self.branches = [Conv2d(c_in, red, 1, rng=rng) for _ in self.bins]
        self.fuse = ConvBNAct(c_in + red * len(self.bins), c_out or c_in, 1, rng=rng)

    def forward(self, x, diagnostics=None):
        x = as_tensor(x)
        check_4d(x)
        check_channels(x, self.c_in, "PPM")
        _, _, h, w = x.shape
        feats = [x]
        for s, conv in zip(self.bins, self.branches):
            feats.append(F.resize_nearest(F.relu(conv(F.adaptive_avg_pool(x, s, s))), h, w))
        return self.fuse(F.concat(feats, axis=1))
