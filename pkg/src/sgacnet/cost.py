"""Parameter, MAC and wall-clock accounting.

MACs are multiply-accumulates, not FLOPs: a convolution costs
``c_out * (c_in / groups) * kh * kw * out_h * out_w`` per image, a linear layer
``in * out`` per row and a batched matmul ``m * k * n``. Pooling, resampling,
normalisation and elementwise ops are counted as zero.
"""
from __future__ import annotations

import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from . import nn
from .tensor import Tensor, no_grad


@dataclass
class CostReport:
    params: dict[str, int] = field(default_factory=dict)
    params_total: int = 0
    macs: dict[str, int] = field(default_factory=dict)
    macs_total: int = 0
    input_shape: tuple | None = None
    timing: dict[str, float] = field(default_factory=dict)
    samples: list[float] = field(default_factory=list, repr=False)

    def lines(self) -> list[str]:
        out = [f"{k}: {v}" for k, v in self.params.items()]
        if self.params:
            out.append(f"params_total: {self.params_total}")
        out += [f"macs[{k}]: {v}" for k, v in self.macs.items()]
        if self.macs:
            out.append(f"macs_total: {self.macs_total} (multiply-accumulates, input {self.input_shape})")
        out += [f"{k}: {v:.6g}" for k, v in self.timing.items()]
        return out

    def to_dict(self) -> dict:
        d = {"params_total": self.params_total, "params": self.params,
             "macs_total": self.macs_total, "macs": self.macs}
        if self.input_shape is not None:
            d["input_shape"] = list(self.input_shape)
        d.update(self.timing)
        return d


def count_params(store, depth: int = 1) -> CostReport:
    """Exact parameter counts grouped by the first ``depth`` name components."""
    if isinstance(store, nn.Module):
        store = store.param_store()
    groups: dict[str, int] = defaultdict(int)
    for name, p in store.items():
        parts = [s for s in name.split(".") if not s.isdigit()]
        groups[".".join(parts[:depth])] += int(p.data.size)
    total = store.count()
    return CostReport(params=dict(groups), params_total=total)


def _owners(root) -> dict[int, str]:
    """Map every descendant of ``root`` to the name of its top-level child."""
    owners = {}
    for name, child in root.named_children():
        label = name.split(".")[0]
        stack = [child]
        while stack:
            m = stack.pop()
            owners[id(m)] = label
            stack.extend(c for _, c in m.named_children())
    return owners


@contextmanager
def mac_counter(root=None):
    """Tally MACs by the top-level child of ``root`` that ran them, or by the
    class of the outermost module when no root is given."""
    tally: dict[str, int] = defaultdict(int)
    owners = _owners(root) if root is not None else {}

    def hook(op, macs):
        label = next((owners[id(m)] for m in nn._SCOPE if id(m) in owners), None)
        if label is None:
            label = type(nn._SCOPE[0]).__name__ if nn._SCOPE else op
        tally[label] += macs

    F._MAC_HOOKS.append(hook)
    nn._SCOPE_HOOKS.append(hook)
    try:
        yield tally
    finally:
        F._MAC_HOOKS.remove(hook)
        nn._SCOPE_HOOKS.remove(hook)


def count_flops(model, input_shape, depth_channels: int | None = None) -> CostReport:
    """Count MACs of one eval-mode forward pass at ``input_shape = (n, h, w)``
    (or a full rgb shape ``(n, 3, h, w)``)."""
    if len(input_shape) == 4:
        n, _, h, w = input_shape
    else:
        n, h, w = input_shape
    dc = depth_channels or model.cfg.depth_input_channels
    dtype = model.parameters()[0].dtype
    was_training = model.training
    model.eval()
    try:
        with no_grad(), mac_counter(model) as tally:
            model(np.zeros((n, 3, h, w), dtype), np.zeros((n, dc, h, w), dtype))
    finally:
        model.train(was_training)
    return CostReport(macs=dict(tally), macs_total=int(sum(tally.values())), input_shape=(n, h, w))


def summarize_times(samples) -> dict[str, float]:
    s = np.asarray(samples, dtype=np.float64)
    mean = float(s.mean())
    return {"mean_s": mean, "p50_s": float(np.percentile(s, 50)), "p95_s": float(np.percentile(s, 95)),
            "fps_mean": float(1.0 / mean) if mean > 0 else float("inf")}


def benchmark(model, input_shape, warmup: int = 2, iters: int = 10, seed: int = 0) -> CostReport:
    """Time eval-mode forward passes on random input (n, h, w).

    ``fps_mean`` is images per second at the mean latency times the batch size.
    """
    n, h, w = input_shape[0], input_shape[-2], input_shape[-1]
    rng = np.random.default_rng(seed)
    dtype = model.parameters()[0].dtype
    rgb = Tensor(rng.standard_normal((n, 3, h, w)).astype(dtype))
    depth = Tensor(rng.standard_normal((n, model.cfg.depth_input_channels, h, w)).astype(dtype))
    model.eval()
    samples = []
    with no_grad():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            model(rgb, depth)
            dt = time.perf_counter() - t0
            if i >= warmup:
                samples.append(dt)
    stats = summarize_times(samples)
    stats["fps_mean"] *= n
    return CostReport(timing=stats, samples=samples, input_shape=(n, h, w))


def paired_benchmark(model_a, model_b, input_shape, iters: int = 30, warmup: int = 2, seed: int = 0):
    """Alternate single forwards of two models; returns both sample lists."""
    a, b = [], []
    for i in range(warmup + iters):
        ra = benchmark(model_a, input_shape, 0, 1, seed).samples[0]
        rb = benchmark(model_b, input_shape, 0, 1, seed).samples[0]
        if i >= warmup:
            a.append(ra)
            b.append(rb)
    return a, b


def write_report(out_dir, name: str, data: dict, lines=None) -> Path:
    """Write ``<name>.json`` (stable keys) and ``<name>.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
    if lines is None:
        lines = [f"{k}: {v}" for k, v in data.items() if not isinstance(v, (dict, list))]
    (out / f"{name}.txt").write_text("\n".join(lines) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")
