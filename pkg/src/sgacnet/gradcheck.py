"""Finite-difference oracle and gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import functional as F
from .errors import EvaluationError, InvalidSpecError
from .tensor import Tape, Tensor


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff(fn: Callable[[], float], params: Sequence, eps: float = 1e-5,
                indices: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Central differences of a scalar function with respect to arrays.

    ``fn`` takes no arguments and reads ``params`` (arrays or tensors) which
    are perturbed in place and restored afterwards. ``indices`` optionally maps
    a parameter position to the flat coordinates to probe; unprobed entries of
    the returned gradient are NaN.
    """
    if eps <= 0:
        raise InvalidSpecError(f"eps must be positive, got {eps}")
    out = []
    for pos, p in enumerate(params):
        arr = p.data if isinstance(p, Tensor) else p
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError("parameter arrays must be contiguous to be perturbed in place")
        grad = np.full(arr.shape, np.nan if indices and pos in indices else 0.0)
        gflat = grad.reshape(-1)
        coords = indices[pos] if indices and pos in indices else range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _checked(fn)
            flat[i] = orig - eps
            fm = _checked(fn)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(grad)
    return out


def _checked(fn) -> float:
    v = float(fn())
    if not np.isfinite(v):
        raise EvaluationError(f"function evaluated to non-finite value {v}")
    return v


@dataclass
class GradCheckReport:
    """Per-tensor error summary of an analytic-vs-numeric comparison."""

    max_rel: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    threshold: float = 1e-4
    floor: float = 1e-8
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold

    def __str__(self):
        lines = [f"{name}: max_rel={self.max_rel[name]:.3e} max_abs={self.max_abs[name]:.3e}"
                 for name in self.max_rel]
        if any(self.kinks.values()):
            lines.append(f"coordinates skipped at kinks: {sum(self.kinks.values())}")
        lines.append(f"worst={self.worst:.3e} threshold={self.threshold:g} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(forward: Callable[..., Tensor], input_sizes: Sequence[tuple[int, ...]],
               params: Mapping[str, Tensor] | None = None, threshold: float = 1e-4,
               eps: float = 1e-5, seed: int = 0, max_coords: int | None = None,
               inputs: Sequence[np.ndarray] | None = None,
               skip_kinks: bool = False) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``forward(*inputs)`` maps double-precision input tensors to an output
    tensor; the scalar probe is ``sum(output * R)`` for a fixed random ``R``.
    Gradients are checked for every entry of ``params`` and every input.
    ``max_coords`` bounds the number of coordinates probed per tensor.

    With ``skip_kinks`` a failing coordinate whose forward and backward
    one-sided slopes disagree by more than the threshold is treated as
    straddling a ReLU or max-pool switch and excluded; the count is reported.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [rng.standard_normal(s) for s in input_sizes]
    xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=f"input{i}")
          for i, a in enumerate(inputs)]
    named = dict(params or {})
    for t in xs:
        named[t.name] = t

    with Tape() as tape:
        out = forward(*xs)
    proj = rng.standard_normal(out.shape)
    grads = tape.backward(out, proj)

    def probe() -> float:
        return float(np.sum(forward(*xs).data * proj))

    # Central differences cannot resolve gradients below the roundoff level
    # u * sum|R * out| / eps; that level, divided by the threshold, floors the
    # relative-error denominator.
    noise = np.finfo(np.float64).eps * float(np.sum(np.abs(out.data * proj))) / eps
    floor = max(1e-8, noise / threshold)

    indices = {}
    tensors = list(named.values())
    for pos, t in enumerate(tensors):
        if max_coords is not None and t.data.size > max_coords:
            indices[pos] = rng.choice(t.data.size, size=max_coords, replace=False)
    numeric = finite_diff(probe, tensors, eps=eps, indices=indices)

    report = GradCheckReport(threshold=threshold, floor=floor)
    for pos, (name, t) in enumerate(named.items()):
        analytic = grads.get(t, np.zeros_like(t.data))
        num = numeric[pos]
        mask = ~np.isnan(num)
        if skip_kinks:
            kinked = _kinks(probe, t, analytic, num, mask, eps, threshold, floor)
            report.kinks[name] = int(kinked.sum())
            mask &= ~kinked
        report.max_rel[name] = float(rel_error(analytic[mask], num[mask], floor).max(initial=0.0))
        report.max_abs[name] = float(np.abs(analytic[mask] - num[mask]).max(initial=0.0))
    return report


def _kinks(probe, t, analytic, num, mask, eps, threshold, floor) -> np.ndarray:
    kinked = np.zeros(t.data.shape, dtype=bool)
    bad = mask & (rel_error(analytic, np.where(mask, num, 0.0), floor) >= threshold)
    flat = t.data.reshape(-1)
    f0 = _checked(probe)
    for i in np.flatnonzero(bad):
        orig = flat[i]
        flat[i] = orig + eps
        right = (_checked(probe) - f0) / eps
        flat[i] = orig - eps
        left = (f0 - _checked(probe)) / eps
        flat[i] = orig
        kinked.reshape(-1)[i] = rel_error(left, right, floor) >= threshold
    return kinked


def scalar_probe(out: Tensor, proj: np.ndarray) -> Tensor:
    """sum(out * proj) as a differentiable scalar."""
    return F.sum(F.mul(out, Tensor(proj)))
