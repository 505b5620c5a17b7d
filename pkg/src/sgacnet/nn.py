"""Module system and the mid-level blocks the network is assembled from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError, InvalidSpecError
from .tensor import Tensor

_SCOPE: list = []  # modules currently executing, outermost first
_SCOPE_HOOKS: list = []


class Parameter(Tensor):
    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container: attributes that are Parameters, Modules or lists of
    Modules are discovered in assignment order."""

    training = True

    def __init__(self):
        object.__setattr__(self, "_buffers", OrderedDict())
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        if _SCOPE_HOOKS:
            _SCOPE.append(self)
            try:
                return self.forward(*args, **kwargs)
            finally:
                _SCOPE.pop()
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_store(self) -> "ParamStore":
        return ParamStore(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for k, v in self._buffers.items():
            self._buffers[k] = v.astype(dtype)
        for _, child in self.named_children():
            child._cast_buffers(dtype)

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        mod = self
        *path, leaf = dotted.split(".")
        i = 0
        while i < len(path):
            attr = getattr(mod, path[i])
            if isinstance(attr, (list, tuple)):
                attr = attr[int(path[i + 1])]
                i += 1
            mod = attr
            i += 1
        mod._buffers[leaf] = value


class ParamStore:
    """Named learnable arrays with shape metadata."""

    def __init__(self, items=()):
        self._items: OrderedDict[str, Parameter] = OrderedDict()
        for name, p in items:
            if name in self._items:
                raise ValueError(f"parameter {name!r} registered twice")
            if any(p is q for q in self._items.values()):
                raise ValueError(f"parameter object {name!r} registered under two names")
            self._items[name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: p.shape for k, p in self._items.items()}

    def count(self) -> int:
        return int(sum(p.data.size for p in self._items.values()))

    def pair(self, grads) -> list[tuple[str, Parameter, np.ndarray | None]]:
        """Match each parameter with its gradient from a tape gradient map."""
        return [(k, p, grads.get(p)) for k, p in self._items.items()]


# --------------------------------------------------------------------------
# leaf layers
# --------------------------------------------------------------------------

def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


class Conv2d(Module):
    """Convolution with Kaiming fan-out initialisation."""

    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=0, dilation=1, groups=1,
                 bias=True, rng=None):
        super().__init__()
        spec = F.ConvSpec.make(kernel, stride, padding, dilation, groups)
        if c_in % groups or c_out % groups:
            raise InvalidSpecError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.spec = spec
        kh, kw = spec.kernel
        std = np.sqrt(2.0 / (c_out * kh * kw))
        self.weight = Parameter(
            (_rng(rng).standard_normal((c_out, c_in // groups, kh, kw)) * std).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def forward(self, x):
        s = self.spec
        return F.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, c_in, c_out, bias=True, rng=None):
        super().__init__()
        std = np.sqrt(2.0 / c_out)
        self.weight = Parameter((_rng(rng).standard_normal((c_out, c_in)) * std).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Identity(Module):
    def forward(self, x):
        return x


# --------------------------------------------------------------------------
# composite blocks
# --------------------------------------------------------------------------

class ConvBNAct(Module):
    """conv (no bias) -> batch norm -> optional ReLU."""

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, dilation=1, groups=1,
                 act="relu", rng=None):
        super().__init__()
        if act not in ("relu", "none"):
            raise InvalidSpecError(f"unknown activation {act!r}")
        if padding is None:
            k = kernel if isinstance(kernel, int) else kernel[0]
            padding = dilation * (k - 1) // 2
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding, dilation, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.relu(y) if self.act == "relu" else y


class NonBottleneck1D(Module):
    """Residual unit with factorised 3x1/1x3 convolutions.

    main: 3x1 -> relu -> 1x3 -> BN -> relu -> 3x1(d) -> relu -> 1x3(d) -> BN;
    out = relu(main + shortcut). A stride or width change puts a 1x1
    conv + BN on the shortcut.
    """

    def __init__(self, c_in, c_out=None, stride=1, dilation=1, rng=None):
        super().__init__()
        c_out = c_out or c_in
        d = dilation
        self.conv3x1_1 = Conv2d(c_in, c_out, (3, 1), (stride, 1), (1, 0), bias=False, rng=rng)
        self.conv1x3_1 = Conv2d(c_out, c_out, (1, 3), (1, stride), (0, 1), bias=False, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv3x1_2 = Conv2d(c_out, c_out, (3, 1), 1, (d, 0), (d, 1), bias=False, rng=rng)
        self.conv1x3_2 = Conv2d(c_out, c_out, (1, 3), 1, (0, d), (1, d), bias=False, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = ConvBNAct(c_in, c_out, 1, stride, 0, act="none", rng=rng)
        else:
            self.shortcut = Identity()

    def forward(self, x):
        y = F.relu(self.conv3x1_1(x))
        y = F.relu(self.bn1(self.conv1x3_1(y)))
        y = F.relu(self.conv3x1_2(y))
        y = self.bn2(self.conv1x3_2(y))
        return F.relu(F.add(y, self.shortcut(x)))


class DepthwiseSeparableConv(Module):
    """k x k depthwise conv followed by a 1x1 pointwise conv.

    ``post_act="both"`` puts BN+ReLU after each stage; ``"pointwise"`` only
    after the pointwise stage.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, dilation=1, post_act="both", rng=None):
        super().__init__()
        if post_act not in ("both", "pointwise"):
            raise InvalidSpecError(f"post_act must be 'both' or 'pointwise', got {post_act!r}")
        pad = dilation * (kernel - 1) // 2
        if post_act == "both":
            self.depthwise = ConvBNAct(c_in, c_in, kernel, stride, pad, dilation, groups=c_in, rng=rng)
        else:
            self.depthwise = Conv2d(c_in, c_in, kernel, stride, pad, dilation, groups=c_in, rng=rng)
        self.pointwise = ConvBNAct(c_in, c_out, 1, 1, 0, rng=rng)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class AsymConvPair(Module):
    """1x3 conv then 3x1 conv, both dilated by ``dilation`` and padded to
    preserve the spatial size; depthwise when ``depthwise`` is set."""

    def __init__(self, channels, dilation=1, depthwise=True, bias=True, rng=None):
        super().__init__()
        g = channels if depthwise else 1
        d = dilation
        self.conv1x3 = Conv2d(channels, channels, (1, 3), 1, (0, d), (1, d), groups=g, bias=bias, rng=rng)
        self.conv3x1 = Conv2d(channels, channels, (3, 1), 1, (d, 0), (d, 1), groups=g, bias=bias, rng=rng)

    def forward(self, x):
        return self.conv3x1(self.conv1x3(x))


class Upsampler(Module):
    """x2^k upsampling; ``"L3x3"`` is nearest x2 plus a learned 3x3 depthwise
    smoothing conv per doubling, initialised to the bilinear tent kernel."""

    MODES = ("L3x3", "bilinear", "nearest")

    def __init__(self, channels, mode="L3x3", scale=2):
        super().__init__()
        if mode not in self.MODES:
            raise InvalidSpecError(f"upsample mode must be one of {self.MODES}, got {mode!r}")
        if scale < 1 or scale & (scale - 1):
            raise InvalidSpecError(f"scale must be a power of two, got {scale}")
        self.mode = mode
        self.scale = scale
        self.smooth = []
        if mode == "L3x3":
            tent = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float32) / 16
            for _ in range(int(np.log2(scale))):
                conv = Conv2d(channels, channels, 3, 1, 1, groups=channels, bias=False)
                conv.weight.data[:] = tent
                self.smooth.append(conv)

    def forward(self, x):
        if self.mode == "L3x3":
            for conv in self.smooth:
                x = conv(F.upsample(x, "nearest", 2))
            return x
        return F.upsample(x, self.mode, self.scale)


def check_channels(x: Tensor, c: int, what: str) -> None:
    if x.shape[1] != c:
        raise DimensionError(f"{what} expects {c} channels, got {x.shape[1]}", axis="c")
