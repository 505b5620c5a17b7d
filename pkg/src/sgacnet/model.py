"""Full RGB-D segmentation network, loss and optimiser."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import functional as F
from .attention import AttentionFusion, AttentionKind
from .context import AdaptivePyramidContext, ApcConfig, PyramidPooling
from .decoder import DecoderStage
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvBNAct, Identity, Module, NonBottleneck1D, Upsampler
from .tensor import Tape, Tensor, as_tensor, check_4d, no_grad

BACKBONES = {"R18-NBt1D": (2, 2, 2, 2), "R34-NBt1D": (3, 4, 6, 3)}
AFM_VARIANTS = {
    "2xSE": ("SE", "SE"),
    "2xSPGE": ("SPGE", "SPGE"),
    "2xSPA147": ("SPA147", "SPA147"),
    "SE+SPGE": ("SPGE", "SE"),
    "SE+SPA147": ("SPA147", "SE"),
}
CONTEXTS = ("APC", "PPM", "none")
DECODERS = ("LD", "NDM")
UPSAMPLES = ("L3x3", "bilinear", "nearest")


@dataclass(frozen=True)
class ModelConfig:
    """One network variant.

    ``afm`` is ``(kind_rgb, kind_depth)``; the named ablation variants in
    :data:`AFM_VARIANTS` map the channel gate (SE) onto the depth branch.
    ``base_width`` is the stem width; 64 reproduces full-size models and
    smaller values give desk-scale toys (all widths scale with it).
    """

    backbone: str = "R18-NBt1D"
    afm: tuple[str, str] = ("SPA147", "SE")
    context: str = "APC"
    decoder: str = "LD"
    upsample: str = "bilinear"
    n_classes: int = 40
    input_size: tuple[int, int] = (480, 640)
    aux_loss_weight: float = 0.5
    depth_input_channels: int = 1
    base_width: int = 64
    se_reduction: int = 16
    spge_groups: int = 4
    spa_bins: tuple[int, ...] = (7, 4, 1)
    apc_bins: tuple[int, ...] = (1, 2, 3, 6)
    ld_dilations: tuple[int, int, int] = (8, 4, 2)
    ndm_blocks: int = 3
    shuffle_groups: int = 2
    seed: int = 0

    def __post_init__(self):
        afm = self.afm
        if isinstance(afm, str):
            if afm not in AFM_VARIANTS:
                raise ConfigError(f"afm: unknown variant {afm!r}; expected one of {list(AFM_VARIANTS)} "
                                  "or a (kind_rgb, kind_depth) pair", field="afm")
            afm = AFM_VARIANTS[afm]
        try:
            afm = tuple(AttentionKind.parse(k).value for k in afm)
        except Exception as exc:
            raise ConfigError(f"afm: {exc}", field="afm") from None
        if len(afm) != 2:
            raise ConfigError("afm must be a (kind_rgb, kind_depth) pair", field="afm")
        object.__setattr__(self, "afm", afm)
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        self.validate()

    def validate(self) -> None:
        checks = [
            ("backbone", self.backbone in BACKBONES, f"must be one of {list(BACKBONES)}"),
            ("context", self.context in CONTEXTS, f"must be one of {list(CONTEXTS)}"),
            ("decoder", self.decoder in DECODERS, f"must be one of {list(DECODERS)}"),
            ("upsample", self.upsample in UPSAMPLES, f"must be one of {list(UPSAMPLES)}"),
            ("n_classes", int(self.n_classes) >= 2, "must be >= 2"),
            ("input_size", len(self.input_size) == 2
             and all(v > 0 and v % 32 == 0 for v in self.input_size), "h and w must be positive multiples of 32"),
            ("aux_loss_weight", self.aux_loss_weight >= 0, "must be >= 0"),
            ("depth_input_channels", self.depth_input_channels >= 1, "must be >= 1"),
            ("base_width", self.base_width >= 4 and self.base_width % 4 == 0, "must be a multiple of 4, >= 4"),
            ("ld_dilations", len(self.ld_dilations) == 3 and min(self.ld_dilations) >= 1,
             "needs three dilations >= 1"),
            ("ndm_blocks", self.ndm_blocks >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}={getattr(self, name)!r}: {msg}", field=name)

    @property
    def encoder_widths(self) -> tuple[int, int, int, int]:
        b = self.base_width
        return b, 2 * b, 4 * b, 8 * b

    @property
    def decoder_widths(self) -> tuple[int, int, int]:
        b = self.base_width
        return 8 * b, 4 * b, 2 * b

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}", field=sorted(unknown)[0])
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**vals)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class Encoder(Module):
    """7x7/2 stem, 3x3/2 max-pool, four stages of non-bottleneck-1D blocks."""

    def __init__(self, c_in, widths, depths, rng=None):
        super().__init__()
        self.stem = ConvBNAct(c_in, widths[0], 7, 2, 3, rng=rng)
        self.layers = []
        prev = widths[0]
        for k, (c, n) in enumerate(zip(widths, depths)):
            stride = 1 if k == 0 else 2
            blocks = [NonBottleneck1D(prev, c, stride, rng=rng)]
            blocks += [NonBottleneck1D(c, c, 1, rng=rng) for _ in range(n - 1)]
            self.layers.append(_Stage(blocks))
            prev = c

    def forward_stem(self, x):
        return F.max_pool2d(self.stem(x), 3, 2, 1)


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


@dataclass
class ForwardOutput:
    logits: Tensor
    aux_logits: list[Tensor]
    diagnostics: dict = field(default_factory=dict)


class SGACNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc_w = cfg.encoder_widths
        dec_w = cfg.decoder_widths
        depths = BACKBONES[cfg.backbone]
        self.encoder_rgb = Encoder(3, enc_w, depths, rng)
        self.encoder_depth = Encoder(cfg.depth_input_channels, enc_w, depths, rng)
        kind_rgb, kind_depth = cfg.afm
        gate_kw = dict(reduction=cfg.se_reduction, groups=cfg.spge_groups, bins=cfg.spa_bins)
        self.fusion = [AttentionFusion(c, kind_rgb, kind_depth, rng=rng, **gate_kw) for c in enc_w]
        if cfg.context == "APC":
            self.context = AdaptivePyramidContext(enc_w[3], ApcConfig(tuple(cfg.apc_bins), None, dec_w[0]), rng)
        elif cfg.context == "PPM":
            self.context = PyramidPooling(enc_w[3], dec_w[0], cfg.apc_bins, rng)
        else:
            self.context = Identity() if enc_w[3] == dec_w[0] else ConvBNAct(enc_w[3], dec_w[0], 1, rng=rng)
        c_prev = dec_w[0]
        self.decoder = []
        for k, c in enumerate(dec_w):
            self.decoder.append(DecoderStage(c_prev, c, enc_w[2 - k], cfg.decoder, cfg.ld_dilations[k],
                                             cfg.upsample, cfg.ndm_blocks, cfg.shuffle_groups, rng))
            c_prev = c
        self.aux_heads = [Conv2d(c, cfg.n_classes, 1, rng=rng) for c in dec_w]
        self.classifier = Conv2d(dec_w[-1], cfg.n_classes, 1, rng=rng)
        self.final_up = Upsampler(cfg.n_classes, cfg.upsample, 4)

    def forward(self, rgb, depth, diagnostics: bool = False) -> ForwardOutput:
        rgb, depth = as_tensor(rgb), as_tensor(depth)
        check_4d(rgb, "rgb")
        check_4d(depth, "depth")
        if rgb.shape[1] != 3:
            raise DimensionError(f"rgb must have 3 channels, got {rgb.shape[1]}", axis="c")
        if depth.shape[1] != self.cfg.depth_input_channels:
            raise DimensionError(f"depth must have {self.cfg.depth_input_channels} channels, "
                                 f"got {depth.shape[1]}", axis="c")
        for axis, p, q in zip("nhw", (rgb.shape[0], *rgb.shape[2:]), (depth.shape[0], *depth.shape[2:])):
            if p != q:
                raise DimensionError(f"rgb {rgb.shape} and depth {depth.shape} differ on axis {axis}",
                                     axis=axis)
        h, w = rgb.shape[2:]
        if h % 32 or w % 32:
            raise DimensionError(f"input size {(h, w)} must be divisible by 32",
                                 axis="h" if h % 32 else "w")
        diag = {"gates": [], "affinity": []} if diagnostics else None

        x_rgb = self.encoder_rgb.forward_stem(rgb)
        x_dep = self.encoder_depth.forward_stem(depth)
        skips = []
        for k in range(4):
            x_rgb = self.encoder_rgb.layers[k](x_rgb)
            x_dep = self.encoder_depth.layers[k](x_dep)
            x_rgb = self.fusion[k](x_rgb, x_dep, diag["gates"] if diag is not None else None)
            skips.append(x_rgb)

        if diag is not None:
            diag["pre_context"] = skips[3]
        if isinstance(self.context, AdaptivePyramidContext):
            y = self.context(skips[3], diag["affinity"] if diag is not None else None)
        else:
            y = self.context(skips[3])
        if diag is not None:
            diag["post_context"] = y

        aux = []
        for k, stage in enumerate(self.decoder):
            y = stage(y, skips[2 - k])
            aux.append(self.aux_heads[k](y))
        logits = self.final_up(self.classifier(y))
        return ForwardOutput(logits, aux, diag or {})


def build(cfg: ModelConfig, dtype=np.float32) -> tuple[SGACNet, "ParamStore"]:  # noqa: F821
    """Construct a seeded model and its parameter store."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(cfg).__name__}")
    model = SGACNet(cfg)
    if dtype != np.float32:
        model.astype(dtype)
    return model, model.param_store()


# --------------------------------------------------------------------------
# loss and optimisation
# --------------------------------------------------------------------------

@dataclass
class LossValue:
    total: float
    main: float
    aux: list[float]
    empty_support: bool = False
    tensor: Tensor | None = field(default=None, repr=False)


def ce_loss(out: ForwardOutput | Tensor, labels: np.ndarray, ignore_index: int = 255,
            aux_weight: float = 0.5) -> LossValue:
    """Mean pixel cross-entropy plus ``aux_weight`` times each auxiliary loss.

    Auxiliary logits are bilinearly upsampled to the label resolution first.
    """
    if isinstance(out, Tensor):
        out = ForwardOutput(out, [])
    labels = np.asarray(labels)
    main, count = F.softmax_cross_entropy(out.logits, labels, ignore_index)
    total = main
    aux_vals = []
    h = labels.shape[1]
    for a in out.aux_logits:
        factor = h // a.shape[2]
        a_up = F.upsample(a, "bilinear", factor) if factor > 1 else a
        la, _ = F.softmax_cross_entropy(a_up, labels, ignore_index)
        aux_vals.append(float(la.data))
        total = F.add(total, F.scale(la, aux_weight))
    return LossValue(float(total.data), float(main.data), aux_vals, count == 0, total)


class SGD:
    """Heavy-ball momentum: ``v <- momentum*v + g``; ``p <- p - lr*v``."""

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


def train_step(model: SGACNet, batch, optimizer: SGD, ignore_index: int = 255) -> LossValue:
    """One forward/backward/update on ``batch = (rgb, depth, labels)``."""
    rgb, depth, labels = batch
    model.train()
    with Tape() as tape:
        out = model(Tensor(rgb), Tensor(depth))
        loss = ce_loss(out, labels, ignore_index, model.cfg.aux_loss_weight)
    grads = tape.backward(loss.tensor)
    optimizer.step(grads)
    return loss


def _batch_norms(module: Module):
    if isinstance(module, BatchNorm2d):
        yield module
    for _, child in module.named_children():
        yield from _batch_norms(child)


def recalibrate_bn(model: SGACNet, rgb, depth, batch_size: int = 16) -> None:
    """Replace BN running statistics with their average over the given data.

    The exponential running estimate trails the weights while they still move
    quickly; a no-grad pass in train mode with a cumulative momentum of
    ``1/k`` on the k-th batch gives each batch equal weight instead.
    """
    norms = list(_batch_norms(model))
    saved = [bn.momentum for bn in norms]
    for bn in norms:
        bn._buffers["running_mean"][...] = 0
        bn._buffers["running_var"][...] = 1
    model.train()
    with no_grad():
        for k, i in enumerate(range(0, len(rgb), batch_size), start=1):
            for bn in norms:
                bn.momentum = 1.0 / k
            model(Tensor(rgb[i:i + batch_size]), Tensor(depth[i:i + batch_size]))
    for bn, m in zip(norms, saved):
        bn.momentum = m
    model.eval()


def predict(model: SGACNet, rgb, depth) -> np.ndarray:
    """Arg-max labels (n, h, w) from an eval-mode forward pass."""
    model.eval()
    out = model(Tensor(rgb), Tensor(depth))
    return out.logits.data.argmax(axis=1)
