"""Synthetic RGB-D scenes and the on-disk triplet dataset layout.

A dataset directory holds::

    rgb/0000.ppm      P6 colour image
    depth/0000.pgm    P5 16-bit depth (larger = farther)
    labels/0000.pgm   P5 8-bit class ids, 255 = ignore
    manifest.json     scene spec, seed and per-sample shape geometry

Shapes are painted in list order, so later shapes occlude earlier ones. Shape
``j`` (0-based) sits at depth ``background_depth - (j + 1) * layer_step`` and
the background at ``background_depth``; uniform noise of at most
``noise_amplitude`` is added and the result clamped to ``[0, 65535]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .errors import ConfigError, DataError

RGB_DIR, DEPTH_DIR, LABEL_DIR, MANIFEST = "rgb", "depth", "labels", "manifest.json"


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    n_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 3)
    background_depth: int = 40000
    layer_step: int = 4000
    noise_amplitude: int = 500
    colour_jitter: int = 20

    def __post_init__(self):
        spi = self.shapes_per_image
        if isinstance(spi, int):
            spi = (spi, spi)
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in spi))
        self.validate()

    def validate(self) -> None:
        lo, hi = self.shapes_per_image
        checks = [
            ("height", self.height >= 4), ("width", self.width >= 4),
            ("n_classes", 2 <= self.n_classes <= 255),
            ("shapes_per_image", 0 <= lo <= hi),
            ("layer_step", self.layer_step > 0),
            ("noise_amplitude", 0 <= 2 * self.noise_amplitude < self.layer_step),
            ("background_depth", hi * self.layer_step < self.background_depth <= 65535),
            ("colour_jitter", 0 <= self.colour_jitter <= 127),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"scene spec {name}={getattr(self, name)!r} is invalid", field=name)


def class_colours(n_classes: int) -> np.ndarray:
    """Well-separated base colours; class 0 is the background."""
    hue = np.arange(n_classes) / n_classes
    rgb = 0.5 + 0.4 * np.stack([np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)], axis=1)
    return np.rint(255 * rgb).astype(np.int64)


def _random_shape(rng, spec: SceneSpec) -> dict:
    h, w = spec.height, spec.width
    kind = "rect" if rng.random() < 0.5 else "ellipse"
    cls = int(rng.integers(1, spec.n_classes))
    if kind == "rect":
        x0, y0 = int(rng.integers(0, w - 3)), int(rng.integers(0, h - 3))
        x1 = int(rng.integers(x0 + 3, min(w, x0 + w // 2 + 3) + 1))
        y1 = int(rng.integers(y0 + 3, min(h, y0 + h // 2 + 3) + 1))
        return {"kind": kind, "class": cls, "x0": x0, "y0": y0, "x1": x1, "y1": y1}
    return {"kind": kind, "class": cls,
            "cx": float(rng.uniform(0.2 * w, 0.8 * w)), "cy": float(rng.uniform(0.2 * h, 0.8 * h)),
            "rx": float(rng.uniform(0.1 * w, 0.3 * w)), "ry": float(rng.uniform(0.1 * h, 0.3 * h))}


def shape_mask(shape: dict, h: int, w: int) -> np.ndarray:
    """Pixels whose centre lies inside the shape (rectangles are half-open)."""
    yy, xx = np.mgrid[0:h, 0:w]
    if shape["kind"] == "rect":
        return (xx >= shape["x0"]) & (xx < shape["x1"]) & (yy >= shape["y0"]) & (yy < shape["y1"])
    return ((xx + 0.5 - shape["cx"]) / shape["rx"]) ** 2 + ((yy + 0.5 - shape["cy"]) / shape["ry"]) ** 2 <= 1.0


def render(spec: SceneSpec, shapes: list[dict], rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Paint one scene; returns ``(rgb uint8 (h,w,3), depth uint16 (h,w), labels uint8 (h,w))``."""
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    depth = np.full((h, w), float(spec.background_depth))
    colours = class_colours(spec.n_classes)
    rgb = np.broadcast_to(colours[0], (h, w, 3)).astype(np.float64)
    for j, s in enumerate(shapes):
        m = shape_mask(s, h, w)
        labels[m] = s["class"]
        depth[m] = spec.background_depth - (j + 1) * spec.layer_step
        rgb[m] = colours[s["class"]]
    if spec.colour_jitter:
        rgb += rng.integers(-spec.colour_jitter, spec.colour_jitter + 1, size=rgb.shape)
    if spec.noise_amplitude:
        depth += rng.integers(-spec.noise_amplitude, spec.noise_amplitude + 1, size=depth.shape)
    return (np.clip(rgb, 0, 255).astype(np.uint8), np.clip(depth, 0, 65535).astype(np.uint16), labels)


def generate_scenes(spec: SceneSpec, count: int, seed: int, out_dir) -> Path:
    """Write ``count`` scenes into ``out_dir``; identical arguments give identical bytes."""
    out = Path(out_dir)
    try:
        for sub in (RGB_DIR, DEPTH_DIR, LABEL_DIR):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    samples = []
    lo, hi = spec.shapes_per_image
    for i in range(count):
        shapes = [_random_shape(rng, spec) for _ in range(int(rng.integers(lo, hi + 1)))]
        rgb, depth, labels = render(spec, shapes, rng)
        stem = f"{i:04d}"
        imageio.write_rgb(out / RGB_DIR / f"{stem}.ppm", rgb)
        imageio.write_depth(out / DEPTH_DIR / f"{stem}.pgm", depth)
        imageio.write_labels(out / LABEL_DIR / f"{stem}.pgm", labels)
        samples.append({"id": stem, "shapes": shapes})
    manifest = {"spec": asdict(spec), "seed": seed, "count": count, "samples": samples}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def normalize(rgb: np.ndarray, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """uint8 RGB (n,h,w,3) and uint16 depth (n,h,w) to float32 NCHW in roughly [-1, 1]."""
    r = np.asarray(rgb, dtype=np.float32).transpose(0, 3, 1, 2) / 127.5 - 1.0
    d = np.asarray(depth, dtype=np.float32)[:, None] / 32767.5 - 1.0
    return r, d


def load_dataset(root) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Read every triplet under ``root`` (matched by file stem).

    Returns normalised ``rgb (n,3,h,w)``, ``depth (n,1,h,w)``, ``labels (n,h,w)``
    and the sample ids.
    """
    root = Path(root)
    rgb_files = sorted((root / RGB_DIR).glob("*.ppm"))
    if not rgb_files:
        raise DataError(f"no RGB images under {root / RGB_DIR}")
    rgbs, depths, labels, ids = [], [], [], []
    for f in rgb_files:
        d, l = root / DEPTH_DIR / f"{f.stem}.pgm", root / LABEL_DIR / f"{f.stem}.pgm"
        for p in (d, l):
            if not p.exists():
                raise DataError(f"sample {f.stem}: missing {p}")
        rgbs.append(imageio.read(f))
        depths.append(imageio.read(d))
        labels.append(imageio.read(l))
        ids.append(f.stem)
    shapes = {(a.shape[:2], b.shape, c.shape) for a, b, c in zip(rgbs, depths, labels)}
    if len(shapes) != 1:
        raise DataError(f"samples under {root} have inconsistent sizes")
    r, d = normalize(np.stack(rgbs), np.stack(depths))
    return r, d, np.stack(labels).astype(np.int64), ids
