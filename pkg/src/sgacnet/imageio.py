"""Binary netpbm reading and writing.

* RGB images: P6, maxval 255, ``(h, w, 3)`` uint8.
* Depth maps: P5, maxval 65535, ``(h, w)`` uint16 stored big-endian.
* Label maps: P5, maxval 255, ``(h, w)`` uint8.

Headers are written as ``P6\\n<w> <h>\\n<maxval>\\n``. The reader also accepts
arbitrary whitespace and ``#`` comments between header fields. Overlays use
:data:`PALETTE`, 40 fixed colours repeated cyclically for larger class ids.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, ImageFormatError

_PALETTE_40 = [
    (0, 0, 0), (128, 0, 0), (0, 128, 0), (128, 128, 0), (0, 0, 128),
    (128, 0, 128), (0, 128, 128), (128, 128, 128), (64, 0, 0), (192, 0, 0),
    (64, 128, 0), (192, 128, 0), (64, 0, 128), (192, 0, 128), (64, 128, 128),
    (192, 128, 128), (0, 64, 0), (128, 64, 0), (0, 192, 0), (128, 192, 0),
    (0, 64, 128), (128, 64, 128), (0, 192, 128), (128, 192, 128), (64, 64, 0),
    (192, 64, 0), (64, 192, 0), (192, 192, 0), (64, 64, 128), (192, 64, 128),
    (64, 192, 128), (192, 192, 128), (0, 0, 64), (128, 0, 64), (0, 128, 64),
    (128, 128, 64), (0, 0, 192), (128, 0, 192), (0, 128, 192), (128, 128, 192),
]
PALETTE = np.array(_PALETTE_40, dtype=np.uint8)
IGNORE_COLOUR = np.array((255, 255, 255), dtype=np.uint8)


def _header(magic: str, w: int, h: int, maxval: int) -> bytes:
    return f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")


def encode(img: np.ndarray, maxval: int | None = None) -> bytes:
    """Serialise an ``(h, w)`` or ``(h, w, 3)`` integer image."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = "P6"
    elif img.ndim == 2:
        magic = "P5"
    else:
        raise DimensionError(f"expected (h, w) or (h, w, 3) image, got {img.shape}", axis="shape")
    if maxval is None:
        maxval = 65535 if img.dtype == np.uint16 else 255
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} outside 1..65535", offset=0)
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise ImageFormatError(f"pixel values outside [0, {maxval}]", offset=0)
    dt = ">u2" if maxval > 255 else "u1"
    h, w = img.shape[:2]
    return _header(magic, w, h, maxval) + np.ascontiguousarray(img, dtype=dt).tobytes()


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes; 16-bit samples come back as uint16, 8-bit as uint8."""
    pos = 0

    def token() -> tuple[str, int]:
        nonlocal pos
        while pos < len(buf):
            c = buf[pos:pos + 1]
            if c == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("unexpected end of header", offset=start)
        return buf[start:pos].decode("ascii", "replace"), start

    magic, off = token()
    if magic not in ("P5", "P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", offset=off)
    vals = []
    for field in ("width", "height", "maxval"):
        tok, off = token()
        if not tok.isdigit() or int(tok) == 0:
            raise ImageFormatError(f"bad {field} {tok!r}", offset=off)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval > 65535:
        raise ImageFormatError(f"maxval {maxval} exceeds 65535", offset=off)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    channels = 3 if magic == "P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dt.itemsize
    if len(buf) - pos < need:
        raise ImageFormatError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", offset=pos)
    arr = np.frombuffer(buf, dtype=dt, count=w * h * channels, offset=pos)
    arr = arr.astype(np.uint16 if dt.itemsize == 2 else np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write(path, img: np.ndarray, maxval: int | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(img, maxval))
    return path


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_rgb(path, rgb: np.ndarray) -> Path:
    return write(path, np.asarray(rgb, dtype=np.uint8))


def write_depth(path, depth: np.ndarray) -> Path:
    return write(path, np.asarray(depth, dtype=np.uint16), 65535)


def write_labels(path, labels: np.ndarray) -> Path:
    return write(path, np.asarray(labels, dtype=np.uint8), 255)


def colourize(labels: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    """Map class ids to palette colours; ``ignore_index`` pixels become white."""
    labels = np.asarray(labels)
    out = PALETTE[labels % len(PALETTE)]
    out[labels == ignore_index] = IGNORE_COLOUR
    return out


def overlay(rgb: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend palette colours over an RGB image; ``alpha`` is the label weight."""
    mix = (1 - alpha) * np.asarray(rgb, dtype=np.float64) + alpha * colourize(labels)
    return np.clip(np.rint(mix), 0, 255).astype(np.uint8)


def to_grey(feature: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8 for inspection; constant maps become 0."""
    f = np.asarray(feature, dtype=np.float64)
    lo, hi = f.min(), f.max()
    if hi <= lo:
        return np.zeros(f.shape, dtype=np.uint8)
    return np.rint(255 * (f - lo) / (hi - lo)).astype(np.uint8)
