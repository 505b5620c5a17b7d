"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"SGACNCK\\0"
    version      u32       1
    config_len   u32
    config       bytes     UTF-8 JSON of the model configuration
    n_records    u32
    per record:
        name_len u16
        name     bytes     UTF-8 dotted name
        kind     u8        0 = parameter, 1 = buffer
        dtype    u8        tag from DTYPE_TAGS
        rank     u8
        dims     rank x u32
        values   raw little-endian array data, C order

Both parameters and normalisation running statistics are stored so that an
eval-mode model reloads bit-exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelConfig, SGACNet

MAGIC = b"SGACNCK\0"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<f2")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


def save(model: SGACNet, path) -> Path:
    records = [(0, n, p.data) for n, p in model.named_parameters()]
    records += [(1, n, b) for n, b in model.named_buffers()]
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(records))]
    for kind, name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise DataError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BBB", kind, _TAG_OF[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read(path) -> tuple[dict, list[tuple[int, str, np.ndarray]]]:
    """Parse a checkpoint into its config dict and ``(kind, name, array)`` records."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("not a checkpoint: bad magic at byte 0")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    cfg = json.loads(r.take(cfg_len).decode())
    (count,) = r.unpack("<I")
    records = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        kind, tag, rank = r.unpack("<BBB")
        if tag not in DTYPE_TAGS:
            raise DataError(f"{name}: unknown dtype tag {tag} at byte {r.pos - 2}")
        dims = r.unpack(f"<{rank}I")
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        records.append((kind, name, arr))
    if r.pos != len(r.buf):
        raise DataError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    return cfg, records


def load(path, model: SGACNet | None = None) -> SGACNet:
    """Restore a checkpoint, building the model from the stored config if none is given."""
    cfg, records = read(path)
    if model is None:
        model = SGACNet(ModelConfig.from_dict(cfg))
    elif model.cfg.to_dict() != ModelConfig.from_dict(cfg).to_dict():
        raise ConfigError("checkpoint config does not match the target model")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for kind, name, arr in records:
        target = params if kind == 0 else buffers
        if name not in target:
            raise DataError(f"checkpoint record {name!r} has no counterpart in the model")
        if target[name].shape != arr.shape:
            raise DataError(f"{name}: shape {arr.shape} does not match model {target[name].shape}")
        if kind == 0:
            params[name].data = arr.copy()
        else:
            model.set_buffer(name, arr.copy())
        seen.add((kind, name))
    missing = [n for n in params if (0, n) not in seen] + [n for n in buffers if (1, n) not in seen]
    if missing:
        raise DataError(f"checkpoint lacks {len(missing)} tensors, first {missing[0]!r}")
    return model
