"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LVIT" | u32 version | u32 len + config JSON | u64 count
    | count × (u32 len + UTF-8 name)
    | count × (u32 ndim + ndim × u32 dim + float32 payload)
    | u32 CRC32 of every preceding byte

Tensors are the model's parameters and batch-norm running statistics, in
``Module.state()`` order.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .losses import LossConfig
from .model import LViT, LViTConfig
from .trainer import TrainConfig

MAGIC = b"LVIT"
VERSION = 1


class IntegrityError(ValueError):
    pass


def encode(model: LViT, train_cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None) -> bytes:
    config = {
        "model": model.config.to_dict(),
        "train": (train_cfg or TrainConfig()).to_dict(),
        "loss": asdict(loss_cfg or LossConfig()),
    }
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    state = model.state()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<Q", len(state))]
    for name in state:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
    for t in state.values():
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(path, model: LViT, train_cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None) -> bytes:
    data = encode(model, train_cfg, loss_cfg)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[LViT, TrainConfig, LossConfig]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise IntegrityError("not an LViT checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"checkpoint CRC mismatch (stored {crc:08x}, computed {zlib.crc32(body):08x})")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    config = json.loads(r.take(cfg_len))
    (count,) = r.unpack("<Q")
    names = [r.take(r.unpack("<I")[0]).decode() for _ in range(count)]

    model = LViT(LViTConfig(**config["model"]))
    state = model.state()
    if names != list(state):
        extra, missing = set(names) - set(state), set(state) - set(names)
        raise IntegrityError(f"tensor names do not match the model (extra {sorted(extra)[:3]}, missing {sorted(missing)[:3]})")
    for name in names:
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        t = state[name]
        if tuple(shape) != t.shape:
            raise IntegrityError(f"{name}: stored shape {shape} differs from model shape {t.shape}")
        count_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        t.data = np.frombuffer(r.take(count_bytes), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after tensor payload")
    return model, TrainConfig(**config["train"]), LossConfig(**config["loss"])


def load(path) -> tuple[LViT, TrainConfig, LossConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
