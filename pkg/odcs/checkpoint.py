"""
Binary checkpoint format
========================

All integers and floats are little-endian::

    magic        4 bytes  b"ODCS"
    version      u16
    config       u32 length + UTF-8 text (``dump_config`` output)
    counters     u64 step, u32 next_epoch, u32 next_batch, i64 seed
    tensors      table (parameters and batch-norm buffers)
    optimizer    u64 t, f64 lr, f64 beta1, f64 beta2, f64 eps, table m, table v

A table is a u32 count followed by, per tensor: u16 name length, UTF-8 name,
u8 rank, rank × u32 dims, then the elements as 32-bit floats in row-major order.
"""

import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError
from .raster import PathLike

logger = logging.getLogger(__name__)

MAGIC = b"ODCS"
FORMAT_VERSION = 1

TensorTable = Dict[str, np.ndarray]


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference"""

    config_text: str
    step: int = 0
    next_epoch: int = 0
    next_batch: int = 0
    seed: int = 0
    tensors: TensorTable = field(default_factory=OrderedDict)
    optimizer: dict = field(default_factory=dict)

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors whose name starts with ``prefix + '.'``, prefix stripped"""
        start = prefix + "."
        return OrderedDict((k[len(start):], v) for k, v in self.tensors.items() if k.startswith(start))


# Encoding


def _encode_table(table: TensorTable) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, value in table.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = ckpt.config_text.encode("utf-8")
    opt = ckpt.optimizer
    return b"".join([
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<QIIq", ckpt.step, ckpt.next_epoch, ckpt.next_batch, ckpt.seed),
        _encode_table(ckpt.tensors),
        struct.pack("<Q4d", int(opt.get("t", 0)), float(opt.get("lr", 0.0)),
                    float(opt.get("beta1", 0.0)), float(opt.get("beta2", 0.0)),
                    float(opt.get("eps", 0.0))),
        _encode_table(opt.get("m", {})),
        _encode_table(opt.get("v", {})),
    ])


# Decoding


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def table(self, what: str) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I", f"{what} count")
        table: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (length,) = self.unpack("<H", f"{what} name length")
            try:
                name = self.take(length, f"{what} name").decode("utf-8")
            except UnicodeDecodeError as e:
                raise CheckpointError(f"invalid tensor name in {what}: {e}") from e
            (rank,) = self.unpack("<B", f"{name} rank")
            dims = self.unpack(f"<{rank}I", f"{name} dims")
            size = int(np.prod(dims, dtype=np.int64))
            payload = self.take(4 * size, f"{name} payload")
            table[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        return table


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"not an odcs checkpoint (magic {magic!r})")
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    (length,) = reader.unpack("<I", "config length")
    try:
        config_text = reader.take(length, "config").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"config snapshot is not valid UTF-8: {e}") from e
    step, next_epoch, next_batch, seed = reader.unpack("<QIIq", "counters")
    tensors = reader.table("tensors")
    t, lr, beta1, beta2, eps = reader.unpack("<Q4d", "optimizer header")
    m = reader.table("optimizer m")
    v = reader.table("optimizer v")
    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} unexpected trailing bytes")
    return Checkpoint(
        config_text=config_text, step=step, next_epoch=next_epoch, next_batch=next_batch,
        seed=seed, tensors=tensors,
        optimizer={"t": t, "lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps, "m": m, "v": v},
    )


def save_checkpoint(ckpt: Checkpoint, path: PathLike):
    """Write atomically: a temporary file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (step %d)", path, ckpt.step)


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
