"""Binary checkpoint format.

Layout, all little-endian::

    8 bytes   magic "FANCKPT1"
    uint32    format version
    uint32    config length, then that many UTF-8 bytes
    uint32    tensor count
    per tensor:
        uint32 name length, UTF-8 name
        uint8  dtype tag (1 = float32, 2 = float64)
        uint32 rank, then rank x uint32 extents
        raw element data, C order

Model parameters and buffers are stored under their module paths; optimizer
accumulators under ``optimizer/<parameter name>``.  The epoch counter and
learning rate live in the ``[checkpoint]`` section of the config text.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_to_text, parse_config, section_values
from .errors import DataError
from .nn import Module
from .optim import RmsProp
from .training import TrainConfig, build_model

MAGIC = b"FANCKPT1"
VERSION = 1
OPTIMIZER_PREFIX = "optimizer/"
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return parse_config(self.config_text)

    @property
    def epoch(self) -> int:
        return int(section_values(self.config_text, "checkpoint").get("epoch", 0))

    @property
    def learning_rate(self) -> float | None:
        v = section_values(self.config_text, "checkpoint").get("learning_rate")
        return None if v is None else float(v)

    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        n = len(OPTIMIZER_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(OPTIMIZER_PREFIX)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise DataError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<BI{arr.ndim}I", _TAGS[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    version, n_text = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    text = r.take(n_text).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<I")
        name = r.take(n_name).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise DataError(f"tensor {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise DataError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(text, tensors)


def make_checkpoint(cfg: TrainConfig, model: Module, optimizer: RmsProp | None = None,
                    epoch: int = 0) -> Checkpoint:
    meta = {"epoch": epoch}
    if optimizer is not None:
        meta["learning_rate"] = optimizer.learning_rate
    tensors = dict(model.state_dict())
    if optimizer is not None:
        for name, acc in optimizer.state.accumulators.items():
            tensors[OPTIMIZER_PREFIX + name] = acc
    return Checkpoint(config_to_text(cfg, {"checkpoint": meta}), tensors)


def save_checkpoint(path, cfg: TrainConfig, model: Module, optimizer: RmsProp | None = None,
                    epoch: int = 0) -> None:
    Path(path).write_bytes(encode_checkpoint(make_checkpoint(cfg, model, optimizer, epoch)))


def read_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(data)


def restore(ckpt: Checkpoint, dtype=None) -> tuple[TrainConfig, Module, RmsProp]:
    """Rebuild model and optimizer from the checkpoint alone."""
    cfg = ckpt.config
    state = ckpt.model_state()
    if dtype is None:
        dtype = next(iter(state.values())).dtype if state else np.float32
    model = build_model(cfg, dtype)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match its config: {exc}") from None
    optimizer = RmsProp(model.named_parameters(), ckpt.learning_rate or cfg.learning_rate)
    optimizer.state.accumulators.update(ckpt.optimizer_state())
    model.eval()
    return cfg, model, optimizer


def load_model(path, dtype=None) -> tuple[TrainConfig, Module]:
    cfg, model, _ = restore(read_checkpoint(path), dtype)
    return cfg, model
