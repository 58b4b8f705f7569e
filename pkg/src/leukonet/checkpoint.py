"""Named-tensor checkpoints (``.alck``).

Layout, little-endian::

    "ALCK"  u32 version=1  u8 model_kind (0 custom, 1 mobilenetv2)
    u32 blob_length  + JSON blob {"class_names": [...], "config": {...}}
    u32 tensor_count
    per tensor: u16 name_length + UTF-8 name, u8 rank, rank x u32 dims, f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, config_from_dict
from .data import atomic_write
from .models import build_model, freeze_backbone
from .network import Model

CKPT_MAGIC = b"ALCK"
CKPT_VERSION = 1
KIND_CODES = {"custom": 0, "mobilenetv2": 1}


class CheckpointError(Exception):
    pass


def _blob(config: TrainConfig, class_names) -> bytes:
    doc = {"class_names": list(class_names), "config": config.to_dict()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(model: Model, config: TrainConfig, class_names) -> bytes:
    if model.spec.kind != config.model:
        raise CheckpointError(f"model kind {model.spec.kind!r} does not match config {config.model!r}")
    blob = _blob(config, class_names)
    tensors = list(model.named_tensors())
    parts = [CKPT_MAGIC, struct.pack("<IB", CKPT_VERSION, KIND_CODES[config.model]),
             struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr, _ in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, config: TrainConfig, path, class_names=None):
    if class_names is None:
        class_names = tuple(str(i) for i in range(model.spec.classes))
    atomic_write(path, encode_checkpoint(model, config, class_names))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path="<bytes>", expect: TrainConfig | None = None):
    """Returns (model, config, class_names)."""
    r = _Reader(data, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an .alck checkpoint")
    version, kind_code = r.unpack("<IB")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind_code not in kinds:
        raise CheckpointError(f"{path}: unknown model kind code {kind_code}")
    (blob_len,) = r.unpack("<I")
    try:
        doc = json.loads(r.take(blob_len).decode("utf-8"))
        config = config_from_dict(doc["config"])
        class_names = tuple(doc["class_names"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: corrupt config blob ({e})") from None
    if config.model != kinds[kind_code]:
        raise CheckpointError(f"{path}: model kind tag {kinds[kind_code]!r} disagrees with config {config.model!r}")
    if expect is not None and expect.architecture() != config.architecture():
        raise CheckpointError(
            f"{path}: checkpoint architecture {config.architecture()} does not match requested {expect.architecture()}"
        )
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = arr
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes after tensor table")
    model = build_model(config.model, config.input_size, len(class_names),
                        config.width_multiplier, config.head_hidden, rng=None)
    expected = [name for name, _, _ in model.named_tensors()]
    if sorted(expected) != sorted(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    try:
        for name in expected:
            model.set_tensor(name, tensors[name])
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from None
    if config.freeze_backbone and config.model == "mobilenetv2":
        freeze_backbone(model)
    return model, config, class_names


def load_checkpoint(path, expect: TrainConfig | None = None):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from None
    return decode_checkpoint(data, path, expect)
