"""
Binary checkpoint files.

    magic "AFNC" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 values

All integers and values are little-endian. Besides the parameters the
table holds `velocity.<name>` momentum buffers, `__config__` (the model
config as UTF-8 JSON, one byte per value) and `__meta__` (iteration and
seed as 16-bit limbs, least significant first).
"""

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from pydantic import ValidationError

from src.config import ModelConfig
from src.data import atomic_write
from src.errors import CheckpointError, ShapeError
from src.model import AffordanceDetector

MAGIC = b"AFNC"
VERSION = 1
CONFIG_KEY = "__config__"
META_KEY = "__meta__"
VELOCITY_PREFIX = "velocity."
LIMBS = 4


def _to_limbs(value: int) -> np.ndarray:
    if value < 0 or value >= 1 << (16 * LIMBS):
        raise ValueError(f"{value} does not fit in {LIMBS} 16-bit limbs")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(LIMBS)], dtype=np.float32)


def _from_limbs(values: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(values))


def _encode_tensor(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name[:40]}...")
    values = np.asarray(values)
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def checkpoint_tensors(detector: AffordanceDetector) -> Dict[str, np.ndarray]:
    """Every tensor written for a detector, in file order."""
    config_bytes = detector.config.model_dump_json().encode("utf-8")
    tensors = {
        CONFIG_KEY: np.frombuffer(config_bytes, dtype=np.uint8).astype(np.float32),
        META_KEY: np.concatenate([_to_limbs(detector.iteration), _to_limbs(detector.seed)]),
    }
    tensors.update(detector.params)
    tensors.update({VELOCITY_PREFIX + name: v for name, v in detector.velocity.items()})
    return tensors


def save_checkpoint(detector: AffordanceDetector, path: Path) -> None:
    """Write atomically (temporary file, then rename)."""
    tensors = checkpoint_tensors(detector)
    blob = bytearray(MAGIC + struct.pack("<II", VERSION, len(tensors)))
    for name, values in tensors.items():
        blob += _encode_tensor(name, values)
    atomic_write(Path(path), lambda handle: handle.write(bytes(blob)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint_tensors(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())

    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint file", offset=0)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=4)
    (count,) = reader.unpack("<I", "tensor count")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H", "tensor name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8", offset=start + 2)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}", offset=start)
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        count_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = reader.take(4 * count_values, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if reader.offset != len(reader.data):
        raise CheckpointError("trailing bytes after the last tensor", offset=reader.offset)
    return tensors


def load_checkpoint(path: Path) -> AffordanceDetector:
    """Rebuild a detector; any inconsistency raises CheckpointError and nothing is returned."""
    tensors = read_checkpoint_tensors(path)
    for key in (CONFIG_KEY, META_KEY):
        if key not in tensors:
            raise CheckpointError(f"checkpoint has no {key} tensor")

    config_values = tensors.pop(CONFIG_KEY)
    if np.any(config_values != np.round(config_values)) or np.any((config_values < 0) | (config_values > 255)):
        raise CheckpointError(f"{CONFIG_KEY} does not hold bytes")
    try:
        config = ModelConfig.model_validate_json(config_values.astype(np.uint8).tobytes())
    except ValidationError as e:
        raise CheckpointError(f"stored model config is invalid: {e}")

    meta = tensors.pop(META_KEY)
    if meta.shape != (2 * LIMBS,):
        raise CheckpointError(f"{META_KEY} must hold {2 * LIMBS} values, got {meta.shape}")
    iteration, seed = _from_limbs(meta[:LIMBS]), _from_limbs(meta[LIMBS:])

    velocity = {k[len(VELOCITY_PREFIX):]: v for k, v in tensors.items() if k.startswith(VELOCITY_PREFIX)}
    params = {k: v for k, v in tensors.items() if not k.startswith(VELOCITY_PREFIX)}
    try:
        return AffordanceDetector(config, seed=seed, params=params, velocity=velocity, iteration=iteration)
    except ShapeError as e:
        raise CheckpointError(f"checkpoint does not match its config: {e}")
