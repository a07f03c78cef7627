"""Binary checkpoint files.

Layout (little-endian)::

    b"STCK" | u32 version | u32 float width (4 or 8)
    u32 len | UTF-8 JSON model config
    u32 n_blocks | n_blocks x (u32 name len | UTF-8 name | u32 count | count floats)
    optional trainer section:
    b"OPTS" | u32 len | UTF-8 JSON trainer state | u32 n_blocks | blocks as above

The tied projection appears once, under ``proj.weight``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STCK"
OPT_MAGIC = b"OPTS"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    pass


class CheckpointCompatibilityError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    trainer_state: dict | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int((self.trainer_state or {}).get("step", 0))


def _write_blocks(buf: bytearray, blocks: dict[str, np.ndarray], dtype: str) -> None:
    buf += _U32.pack(len(blocks))
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        flat = np.ascontiguousarray(arr, dtype=dtype).reshape(-1)
        buf += _U32.pack(len(raw)) + raw + _U32.pack(flat.size) + flat.tobytes()


def _read_blocks(raw: bytes, pos: int, dtype: str, width: int) -> tuple[dict, int]:
    (n,) = _U32.unpack_from(raw, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = _U32.unpack_from(raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (count,) = _U32.unpack_from(raw, pos)
        pos += 4
        out[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).copy()
        pos += count * width
    return out, pos


def _dtype_for(width: int) -> str:
    if width not in (4, 8):
        raise CheckpointFormatError(f"unsupported float width {width}")
    return "<f4" if width == 4 else "<f8"


def save_checkpoint(path, ckpt: Checkpoint, width: int = 4) -> None:
    """Write ``ckpt``; ``width=8`` keeps 64-bit runs bit-exact across a reload."""
    dtype = _dtype_for(width)
    buf = bytearray(MAGIC)
    buf += _U32.pack(VERSION) + _U32.pack(width)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf += _U32.pack(len(cfg)) + cfg
    _write_blocks(buf, ckpt.params, dtype)
    if ckpt.trainer_state is not None:
        state = json.dumps(ckpt.trainer_state, sort_keys=True).encode("utf-8")
        buf += OPT_MAGIC + _U32.pack(len(state)) + state
        _write_blocks(buf, ckpt.optimizer, dtype)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, width = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    dtype = _dtype_for(width)
    (ln,) = _U32.unpack_from(raw, 12)
    config = json.loads(raw[16:16 + ln].decode("utf-8"))
    params, pos = _read_blocks(raw, 16 + ln, dtype, width)
    state, opt = None, {}
    if pos < len(raw):
        if raw[pos:pos + 4] != OPT_MAGIC:
            raise CheckpointFormatError(f"{path}: trailing bytes are not a trainer section")
        (ln,) = _U32.unpack_from(raw, pos + 4)
        state = json.loads(raw[pos + 8:pos + 8 + ln].decode("utf-8"))
        opt, pos = _read_blocks(raw, pos + 8 + ln, dtype, width)
    return Checkpoint(config, params, state, opt)


def average_checkpoints(checkpoints: list[Checkpoint]) -> dict[str, np.ndarray]:
    """Elementwise mean of the parameters; optimizer state is dropped."""
    if not checkpoints:
        raise CheckpointCompatibilityError("need at least one checkpoint to average")
    ref = checkpoints[0].params
    for c in checkpoints[1:]:
        if set(c.params) != set(ref):
            raise CheckpointCompatibilityError("checkpoints have different parameter inventories")
        for k, v in c.params.items():
            if v.shape != ref[k].shape:
                raise CheckpointCompatibilityError(f"parameter {k}: shape {v.shape} vs {ref[k].shape}")
    out = {}
    for k in ref:
        acc = np.zeros(ref[k].shape, dtype=np.float64)
        for c in checkpoints:
            acc += c.params[k]
        out[k] = (acc / len(checkpoints)).astype(ref[k].dtype)
    return out
