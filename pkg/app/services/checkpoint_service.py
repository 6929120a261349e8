# app/services/checkpoint_service.py
"""
Versioned checkpoint container.

    magic "N2UQCKPT" | version u32 | seed i64 | step u64 | config_len u32 | config JSON
    entry_count u32
    per entry: name_len u32 | name utf-8 | section u8 | ndim u32 | dims u32[ndim] | float32 LE data

Entries are written sorted by (section, name) and the config JSON with sorted
keys, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.errors import FormatError
from app.models.training import CHECKPOINT_VERSION, Checkpoint, TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"N2UQCKPT"
_HEADER = struct.Struct("<8sIqQI")
_SECTIONS = {0: "param", 1: "adam_m", 2: "adam_v"}


def _sections(ckpt: Checkpoint):
    return ((0, ckpt.tensors), (1, ckpt.adam_m), (2, ckpt.adam_v))


def dumps(ckpt: Checkpoint) -> bytes:
    config = json.dumps(ckpt.config.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()
    parts = [_HEADER.pack(MAGIC, ckpt.version, int(ckpt.seed), int(ckpt.step), len(config)), config]
    entries = []
    for section, table in _sections(ckpt):
        for name in sorted(table):
            entries.append((section, name, np.asarray(table[name], dtype="<f4")))
    parts.append(struct.pack("<I", len(entries)))
    for section, name, arr in entries:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", section, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError("checkpoint truncated", offset=self.pos)
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise FormatError("checkpoint truncated", offset=self.pos)
        out = self.raw[self.pos:self.pos + size]
        self.pos += size
        return out


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    magic, version, seed, step, config_len = r.take(_HEADER.format)
    if magic != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)

    config_at = r.pos
    try:
        config = TrainConfig.model_validate(json.loads(r.take_bytes(config_len)))
    except (ValueError, ValidationError) as e:
        raise FormatError(f"checkpoint config is invalid: {e}", offset=config_at) from e

    tables: dict[str, dict[str, np.ndarray]] = {name: {} for name in _SECTIONS.values()}
    (count,) = r.take("<I")
    for _ in range(count):
        at = r.pos
        (name_len,) = r.take("<I")
        name = r.take_bytes(name_len).decode("utf-8", errors="strict")
        section, ndim = r.take("<BI")
        if section not in _SECTIONS:
            raise FormatError(f"unknown section {section} for entry {name!r}", offset=at)
        dims = r.take(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take_bytes(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tables[_SECTIONS[section]][name] = data
    if r.pos != len(raw):
        raise FormatError("trailing bytes after the last entry", offset=r.pos)

    return Checkpoint(
        tensors=tables["param"],
        config=config,
        step=step,
        seed=seed,
        adam_m=tables["adam_m"],
        adam_v=tables["adam_v"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    logger.info("[CKPT] saved path=%s step=%s entries=%s", path, ckpt.step, len(ckpt.tensors))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes())
