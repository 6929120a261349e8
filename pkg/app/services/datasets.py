# app/services/datasets.py
"""
Dataset ingestion: IDX (optionally gzip-compressed), label-first CSV, and the
two-Gaussian synthetic task. Features always land in float64 on [0, 1] for
files; the synthetic task is left unscaled.
"""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from app.errors import ContractError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass
class FeatureScale:
    """Per-column min-max fitted on the training CSV: x_scaled = (x - lo) / span."""
    lo: np.ndarray
    span: np.ndarray       # 상수 column 은 NaN (scaled 값 0)

    def apply(self, features: pd.DataFrame) -> np.ndarray:
        if features.shape[1] != self.lo.shape[0]:
            raise FormatError(f"expected {self.lo.shape[0]} feature columns, got {features.shape[1]}", offset=0)
        scaled = (features.to_numpy(dtype=np.float64) - self.lo) / self.span
        return np.nan_to_num(scaled, nan=0.0)


@dataclass
class Dataset:
    x: np.ndarray          # (samples, *feature_shape)
    y: np.ndarray          # (samples,) int64
    classes: int
    scale: FeatureScale | None = None

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def require_nonempty(self) -> "Dataset":
        if len(self) == 0:
            raise ContractError("dataset is empty")
        return self


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: corrupt gzip stream: {e}", offset=0) from e
    return raw


# =====================
# IDX
# =====================
def load_idx(path: str | Path) -> np.ndarray:
    """Big-endian IDX u8 tensor: 0x803 (3 dims, images) or 0x801 (1 dim, labels)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)

    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    body = len(raw) - header
    if body != expected:
        raise FormatError(f"{path}: IDX body has {body} bytes, dims {dims} need {expected}", offset=header + min(body, expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES
    elif array.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ContractError(f"IDX writer supports 1 or 3 dims, got {array.ndim}")
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image file (magic 0x{IDX_IMAGES:08x})", offset=0)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label file (magic 0x{IDX_LABELS:08x})", offset=0)
    if images.shape[0] != labels.shape[0]:
        # count field of the label header
        raise FormatError(
            f"label count {labels.shape[0]} != image count {images.shape[0]}",
            offset=4,
        )
    y = labels.astype(np.int64)
    classes = int(y.max()) + 1 if y.size else 0
    logger.info("[DATA] kind=idx samples=%s shape=%s classes=%s", len(y), images.shape[1:], classes)
    return Dataset(x=images.astype(np.float64) / 255.0, y=y, classes=classes)


# =====================
# CSV
# =====================
def load_csv(path: str | Path, scale: FeatureScale | None = None) -> Dataset:
    """``label,feature...`` rows; an optional non-numeric header row is skipped.

    Without ``scale`` the per-column min-max is fitted on this file and returned on
    ``Dataset.scale``; held-out files pass the training scale so the same raw value
    maps to the same input (values outside the training range fall outside [0, 1]).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        frame = pd.read_csv(path, header=None, comment="#", skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        logger.info("[DATA] kind=csv samples=0 path=%s", path)
        return Dataset(x=np.zeros((0, 0)), y=np.zeros(0, dtype=np.int64), classes=0)

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    if len(frame) and numeric.iloc[0].isna().any() and not numeric.iloc[1:].isna().any().any():
        numeric = numeric.iloc[1:].reset_index(drop=True)
    bad = numeric.isna().any(axis=1)
    if bad.any():
        raise FormatError(f"{path}: non-numeric or missing value", offset=int(np.flatnonzero(bad.to_numpy())[0]))
    if numeric.shape[1] < 2:
        raise FormatError(f"{path}: need a label column and at least one feature", offset=0)
    if numeric.empty:
        return Dataset(x=np.zeros((0, numeric.shape[1] - 1)), y=np.zeros(0, dtype=np.int64), classes=0)

    labels = numeric.iloc[:, 0].to_numpy()
    if np.any(labels < 0) or np.any(labels != np.round(labels)):
        raise FormatError(f"{path}: labels must be non-negative integers", offset=int(np.flatnonzero((labels < 0) | (labels != np.round(labels)))[0]))
    features = numeric.iloc[:, 1:]
    if scale is None:
        lo, hi = features.min().to_numpy(dtype=np.float64), features.max().to_numpy(dtype=np.float64)
        span = hi - lo
        scale = FeatureScale(lo=lo, span=np.where(span == 0, np.nan, span))
    scaled = scale.apply(features)

    y = labels.astype(np.int64)
    logger.info("[DATA] kind=csv samples=%s features=%s", len(y), scaled.shape[1])
    return Dataset(x=scaled, y=y, classes=int(y.max()) + 1, scale=scale)


# =====================
# Synthetic
# =====================
def make_two_gaussians(samples: int, dim: int, seed: int, *, separation: float = 1.0, spread: float = 0.75) -> Dataset:
    """Balanced 2-class task: N(+separation, spread^2) vs N(-separation, spread^2) per feature."""
    if samples < 2 or dim < 1:
        raise ContractError(f"need samples >= 2 and dim >= 1, got {samples}, {dim}")
    rng = np.random.Generator(np.random.Philox(seed))
    y = np.arange(samples) % 2
    rng.shuffle(y)
    centers = np.where(y[:, None] == 1, separation, -separation)
    x = centers + spread * rng.standard_normal((samples, dim))
    return Dataset(x=x, y=y.astype(np.int64), classes=2)
