# app/models/codes.py
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CodeTensor:
    """Unsigned integer codes plus the affine map code -> scale * code + offset."""

    codes: np.ndarray
    bits: int
    scale: float
    offset: float = 0.0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    @property
    def max_code(self) -> int:
        return 2 ** self.bits - 1

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        return self.codes.astype(dtype) * dtype(self.scale) + dtype(self.offset)


@dataclass
class ActivationCodes(CodeTensor):
    @property
    def n(self) -> int:
        return self.bits

    @property
    def out_scale(self) -> float:
        return self.scale


@dataclass
class QuantizedWeights(CodeTensor):
    """Signed weight levels {-1, ..., 1} stored as unsigned codes."""

    @classmethod
    def from_codes(cls, codes: np.ndarray, n: int) -> "QuantizedWeights":
        return cls(codes=codes, bits=n, scale=2.0 / (2 ** n - 1), offset=-1.0)

    def levels(self) -> np.ndarray:
        return np.arange(2 ** self.bits) * self.scale + self.offset

    def occupancy(self) -> np.ndarray:
        return np.bincount(self.codes.reshape(-1).astype(np.int64), minlength=2 ** self.bits)


@dataclass
class BitPlanes:
    """
    planes[i, ..., w] holds bit i of each code, 64 codes per little-endian word.
    Padding bits beyond ``length`` are zero.
    """

    planes: np.ndarray  # uint64, shape (bit_width, *lead, words)
    length: int
    bit_width: int

    @property
    def words(self) -> int:
        return self.planes.shape[-1]


@dataclass
class QuantLinearPacked:
    weight_planes: BitPlanes        # lead dim = out_features
    in_features: int
    out_features: int
    act_bits: int                   # M
    weight_bits: int                # K
    weight_scale: float             # s_w
    weight_offset: float            # o_w (-1 for signed levels)
    act_scale: float                # s_a = beta2 * 2 / (2^M - 1)
    row_code_sums: np.ndarray       # sum of weight codes per output row
    bias: np.ndarray | None = None
    act_offset: float = 0.0         # o_a (0 for N2UQ outputs)
    row_scale: np.ndarray | None = None  # per-output affine scale, applied before bias
