# app/services/bitwise_engine.py
"""
Bit-serial quantized matmul.

Codes are split into bit-planes packed 64 per little-endian uint64 word; a dot
product of M-bit activation codes with K-bit weight codes is

    sum_i sum_j 2^(i+j) * popcount(a_i AND w_j)

Weight levels are signed (w = s_w * c_w + o_w), activations unsigned, so one
extra popcount-derived term (sum of activation codes) bridges the affine maps.
"""
from __future__ import annotations

import logging

import numpy as np

from app.errors import ContractError, DimensionError
from app.models.codes import BitPlanes, CodeTensor, QuantLinearPacked, QuantizedWeights
from app.services.tensor_core import im2col3x3_array

logger = logging.getLogger(__name__)

WORD_BITS = 64
GEMM_ROW_BLOCK = 2048
_POPCOUNT_LUT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def popcount(words: np.ndarray) -> np.ndarray:
    """Per-word popcount of a uint64 array (numpy >= 2 native, else byte lookup table)."""
    native = getattr(np, "bitwise_count", None)
    if native is not None:
        return native(words).astype(np.int64)
    words = np.ascontiguousarray(words, dtype=np.uint64)
    per_byte = _POPCOUNT_LUT[words.view(np.uint8)]
    return per_byte.reshape(words.shape + (8,)).sum(axis=-1, dtype=np.int64)


def _codes_of(codes) -> np.ndarray:
    if isinstance(codes, CodeTensor):
        return codes.codes
    return np.asarray(codes)


# =====================
# Packing
# =====================
def pack(codes, bit_width: int | None = None) -> BitPlanes:
    """Bit-plane decomposition along the last axis."""
    if isinstance(codes, CodeTensor):
        bit_width = bit_width or codes.bits
    raw = _codes_of(codes)
    if bit_width is None or bit_width < 1:
        raise ContractError(f"bit_width must be >= 1, got {bit_width}")
    raw = np.atleast_1d(raw).astype(np.int64)
    if raw.size and (raw.min() < 0 or raw.max() >= 2 ** bit_width):
        raise ContractError(f"code overflow: codes must lie in [0, {2 ** bit_width - 1}]")

    length = raw.shape[-1]
    words = max(1, -(-length // WORD_BITS))
    pad = words * WORD_BITS - length
    planes = []
    for i in range(bit_width):
        bits = ((raw >> i) & 1).astype(np.uint8)
        if pad:
            bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
        packed = np.packbits(bits, axis=-1, bitorder="little")
        planes.append(np.ascontiguousarray(packed).view("<u8").astype(np.uint64))
    return BitPlanes(planes=np.stack(planes), length=length, bit_width=bit_width)


def unpack(bp: BitPlanes) -> np.ndarray:
    out = None
    for i in range(bp.bit_width):
        as_bytes = np.ascontiguousarray(bp.planes[i]).astype("<u8").view(np.uint8)
        bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., : bp.length].astype(np.int64)
        out = bits << i if out is None else out + (bits << i)
    return out


# =====================
# Dot products
# =====================
def popcount_dot(A: BitPlanes, W: BitPlanes) -> int:
    """Integer dot product of two code vectors, exactly."""
    if A.length != W.length or A.words != W.words:
        raise ContractError(f"length mismatch: {A.length} vs {W.length}")
    total = 0
    for i in range(A.bit_width):
        for j in range(W.bit_width):
            total += int(popcount(A.planes[i] & W.planes[j]).sum()) << (i + j)
    return total


def code_sum(A: BitPlanes) -> np.ndarray:
    """sum of codes per vector: sum_i 2^i * popcount(plane_i)."""
    total = np.zeros(A.planes.shape[1:-1], dtype=np.int64)
    for i in range(A.bit_width):
        total = total + (popcount(A.planes[i]).sum(axis=-1) << i)
    return total


def popcount_gemm(A: BitPlanes, W: BitPlanes) -> np.ndarray:
    """(batch, out) integer GEMM between activation rows and weight rows."""
    if A.length != W.length or A.words != W.words:
        raise ContractError(f"length mismatch: {A.length} vs {W.length}")
    a = A.planes.reshape(A.bit_width, -1, A.words)
    w = W.planes.reshape(W.bit_width, -1, W.words)
    acc = np.zeros((a.shape[1], w.shape[1]), dtype=np.int64)
    for lo in range(0, a.shape[1], GEMM_ROW_BLOCK):
        hi = min(lo + GEMM_ROW_BLOCK, a.shape[1])
        for i in range(A.bit_width):
            for j in range(W.bit_width):
                both = a[i, lo:hi, None, :] & w[j][None, :, :]
                acc[lo:hi] += popcount(both).sum(axis=-1) << (i + j)
    return acc


def dot_real(A: BitPlanes, act_scale: float, layer: QuantLinearPacked, row: int, act_offset: float = 0.0) -> float:
    """
    sum_k a_k * w_k with a = s_a * c_a + o_a and w = s_w * c_w + o_w, from popcounts only.
    """
    W_row = BitPlanes(planes=layer.weight_planes.planes[:, row], length=layer.in_features, bit_width=layer.weight_bits)
    dot = popcount_dot(A, W_row)
    sum_a = int(code_sum(A))
    s_w, o_w = layer.weight_scale, layer.weight_offset
    value = act_scale * (s_w * dot + o_w * sum_a)
    if act_offset:
        value += act_offset * (s_w * int(layer.row_code_sums[row]) + o_w * layer.in_features)
    return float(value)


# =====================
# Layers
# =====================
def pack_linear(
    weights: QuantizedWeights,
    act_bits: int,
    act_scale: float,
    bias: np.ndarray | None = None,
    act_offset: float = 0.0,
    row_scale: np.ndarray | None = None,
) -> QuantLinearPacked:
    codes = np.asarray(weights.codes)
    if codes.ndim != 2:
        codes = codes.reshape(codes.shape[0], -1)
    out_features, in_features = codes.shape
    return QuantLinearPacked(
        weight_planes=pack(codes, weights.bits),
        in_features=in_features,
        out_features=out_features,
        act_bits=act_bits,
        weight_bits=weights.bits,
        weight_scale=float(weights.scale),
        weight_offset=float(weights.offset),
        act_scale=float(act_scale),
        row_code_sums=codes.astype(np.int64).sum(axis=1),
        bias=None if bias is None else np.asarray(bias, dtype=np.float64),
        act_offset=float(act_offset),
        row_scale=None if row_scale is None else np.asarray(row_scale, dtype=np.float64),
    )


def infer_linear(layer: QuantLinearPacked, x_codes: CodeTensor) -> np.ndarray:
    """(batch, in) activation codes -> (batch, out) real outputs."""
    if x_codes.bits != layer.act_bits:
        raise ContractError(f"activation bit-width {x_codes.bits} != layer M={layer.act_bits}")
    codes = np.atleast_2d(x_codes.codes)
    if codes.shape[-1] != layer.in_features:
        raise DimensionError(f"input features {codes.shape[-1]} != layer in_features {layer.in_features}")
    A = pack(codes, layer.act_bits)
    dots = popcount_gemm(A, layer.weight_planes).astype(np.float64)
    sum_a = code_sum(A).astype(np.float64)[:, None]
    s_a, s_w, o_w = layer.act_scale, layer.weight_scale, layer.weight_offset
    out = s_a * (s_w * dots + o_w * sum_a)
    if layer.act_offset:
        o_a = layer.act_offset
        out = out + o_a * (s_w * layer.row_code_sums.astype(np.float64)[None, :] + o_w * layer.in_features)
    if layer.row_scale is not None:
        out = out * layer.row_scale[None, :]
    if layer.bias is not None:
        out = out + layer.bias[None, :]
    return out


def infer_conv3x3(layer: QuantLinearPacked, x_codes: CodeTensor) -> np.ndarray:
    """(B, C, H, W) codes -> (B, out, H, W); zero padding is code 0."""
    codes = np.asarray(x_codes.codes)
    if codes.ndim != 4:
        raise DimensionError(f"conv input must be (B, C, H, W), got {codes.shape}")
    B, _, H, W = codes.shape
    cols = im2col3x3_array(codes)
    flat = CodeTensor(codes=cols, bits=x_codes.bits, scale=x_codes.scale, offset=x_codes.offset)
    out = infer_linear(layer, flat)
    return out.reshape(B, H, W, layer.out_features).transpose(0, 3, 1, 2)


def reference_linear(layer: QuantLinearPacked, x_codes: CodeTensor) -> np.ndarray:
    """Dequantize -> float64 matmul; the oracle for `infer_linear`."""
    codes = np.atleast_2d(x_codes.codes).astype(np.float64)
    a = layer.act_scale * codes + layer.act_offset
    w_codes = unpack(layer.weight_planes).astype(np.float64)
    w = layer.weight_scale * w_codes + layer.weight_offset
    out = a @ w.T
    if layer.row_scale is not None:
        out = out * layer.row_scale[None, :]
    if layer.bias is not None:
        out = out + layer.bias[None, :]
    return out
