# app/services/packed_format.py
"""
Packed inference export.

Container (little-endian):

    magic "N2UQPACK" | version u32 | layer_count u32
    per layer:
      kind u8 (0 linear, 1 conv3x3) | M u8 | K u8 | has_rprelu u8 | in u32 | out u32
      K > 0 : words u32 | planes u64[K * out * words] | s_w o_w s_a o_a f32 | row_scale f32[out]
      K == 0: weights f32[out * in (* 9 for conv)]
      bias f32[out]
      M > 0 : s f32 | a f32[2^M - 1] | beta1 f32 | beta2 f32
      has_rprelu: gamma f32[out] | beta f32[out] | zeta f32[out]

First and last layers are the M = K = 0 case and keep full-precision weights.
On load s_w and s_a are recomputed at float64 from K and beta2, so packed
inference reproduces the float64 training path.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.errors import ContractError, DimensionError, FormatError
from app.models.codes import BitPlanes, QuantLinearPacked
from app.models.quant_params import QuantParams
from app.models.training import RPReLUParams
from app.services.activation_quantizer import quantize_forward
from app.services.bitwise_engine import infer_conv3x3, infer_linear, pack_linear, unpack
from app.services.datasets import Dataset
from app.services.layers import Network, rprelu
from app.services.tensor_core import im2col3x3_array

logger = logging.getLogger(__name__)

MAGIC = b"N2UQPACK"
PACK_VERSION = 1
_KINDS = {"linear": 0, "conv3x3": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


@dataclass
class PackedLayer:
    kind: str
    in_dim: int
    out_dim: int
    bias: np.ndarray
    act_params: QuantParams | None = None
    packed: QuantLinearPacked | None = None
    weight: np.ndarray | None = None        # full-precision layers only
    rprelu: RPReLUParams | None = None

    @property
    def act_bits(self) -> int:
        return self.act_params.n if self.act_params is not None else 0

    @property
    def weight_bits(self) -> int:
        return self.packed.weight_bits if self.packed is not None else 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "linear" and x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if self.packed is not None:
            codes = quantize_forward(x, self.act_params)
            run = infer_conv3x3 if self.kind == "conv3x3" else infer_linear
            out = run(self.packed, codes)
        else:
            if self.act_params is not None:
                x = quantize_forward(x, self.act_params).dequantize(np.float64)
            out = _float_layer(self.kind, x, self.weight, self.bias)
        if self.rprelu is not None:
            out = rprelu(out, self.rprelu)
        return out


def _float_layer(kind: str, x: np.ndarray, W: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out_dim = W.shape[0]
    if kind == "conv3x3":
        if x.ndim != 4:
            raise DimensionError(f"conv3x3 expects (B, C, H, W), got {x.shape}")
        B, _, H, Wd = x.shape
        out = im2col3x3_array(x) @ W.reshape(out_dim, -1).T + bias
        return out.reshape(B, H, Wd, out_dim).transpose(0, 3, 1, 2)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear expects {W.shape[1]} features, got {x.shape}")
    return x @ W.T + bias


class PackedNetwork:
    def __init__(self, layers: list[PackedLayer]):
        if not layers:
            raise ContractError("packed network has no layers")
        self.layers = layers

    def forward(self, x) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def evaluate(self, data: Dataset, batch_size: int = 256) -> float:
        data.require_nonempty()
        correct = 0
        for lo in range(0, len(data), batch_size):
            pred = self.predict(data.x[lo:lo + batch_size])
            correct += int(np.sum(pred == data.y[lo:lo + batch_size]))
        return correct / len(data)


# =====================
# Export
# =====================
def export_network(net: Network) -> PackedNetwork:
    """Freeze a trained network: weight codes, bit-planes, quantizer params as stored."""
    layers = []
    for k, layer in enumerate(net.layers):
        spec = layer.spec
        W = layer.weight.data.astype(np.float64)
        act_params = layer.act_q.params() if layer.act_q is not None else None
        act = net.activations[k].params() if k < len(net.activations) else None
        bias = layer.bias.data.astype(np.float64)
        if layer.weight_q is not None:
            if act_params is None:
                raise ContractError(f"layer {k}: packed weights need quantized activations")
            q = layer.weight_q.quantized(W)
            packed = pack_linear(
                q,
                act_bits=act_params.n,
                act_scale=act_params.out_scale,
                bias=bias,
                row_scale=layer.alpha.data.astype(np.float64),
            )
            layers.append(PackedLayer(spec.kind, spec.in_dim, spec.out_dim, bias, act_params, packed, None, act))
        else:
            layers.append(PackedLayer(spec.kind, spec.in_dim, spec.out_dim, bias, act_params, None, W, act))
    logger.info("[EXPORT] layers=%s packed=%s", len(layers), sum(l.packed is not None for l in layers))
    return PackedNetwork(layers)


# =====================
# Serialization
# =====================
def _f32(values) -> bytes:
    return np.asarray(values, dtype="<f4").reshape(-1).tobytes()


def dumps(pn: PackedNetwork) -> bytes:
    parts = [struct.pack("<8sII", MAGIC, PACK_VERSION, len(pn.layers))]
    for layer in pn.layers:
        parts.append(
            struct.pack(
                "<BBBBII",
                _KINDS[layer.kind],
                layer.act_bits,
                layer.weight_bits,
                int(layer.rprelu is not None),
                layer.in_dim,
                layer.out_dim,
            )
        )
        if layer.packed is not None:
            p = layer.packed
            parts.append(struct.pack("<I", p.weight_planes.words))
            parts.append(np.ascontiguousarray(p.weight_planes.planes, dtype="<u8").tobytes())
            parts.append(struct.pack("<ffff", p.weight_scale, p.weight_offset, p.act_scale, p.act_offset))
            row_scale = p.row_scale if p.row_scale is not None else np.ones(p.out_features)
            parts.append(_f32(row_scale))
        else:
            parts.append(_f32(layer.weight))
        parts.append(_f32(layer.bias))
        if layer.act_params is not None:
            ap = layer.act_params
            parts.append(_f32(np.concatenate([[ap.s], ap.a, [ap.beta1, ap.beta2]])))
        if layer.rprelu is not None:
            parts.append(_f32(np.concatenate([layer.rprelu.gamma, layer.rprelu.beta, layer.rprelu.zeta])))
    return b"".join(parts)


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError("packed model truncated", offset=self.pos)
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.raw):
            raise FormatError("packed model truncated", offset=self.pos)
        out = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return out


def loads(raw: bytes) -> PackedNetwork:
    cur = _Cursor(raw)
    magic, version, count = cur.unpack("<8sII")
    if magic != MAGIC:
        raise FormatError("not a packed model (bad magic)", offset=0)
    if version != PACK_VERSION:
        raise FormatError(f"unsupported packed model version {version}", offset=8)

    layers = []
    for _ in range(count):
        at = cur.pos
        kind_id, M, K, has_act, in_dim, out_dim = cur.unpack("<BBBBII")
        if kind_id not in _KIND_NAMES:
            raise FormatError(f"unknown layer kind {kind_id}", offset=at)
        kind = _KIND_NAMES[kind_id]
        fan_in = in_dim * (9 if kind == "conv3x3" else 1)
        packed = weight = None
        if K > 0:
            (words,) = cur.unpack("<I")
            planes = cur.array("<u8", K * out_dim * words).astype(np.uint64).reshape(K, out_dim, words)
            s_w, o_w, s_a, o_a = cur.unpack("<ffff")
            row_scale = cur.array("<f4", out_dim).astype(np.float64)
            bp = BitPlanes(planes=planes, length=fan_in, bit_width=K)
            codes = unpack(bp)
            packed = QuantLinearPacked(
                weight_planes=bp,
                in_features=fan_in,
                out_features=out_dim,
                act_bits=M,
                weight_bits=K,
                weight_scale=2.0 / (2 ** K - 1) if o_w == -1.0 else s_w,
                weight_offset=o_w,
                act_scale=s_a,
                row_code_sums=codes.sum(axis=1),
                act_offset=o_a,
                row_scale=row_scale,
            )
        else:
            shape = (out_dim, in_dim, 3, 3) if kind == "conv3x3" else (out_dim, in_dim)
            weight = cur.array("<f4", int(np.prod(shape))).astype(np.float64).reshape(shape)
        bias = cur.array("<f4", out_dim).astype(np.float64)
        act_params = None
        if M > 0:
            vals = cur.array("<f4", 2 ** M + 2).astype(np.float64)
            act_params = QuantParams(n=M, s=vals[0], a=vals[1:-2], beta1=vals[-2], beta2=vals[-1])
            try:
                act_params.validate()
            except ContractError as e:
                raise FormatError(f"invalid activation quantizer: {e}", offset=at) from e
        if packed is not None:
            if act_params is None:
                raise FormatError("packed weights without an activation quantizer", offset=at)
            packed.bias = bias
            packed.act_scale = act_params.out_scale
        act = None
        if has_act:
            vals = cur.array("<f4", 3 * out_dim).astype(np.float64).reshape(3, out_dim)
            act = RPReLUParams(gamma=vals[0], beta=vals[1], zeta=vals[2])
        layers.append(PackedLayer(kind, in_dim, out_dim, bias, act_params, packed, weight, act))
    if cur.pos != len(raw):
        raise FormatError("trailing bytes after the last layer", offset=cur.pos)
    return PackedNetwork(layers)


def write_packed(pn: PackedNetwork, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(pn))
    logger.info("[EXPORT] wrote path=%s bytes=%s", path, path.stat().st_size)
    return path


def read_packed(path: str | Path) -> PackedNetwork:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes())
