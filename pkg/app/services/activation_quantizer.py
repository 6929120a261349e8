# app/services/activation_quantizer.py
"""
Nonuniform-to-uniform activation quantizer.

Forward: learnable input thresholds, uniform output levels {0, 2/N, ..., 2} * beta2
(N = 2^n - 1). Backward: generalized straight-through estimator, i.e. the exact
derivative of the piecewise-linear expectation of the stochastic quantizer
(`surrogate`): slope 1/a_i on segment i, zero outside [d_0, d_N].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from app.errors import ContractError
from app.models.codes import ActivationCodes
from app.models.quant_params import A_MIN, QuantParams
from app.services.tensor_core import Function, Tensor

logger = logging.getLogger(__name__)

ForwardMode = Literal["quantize", "surrogate"]


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _code_dtype(n: int):
    return np.uint8 if n <= 8 else np.uint16


# =====================
# Parameters
# =====================
def default_params(n: int) -> QuantParams:
    """s = 0, a_i = 2 / (2^n - 1), beta1 = beta2 = 1."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ContractError(f"bit-width must be an integer >= 1, got {n!r}")
    N = 2 ** n - 1
    return QuantParams(n=int(n), s=0.0, a=np.full(N, 2.0 / N), beta1=1.0, beta2=1.0)


def clamp_params(p: QuantParams) -> QuantParams:
    out = p.copy()
    out.a = np.maximum(out.a, A_MIN)
    return out


# =====================
# Forward
# =====================
def quantize_forward(x, p: QuantParams) -> ActivationCodes:
    p.validate()
    xs = p.beta1 * _as_array(x)
    # 경계값은 위쪽 code로 (d_{i-1} + a_i/2 <= x' 이면 code i)
    codes = np.searchsorted(p.thresholds(), xs, side="right").astype(_code_dtype(p.n))
    return ActivationCodes(codes=codes, bits=p.n, scale=p.out_scale, offset=0.0)


def uniform_quantize(x, n: int) -> ActivationCodes:
    """Fixed equidistant thresholds on [0, 2]: the classic uniform quantizer."""
    return quantize_forward(x, default_params(n))


def surrogate(x, p: QuantParams) -> np.ndarray:
    """E[stochastic code](x'): (x' - d_{i-1}) / a_i + i - 1 on segment i, clipped to [0, N]."""
    p.validate()
    xs = p.beta1 * _as_array(x)
    d = p.cut_points()
    N = p.max_code
    idx = np.clip(np.searchsorted(d, xs, side="right"), 1, N)
    value = (xs - d[idx - 1]) / p.a[idx - 1] + (idx - 1)
    return np.clip(value, 0.0, float(N))


# =====================
# Backward (G-STE)
# =====================
@dataclass
class QuantizerContext:
    x: np.ndarray
    x_scaled: np.ndarray
    segment: np.ndarray   # 1..N inside, 0 left of d_0, N+1 right of d_N
    value: np.ndarray     # value emitted by forward (code or surrogate), before out_scale
    mode: ForwardMode = "quantize"


class QuantizerGrads(NamedTuple):
    g_x: np.ndarray
    g_a: np.ndarray
    g_s: float
    g_beta1: float
    g_beta2: float


def quantizer_context(x, p: QuantParams, mode: ForwardMode = "quantize") -> QuantizerContext:
    p.validate()
    x = _as_array(x)
    xs = p.beta1 * x
    # 구간 경계 위의 점은 왼쪽 구간 공식 사용
    segment = np.searchsorted(p.cut_points(), xs, side="left")
    if mode == "quantize":
        value = np.searchsorted(p.thresholds(), xs, side="right").astype(np.float64)
    elif mode == "surrogate":
        value = surrogate(x, p)
    else:
        raise ContractError(f"unknown forward mode {mode!r}")
    return QuantizerContext(x=x, x_scaled=xs, segment=segment, value=value, mode=mode)


def quantizer_backward(
    x,
    p: QuantParams,
    g_up,
    context: QuantizerContext | None,
    *,
    raw: bool = False,
) -> QuantizerGrads:
    """
    Gradients of the layer output w.r.t. x, a, s, beta1, beta2.

    ``raw=True`` drops the out_scale factor (gradients of the code surrogate itself).
    g_a and g_s are summed over every element sharing the quantizer.
    """
    if context is None:
        raise ContractError("quantizer_backward: missing forward context")
    g_up = _as_array(g_up)
    x = _as_array(x)
    if g_up.shape != context.x.shape or x.shape != context.x.shape:
        raise ContractError(f"quantizer_backward: shapes {g_up.shape}/{x.shape} vs context {context.x.shape}")

    N = p.max_code
    d = p.cut_points()
    seg = context.segment
    inside = (seg >= 1) & (seg <= N)
    i = np.clip(seg, 1, N)
    a_i = p.a[i - 1]
    d_prev = d[i - 1]

    g = g_up * (1.0 if raw else p.out_scale)
    slope = np.where(inside, 1.0 / a_i, 0.0)          # d code / d x'

    g_x = g * slope * p.beta1
    g_beta1 = float(np.sum(g * slope * x))
    g_s = float(np.sum(np.where(inside, -g / a_i, 0.0)))

    # own segment: -(x' - d_{i-1}) / a_i^2 ; earlier widths: -1 / a_i (segment j > k)
    flat_seg = seg[inside].reshape(-1)
    own = np.bincount(
        flat_seg,
        weights=(-g * (context.x_scaled - d_prev) / (a_i * a_i))[inside].reshape(-1),
        minlength=N + 1,
    )
    later = np.bincount(flat_seg, weights=(-g / a_i)[inside].reshape(-1), minlength=N + 2)
    # suffix[k] = sum_{j > k} later[j]
    suffix = np.concatenate([np.cumsum(later[::-1])[::-1][1:], [0.0]])
    g_a = own[1:N + 1] + suffix[1:N + 1]

    g_beta2 = float(np.sum(g_up * (2.0 / N) * context.value))
    return QuantizerGrads(g_x=g_x, g_a=g_a, g_s=g_s, g_beta1=g_beta1, g_beta2=g_beta2)


def ste_gradient(x, p: QuantParams) -> np.ndarray:
    """Classic clipped-identity STE slope (equal intervals): 1/c on [d_0, d_N], 0 outside."""
    xs = p.beta1 * _as_array(x)
    d = p.cut_points()
    c = float(p.a[0])
    return np.where((xs > d[0]) & (xs <= d[-1]), 1.0 / c, 0.0)


# =====================
# Autograd wiring
# =====================
class N2UQQuantize(Function):
    custom_gradient = True

    @staticmethod
    def forward(ctx, x, s, a, beta1, beta2, *, n: int, mode: ForwardMode = "quantize"):
        p = QuantParams(n=n, s=float(s), a=a, beta1=float(beta1), beta2=float(beta2))
        qctx = quantizer_context(x, p, mode)
        ctx.save_for_backward(p, qctx)
        return (p.out_scale * qctx.value).astype(x.dtype)

    @staticmethod
    def backward(ctx, g):
        p, qctx = ctx.saved
        grads = quantizer_backward(qctx.x, p, g, qctx)
        dtype = g.dtype
        return (
            grads.g_x.astype(dtype),
            np.asarray(grads.g_s, dtype=dtype),
            grads.g_a.astype(dtype),
            np.asarray(grads.g_beta1, dtype=dtype),
            np.asarray(grads.g_beta2, dtype=dtype),
        )


class UniformQuantize(Function):
    """Fixed-threshold baseline: clipped-identity STE on [0, 2]."""

    custom_gradient = True

    @staticmethod
    def forward(ctx, x, *, n: int):
        codes = uniform_quantize(x, n)
        ctx.save_for_backward(x)
        return codes.dequantize(x.dtype.type)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return (g * ((x >= 0.0) & (x <= 2.0)),)


class ActivationQuantizer:
    """Learnable per-layer quantizer state: 2^n + 2 scalars."""

    def __init__(self, n: int, mode: ForwardMode = "quantize"):
        p = default_params(n)
        self.n = n
        self.mode: ForwardMode = mode
        self.s = Tensor(p.s, requires_grad=True)
        self.a = Tensor(p.a, requires_grad=True)
        self.beta1 = Tensor(p.beta1, requires_grad=True)
        self.beta2 = Tensor(p.beta2, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return N2UQQuantize.apply(x, self.s, self.a, self.beta1, self.beta2, n=self.n, mode=self.mode)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("s", self.s), ("a", self.a), ("beta1", self.beta1), ("beta2", self.beta2)]

    def params(self) -> QuantParams:
        return QuantParams(
            n=self.n,
            s=float(self.s.data),
            a=self.a.data.astype(np.float64),
            beta1=float(self.beta1.data),
            beta2=float(self.beta2.data),
        )

    def clamp_(self) -> None:
        self.a.data = np.maximum(self.a.data, self.a.data.dtype.type(A_MIN))

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class UniformActivationQuantizer:
    """No learnable state; stands in for the N2UQ quantizer in baseline runs."""

    def __init__(self, n: int):
        self.n = n

    def __call__(self, x: Tensor) -> Tensor:
        return UniformQuantize.apply(x, n=self.n)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def params(self) -> QuantParams:
        return default_params(self.n)

    def clamp_(self) -> None:
        pass

    def parameter_count(self) -> int:
        return 0
