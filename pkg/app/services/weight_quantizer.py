# app/services/weight_quantizer.py
"""
Weight quantization: entropy-preserving rescaling followed by the fixed
equidistant quantizer F_Q onto {-1, ..., 1}, plus the comparators used in
ablations (tanh/max, weight norm, learned scale, no regularization).

The rescaling factor 2^(n-1)/(2^n-1) * |W| / ||W||_1 is computed per output
filter and treated as a constant of the step in backward.
"""
from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from scipy.stats import entropy as _entropy

from app.errors import ContractError, DegenerateInputError
from app.models.codes import QuantizedWeights
from app.models.quant_params import WeightFilter
from app.services.tensor_core import Function, Tensor

logger = logging.getLogger(__name__)

WeightMethod = Literal["entropy", "tanh_max", "weight_norm", "learned_scale", "none"]
WEIGHT_METHODS: tuple[str, ...] = ("entropy", "tanh_max", "weight_norm", "learned_scale", "none")


def _as_array(w) -> np.ndarray:
    if isinstance(w, Tensor):
        w = w.data
    return np.asarray(w, dtype=np.float64)


def target_abs_mean(n: int) -> float:
    """mean |W'| after regularization: 2^(n-1) / (2^n - 1)."""
    return 2.0 ** (n - 1) / (2 ** n - 1)


def regularization_factor(filt: WeightFilter) -> np.ndarray:
    rows = filt.per_filter()
    l1 = np.abs(rows).sum(axis=1)
    if np.any(l1 == 0):
        raise DegenerateInputError(f"filter(s) {np.flatnonzero(l1 == 0).tolist()} have zero L1 norm")
    return target_abs_mean(filt.n) * rows.shape[1] / l1


def _broadcast_rows(factor: np.ndarray, shape: tuple) -> np.ndarray:
    if len(shape) <= 1:
        return factor.reshape(())
    return factor.reshape((-1,) + (1,) * (len(shape) - 1))


def regularize(filt: WeightFilter) -> np.ndarray:
    factor = regularization_factor(filt)
    return filt.W * _broadcast_rows(factor, filt.W.shape)


def fq_quantize(w_prime, n: int) -> QuantizedWeights:
    """codes = round_half_up((clip(w', -1, 1) + 1) * (2^n - 1) / 2)."""
    if n < 1:
        raise ContractError(f"bit-width must be >= 1, got {n}")
    N = 2 ** n - 1
    shifted = (np.clip(_as_array(w_prime), -1.0, 1.0) + 1.0) * (N / 2.0)
    codes = np.floor(shifted + 0.5).astype(np.uint8 if n <= 8 else np.uint16)
    return QuantizedWeights.from_codes(codes, n)


def clip_mask(w_prime) -> np.ndarray:
    return np.abs(_as_array(w_prime)) <= 1.0


def weight_backward(g_up, w_prime, n: int, *, mask: np.ndarray | None, factor=None) -> np.ndarray:
    """STE through F_Q: g_W = g_up * mask * factor, factor frozen for the step."""
    if mask is None:
        raise ContractError("weight_backward: missing clip mask from forward")
    g_up = _as_array(g_up)
    if mask.shape != g_up.shape:
        raise ContractError(f"weight_backward: mask {mask.shape} vs grad {g_up.shape}")
    scale = 1.0 if factor is None else _broadcast_rows(np.asarray(factor, dtype=np.float64), g_up.shape)
    return g_up * mask * scale


def entropy_bits(q: QuantizedWeights) -> float:
    if q.codes.size == 0:
        raise ContractError("entropy of an empty code set")
    return float(_entropy(q.occupancy(), base=2))


# =====================
# Comparators
# =====================
def baseline_tanh_max(W, n: int) -> QuantizedWeights:
    t = np.tanh(_as_array(W))
    m = np.max(np.abs(t)) if t.size else 0.0
    if m == 0:
        raise DegenerateInputError("tanh/max baseline: all-zero weights")
    return fq_quantize(t / m, n)


def baseline_weight_norm(W, n: int) -> QuantizedWeights:
    return fq_quantize(weight_norm(W), n)


def weight_norm(W) -> np.ndarray:
    W = _as_array(W)
    rows = W.reshape(1, -1) if W.ndim <= 1 else W.reshape(W.shape[0], -1)
    norms = np.sqrt((rows * rows).sum(axis=1))
    if np.any(norms == 0):
        raise DegenerateInputError("weight norm: zero-norm filter")
    return W / _broadcast_rows(norms, W.shape)


def initial_gamma(W, n: int) -> float:
    """gamma with mean |gamma W| == 2^(n-1) / (2^n - 1)."""
    W = _as_array(W)
    l1 = np.abs(W).sum()
    if l1 == 0:
        raise DegenerateInputError("learned scale: all-zero weights")
    return target_abs_mean(n) * W.size / l1


def baseline_learned_scale(W, n: int, gamma: float) -> QuantizedWeights:
    return fq_quantize(float(gamma) * _as_array(W), n)


def no_regularization(W, n: int) -> QuantizedWeights:
    return fq_quantize(W, n)


def quantize_weights(W, n: int, method: WeightMethod = "entropy", gamma: float | None = None) -> QuantizedWeights:
    if method == "entropy":
        return fq_quantize(regularize(WeightFilter(_as_array(W), n)), n)
    if method == "tanh_max":
        return baseline_tanh_max(W, n)
    if method == "weight_norm":
        return baseline_weight_norm(W, n)
    if method == "learned_scale":
        return baseline_learned_scale(W, n, initial_gamma(W, n) if gamma is None else gamma)
    if method == "none":
        return no_regularization(W, n)
    raise ContractError(f"unknown weight method {method!r}")


# =====================
# Autograd wiring
# =====================
class WeightQuantize(Function):
    custom_gradient = True

    @staticmethod
    def forward(ctx, W, *, n: int, method: WeightMethod = "entropy"):
        W64 = W.astype(np.float64)
        if method == "entropy":
            factor = regularization_factor(WeightFilter(W64, n))
            w_prime = W64 * _broadcast_rows(factor, W.shape)
            local = None
        elif method == "weight_norm":
            w_prime = weight_norm(W64)
            rows = W64.reshape(1, -1) if W.ndim <= 1 else W64.reshape(W.shape[0], -1)
            factor = 1.0 / np.sqrt((rows * rows).sum(axis=1))
            local = None
        elif method == "tanh_max":
            t = np.tanh(W64)
            m = np.max(np.abs(t))
            if m == 0:
                raise DegenerateInputError("tanh/max baseline: all-zero weights")
            w_prime = t / m
            factor = None
            local = (1.0 - t * t) / m
        elif method == "none":
            w_prime, factor, local = W64, None, None
        else:
            raise ContractError(f"unknown weight method {method!r}")
        q = fq_quantize(w_prime, n)
        mask = clip_mask(w_prime)
        ctx.save_for_backward(w_prime, mask, factor, local)
        ctx.quantized = q
        ctx.n = n
        return q.dequantize(W.dtype.type)

    @staticmethod
    def backward(ctx, g):
        w_prime, mask, factor, local = ctx.saved
        grad = weight_backward(g, w_prime, ctx.n, mask=mask, factor=factor)
        if local is not None:
            grad = grad * local
        return (grad.astype(g.dtype),)


class LearnedScaleWeightQuantize(Function):
    custom_gradient = True

    @staticmethod
    def forward(ctx, W, gamma, *, n: int):
        W64 = W.astype(np.float64)
        w_prime = float(gamma) * W64
        q = fq_quantize(w_prime, n)
        mask = clip_mask(w_prime)
        ctx.save_for_backward(W64, float(gamma), mask)
        ctx.quantized = q
        return q.dequantize(W.dtype.type)

    @staticmethod
    def backward(ctx, g):
        W64, gamma, mask = ctx.saved
        g_w = g * mask * gamma
        g_gamma = np.sum(g * mask * W64)
        return g_w.astype(g.dtype), np.asarray(g_gamma, dtype=g.dtype)


class WeightQuantizer:
    """Per-layer weight path; owns gamma when the learned-scale comparator is used."""

    def __init__(self, n: int, method: WeightMethod = "entropy", weight: Tensor | None = None):
        if method not in WEIGHT_METHODS:
            raise ContractError(f"unknown weight method {method!r}")
        self.n = n
        self.method = method
        self.gamma: Tensor | None = None
        if method == "learned_scale":
            init = initial_gamma(weight.data, n) if weight is not None else 1.0
            self.gamma = Tensor(init, requires_grad=True)

    def __call__(self, W: Tensor) -> Tensor:
        if self.method == "learned_scale":
            return LearnedScaleWeightQuantize.apply(W, self.gamma, n=self.n)
        return WeightQuantize.apply(W, n=self.n, method=self.method)

    def quantized(self, W) -> QuantizedWeights:
        gamma = float(self.gamma.data) if self.gamma is not None else None
        return quantize_weights(_as_array(W), self.n, self.method, gamma)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma)] if self.gamma is not None else []
