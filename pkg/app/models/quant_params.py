# app/models/quant_params.py
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from app.errors import ContractError, DegenerateInputError

A_MIN = 1e-3  # interval width 하한 (optimizer step 이후 clamp)


@dataclass
class QuantParams:
    """
    One layer's activation-quantizer state.

    Cut points d_0..d_N (N = 2^n - 1) are d_0 = s, d_i = s + a_1 + ... + a_i;
    the forward switches from code i-1 to code i at d_{i-1} + a_i / 2.
    """

    n: int
    s: float
    a: np.ndarray
    beta1: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        self.s = float(self.s)
        self.beta1 = float(self.beta1)
        self.beta2 = float(self.beta2)

    @property
    def max_code(self) -> int:
        return 2 ** self.n - 1

    @property
    def out_scale(self) -> float:
        return self.beta2 * 2.0 / self.max_code

    def validate(self) -> "QuantParams":
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise ContractError(f"bit-width must be an integer >= 1, got {self.n!r}")
        if self.a.size != self.max_code:
            raise ContractError(f"expected {self.max_code} interval widths for n={self.n}, got {self.a.size}")
        values = np.concatenate([self.a, [self.s, self.beta1, self.beta2]])
        if not np.all(np.isfinite(values)):
            raise ContractError("quantizer parameters must be finite")
        if np.any(self.a < A_MIN):
            raise ContractError(f"interval widths must be >= {A_MIN}, got min {self.a.min()}")
        return self

    def cut_points(self) -> np.ndarray:
        return self.s + np.concatenate([[0.0], np.cumsum(self.a)])

    def thresholds(self) -> np.ndarray:
        return self.cut_points()[:-1] + self.a / 2.0

    def parameter_count(self) -> int:
        # s, beta1, beta2 + (2^n - 1) widths
        return self.a.size + 3

    def copy(self) -> "QuantParams":
        return QuantParams(self.n, self.s, self.a.copy(), self.beta1, self.beta2)


@dataclass
class WeightFilter:
    """One layer's real-valued weights; rows are output-channel filters."""

    W: np.ndarray
    n: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.size == 0:
            raise DegenerateInputError("weight filter is empty")
        if not np.all(np.isfinite(self.W)):
            raise ContractError("weight filter has non-finite entries")
        if self.n < 1:
            raise ContractError(f"bit-width must be >= 1, got {self.n}")

    def per_filter(self) -> np.ndarray:
        """2-D view (filters, entries); a 1-D weight vector is a single filter."""
        if self.W.ndim <= 1:
            return self.W.reshape(1, -1)
        return self.W.reshape(self.W.shape[0], -1)


@dataclass
class StochasticSample:
    value: int
    probability_low: float
    rng_state: dict = field(default_factory=dict)
