# app/services/stochastic_oracle.py
"""
Stochastic binarization / quantization samplers and their Monte-Carlo mean.

The expectation of `stochastic_quantize` is exactly `surrogate`, so these
samplers certify that G-STE backpropagates the derivative of that expectation.
Random streams come from numpy's counter-based Philox generator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from app.errors import ContractError
from app.models.quant_params import QuantParams, StochasticSample
from app.services.activation_quantizer import surrogate

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def stochastic_binarize(x, rng: np.random.Generator, size: int | None = None):
    """+1 with probability clip((1 + x) / 2, 0, 1), else -1."""
    p_plus = np.clip((1.0 + np.asarray(x, dtype=np.float64)) / 2.0, 0.0, 1.0)
    shape = size if size is not None else p_plus.shape
    draws = np.where(rng.random(shape) < p_plus, 1, -1)
    return int(draws) if np.ndim(draws) == 0 else draws


def _segment_probability(x, p: QuantParams):
    """(lower code, probability of the upper code) per element."""
    p.validate()
    xs = p.beta1 * np.asarray(x, dtype=np.float64)
    d = p.cut_points()
    N = p.max_code
    seg = np.searchsorted(d, xs, side="right")
    idx = np.clip(seg, 1, N)
    p_up = np.clip((xs - d[idx - 1]) / p.a[idx - 1], 0.0, 1.0)
    lower = idx - 1
    # 범위 밖은 포화
    p_up = np.where(seg == 0, 0.0, np.where(seg > N, 1.0, p_up))
    return lower, p_up


def stochastic_quantize(x, p: QuantParams, rng: np.random.Generator, size: int | None = None):
    """Code i with probability (x' - d_{i-1}) / a_i on segment i, else i - 1."""
    lower, p_up = _segment_probability(x, p)
    shape = size if size is not None else np.shape(p_up)
    codes = lower + (rng.random(shape) < p_up)
    return int(codes) if np.ndim(codes) == 0 else codes.astype(np.int64)


def stochastic_sample(x: float, p: QuantParams, rng: np.random.Generator) -> StochasticSample:
    lower, p_up = _segment_probability(x, p)
    state = rng.bit_generator.state
    value = int(lower + (rng.random() < p_up))
    return StochasticSample(value=value, probability_low=float(1.0 - p_up), rng_state=state)


def deterministic_from_threshold(x, p: QuantParams):
    """Hard threshold p = 0.5 on the upper-code probability of each segment."""
    lower, p_up = _segment_probability(x, p)
    codes = lower + (p_up >= 0.5)
    return int(codes) if np.ndim(codes) == 0 else codes.astype(np.int64)


@dataclass
class McEstimate:
    mean: float
    stderr: float
    trials: int


def mc_expectation(x: float, p: QuantParams, trials: int, seed: int) -> McEstimate:
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")
    draws = stochastic_quantize(float(x), p, make_rng(seed), size=trials)
    draws = np.atleast_1d(draws).astype(np.float64)
    stderr = float(draws.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return McEstimate(mean=float(draws.mean()), stderr=stderr, trials=trials)


def binarize_params() -> QuantParams:
    """n = 1 quantizer whose single segment is [-1, 1]; code c <-> sign 2c - 1."""
    return QuantParams(n=1, s=-1.0, a=[2.0], beta1=1.0, beta2=1.0)


def stochastic_binarize_mean(x: float, trials: int, seed: int) -> McEstimate:
    """Monte-Carlo mean of `stochastic_binarize`; converges to clip(x, -1, 1)."""
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")
    draws = np.atleast_1d(stochastic_binarize(float(x), make_rng(seed), size=trials)).astype(np.float64)
    stderr = float(draws.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return McEstimate(mean=float(draws.mean()), stderr=stderr, trials=trials)


def random_params(n: int, rng: np.random.Generator) -> QuantParams:
    N = 2 ** n - 1
    return QuantParams(
        n=n,
        s=float(rng.uniform(-0.5, 0.5)),
        a=rng.uniform(0.1, 1.0, size=N),
        beta1=1.0,
        beta2=1.0,
    )


def oracle_grid(p: QuantParams, trials: int, seed: int, points: int = 101) -> pd.DataFrame:
    """Monte-Carlo mean vs surrogate on a grid spanning [d_0 - 1, d_N + 1]."""
    d = p.cut_points()
    xs = np.linspace(d[0] - 1.0, d[-1] + 1.0, points)
    rows = []
    for k, x in enumerate(xs):
        est = mc_expectation(x, p, trials, seed + k)
        expected = float(surrogate(x, p))
        rows.append(
            {
                "x": float(x),
                "mc_mean": est.mean,
                "stderr": est.stderr,
                "surrogate": expected,
                "deviation": abs(est.mean - expected),
            }
        )
    return pd.DataFrame(rows)
