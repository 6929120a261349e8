# app/services/selfcheck_service.py
"""
Oracle suites run by `selfcheck`.

Each suite returns rows ``suite, config, cases, max_deviation, tolerance, passed``;
`run_selfcheck` concatenates them. ``quick`` shrinks trial counts and widens the
Monte-Carlo tolerance so the statistical margin stays the same.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from app.errors import ContractError
from app.models.codes import CodeTensor, QuantizedWeights
from app.models.quant_params import QuantParams
from app.services.activation_quantizer import (
    default_params,
    quantizer_backward,
    quantizer_context,
    ste_gradient,
    surrogate,
)
from app.services.bitwise_engine import pack, pack_linear, infer_linear, popcount_dot, popcount_gemm, reference_linear
from app.services.stochastic_oracle import make_rng, oracle_grid, random_params
from app.services.weight_quantizer import baseline_tanh_max, entropy_bits, quantize_weights

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["suite", "config", "cases", "max_deviation", "tolerance", "passed"]
FD_EPS = 1e-6
FD_RTOL = 1e-5
FD_ATOL = 1e-9
BOUNDARY_MARGIN = 1e-3
WEIGHT_SIGMA = 0.05


@dataclass
class SelfcheckReport:
    frame: pd.DataFrame

    @property
    def passed(self) -> bool:
        return bool(self.frame["passed"].all())


def _row(suite: str, config: str, cases: int, deviation: float, tolerance: float, passed: bool | None = None) -> dict:
    ok = deviation <= tolerance if passed is None else passed
    return {
        "suite": suite,
        "config": config,
        "cases": int(cases),
        "max_deviation": float(deviation),
        "tolerance": float(tolerance),
        "passed": bool(ok),
    }


def _rel_err(got, want, atol: float = FD_ATOL, rtol: float = FD_RTOL) -> float:
    """Relative error with an absolute floor: <= rtol exactly when |got - want| <= atol + rtol * |want|."""
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want) / (atol / rtol + np.abs(want)))) if got.size else 0.0


def _off_boundary_points(p: QuantParams, count: int, rng: np.random.Generator) -> np.ndarray:
    """Inputs spread over [d_0 - 0.5, d_N + 0.5] in x' units, away from every cut point."""
    d = p.cut_points()
    xs = rng.uniform(d[0] - 0.5, d[-1] + 0.5, size=4 * count)
    keep = np.min(np.abs(xs[:, None] - d[None, :]), axis=1) > BOUNDARY_MARGIN
    return (xs[keep][:count]) / p.beta1


# =====================
# G-STE vs finite differences
# =====================
def _layer_output(x: np.ndarray, p: QuantParams) -> np.ndarray:
    return p.out_scale * surrogate(x, p)


def _perturbed(p: QuantParams, name: str, index: int, delta: float) -> QuantParams:
    q = p.copy()
    if name == "a":
        q.a[index] += delta
    else:
        setattr(q, name, getattr(q, name) + delta)
    return q


def gste_suite(quick: bool = False, seed: int = 0) -> list[dict]:
    points = 100 if quick else 1000
    rng = make_rng(seed)
    rows = []
    for n in (1, 2, 3, 4):
        worst = 0.0
        cases = 0
        for _ in range(3):
            p = random_params(n, rng)
            p.beta1 = float(rng.uniform(0.5, 2.0))
            p.beta2 = float(rng.uniform(0.5, 2.0))
            x = _off_boundary_points(p, points, rng)
            w = rng.standard_normal(x.shape)
            grads = quantizer_backward(x, p, w, quantizer_context(x, p, mode="surrogate"))

            fd_x = (_layer_output(x + FD_EPS, p) - _layer_output(x - FD_EPS, p)) / (2 * FD_EPS)
            worst = max(worst, _rel_err(grads.g_x, w * fd_x))

            # parameter grads sum over every point; the floor grows with the FD round-off of that sum
            param_atol = FD_ATOL * max(1.0, float(np.linalg.norm(w)))

            def loss(q: QuantParams) -> float:
                return float(np.sum(w * _layer_output(x, q)))

            def fd(name: str, index: int = 0) -> float:
                return (loss(_perturbed(p, name, index, FD_EPS)) - loss(_perturbed(p, name, index, -FD_EPS))) / (2 * FD_EPS)

            worst = max(worst, _rel_err(grads.g_a, [fd("a", i) for i in range(p.a.size)], param_atol))
            worst = max(worst, _rel_err(grads.g_s, fd("s"), param_atol))
            worst = max(worst, _rel_err(grads.g_beta1, fd("beta1"), param_atol))
            worst = max(worst, _rel_err(grads.g_beta2, fd("beta2"), param_atol))
            cases += x.size
        rows.append(_row("gste_fd", f"n={n}", cases, worst, FD_RTOL))
    return rows


# =====================
# STE degeneration
# =====================
def ste_suite(quick: bool = False, seed: int = 0) -> list[dict]:
    points = 1000 if quick else 10_000
    rng = make_rng(seed + 1)
    rows = []
    for n in (1, 2, 3, 4):
        p = default_params(n)
        c = float(rng.uniform(0.1, 1.0))
        p.s = float(rng.uniform(-0.5, 0.5))
        p.a = np.full(p.max_code, c)
        x = _off_boundary_points(p, points, rng)
        g = quantizer_backward(x, p, np.ones_like(x), quantizer_context(x, p), raw=True).g_x
        deviation = float(np.max(np.abs(g - ste_gradient(x, p))))
        rows.append(_row("ste_degeneration", f"n={n}", x.size, deviation, 0.0))
    return rows


# =====================
# Stochastic oracle
# =====================
def oracle_suite(quick: bool = False, seed: int = 0) -> list[dict]:
    trials = 10_000 if quick else 100_000
    tolerance = 0.03 if quick else 0.01
    rng = make_rng(seed + 2)
    rows = []
    for n in (1, 2, 3):
        worst = 0.0
        cases = 0
        for k in range(3):
            grid = oracle_grid(random_params(n, rng), trials, seed=seed + 1000 * n + 100 * k)
            worst = max(worst, float(grid["deviation"].max()))
            cases += len(grid)
        rows.append(_row("stochastic_oracle", f"n={n}", cases, worst, tolerance))
    return rows


# =====================
# Bitwise exactness
# =====================
def bitwise_suite(quick: bool = False, seed: int = 0) -> list[dict]:
    pairs = 1000 if quick else 10_000
    layers = 10 if quick else 100
    rng = make_rng(seed + 3)
    rows = []

    mismatches = 0
    for _ in range(pairs):
        M, K = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        length = int(rng.integers(1, 1025))
        a = rng.integers(0, 2 ** M, size=length)
        w = rng.integers(0, 2 ** K, size=length)
        if popcount_dot(pack(a, M), pack(w, K)) != int(np.dot(a, w)):
            mismatches += 1
    rows.append(_row("bitwise_dot", "M,K in 1..4", pairs, mismatches, 0))

    worst = 0.0
    gemm_mismatches = 0
    for _ in range(layers):
        M, K = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = rng.integers(0, 2 ** M, size=(8, 64))
        w = rng.integers(0, 2 ** K, size=(64, 64))
        if not np.array_equal(popcount_gemm(pack(a, M), pack(w, K)), a @ w.T):
            gemm_mismatches += 1
        beta2 = float(rng.uniform(0.5, 2.0))
        layer = pack_linear(
            QuantizedWeights.from_codes(w.astype(np.uint8), K),
            act_bits=M,
            act_scale=beta2 * 2.0 / (2 ** M - 1),
            bias=rng.standard_normal(64),
        )
        x = CodeTensor(codes=a.astype(np.uint8), bits=M, scale=layer.act_scale)
        worst = max(worst, float(np.max(np.abs(infer_linear(layer, x) - reference_linear(layer, x)))))
    rows.append(_row("bitwise_gemm", "64x64", layers, gemm_mismatches, 0))
    rows.append(_row("bitwise_affine", "64x64", layers, worst, 1e-9))
    return rows


# =====================
# Entropy regularization
# =====================
def entropy_suite(quick: bool = False, seed: int = 0) -> list[dict]:
    samples = 20_000 if quick else 100_000
    rng = make_rng(seed + 4)
    rows = []
    for n in (2, 3, 4):
        q = quantize_weights(rng.uniform(-1.0, 1.0, size=samples), n)
        fractions = q.occupancy() / samples
        rows.append(_row("entropy_occupancy", f"n={n}", samples, float(np.max(np.abs(fractions - 1.0 / 2 ** n))), 0.02))

    for n in (2, 3, 4):
        gaussian = WEIGHT_SIGMA * rng.standard_normal(samples)
        contaminated = gaussian.copy()
        outliers = rng.choice(samples, size=samples // 100, replace=False)
        contaminated[outliers] = 10 * WEIGHT_SIGMA * rng.choice([-1.0, 1.0], size=outliers.size)
        for label, W, strict in (("gaussian", gaussian, False), ("outliers", contaminated, True)):
            ours = entropy_bits(quantize_weights(W, n))
            tanh = entropy_bits(baseline_tanh_max(W, n))
            ok = ours > tanh if strict else ours >= tanh
            rows.append(_row("entropy_vs_tanh", f"{label} n={n}", samples, max(0.0, tanh - ours), 0.0, ok))
    return rows


SUITES = {
    "gste_fd": gste_suite,
    "ste_degeneration": ste_suite,
    "stochastic_oracle": oracle_suite,
    "bitwise": bitwise_suite,
    "entropy": entropy_suite,
}


def run_selfcheck(quick: bool = False, seed: int = 0, suites: list[str] | None = None) -> SelfcheckReport:
    rows = []
    unknown = sorted(set(suites or []) - set(SUITES))
    if unknown:
        raise ContractError(f"unknown selfcheck suites: {unknown}")
    for name in suites or list(SUITES):
        started = time.perf_counter()
        suite_rows = SUITES[name](quick=quick, seed=seed)
        rows += suite_rows
        logger.info(
            "[SELFCHECK] suite=%s seconds=%.2f max_deviation=%s passed=%s",
            name,
            time.perf_counter() - started,
            max(r["max_deviation"] for r in suite_rows),
            all(r["passed"] for r in suite_rows),
        )
    return SelfcheckReport(frame=pd.DataFrame(rows, columns=REPORT_COLUMNS))
