# app/services/inspect_service.py
"""Tables behind `inspect`: learned intervals / cut points and weight-level histograms."""
from __future__ import annotations

import logging

import pandas as pd

from app.models.training import Checkpoint
from app.services.training_service import network_from_checkpoint
from app.services.weight_quantizer import baseline_tanh_max, entropy_bits

logger = logging.getLogger(__name__)

ACTIVATION_COLUMNS = ["layer", "n", "segment", "a", "cut_lo", "cut_hi", "threshold", "beta1", "beta2"]
WEIGHT_COLUMNS = ["layer", "method", "n", "level", "value", "count", "fraction", "entropy_bits"]


def activation_table(ckpt: Checkpoint) -> pd.DataFrame:
    """One row per segment of every quantized-activation layer."""
    net = network_from_checkpoint(ckpt)
    rows = []
    for k, layer in enumerate(net.layers):
        if layer.act_q is None:
            continue
        p = layer.act_q.params()
        d = p.cut_points()
        thresholds = p.thresholds()
        for i in range(1, p.max_code + 1):
            rows.append(
                {
                    "layer": k,
                    "n": p.n,
                    "segment": i,
                    "a": float(p.a[i - 1]),
                    "cut_lo": float(d[i - 1]),
                    "cut_hi": float(d[i]),
                    "threshold": float(thresholds[i - 1]),
                    "beta1": p.beta1,
                    "beta2": p.beta2,
                }
            )
    return pd.DataFrame(rows, columns=ACTIVATION_COLUMNS)


def _histogram_rows(k: int, method: str, q) -> list[dict]:
    counts = q.occupancy()
    total = int(counts.sum())
    h = entropy_bits(q)
    return [
        {
            "layer": k,
            "method": method,
            "n": q.bits,
            "level": level,
            "value": float(value),
            "count": int(counts[level]),
            "fraction": counts[level] / total,
            "entropy_bits": h,
        }
        for level, value in enumerate(q.levels())
    ]


def weight_table(ckpt: Checkpoint, *, with_baseline: bool = True) -> pd.DataFrame:
    """Per-level occupancy of each quantized layer; optionally next to the tanh/max baseline."""
    net = network_from_checkpoint(ckpt)
    rows = []
    for k, layer in enumerate(net.layers):
        if layer.weight_q is None:
            continue
        W = layer.weight.data
        rows += _histogram_rows(k, layer.weight_q.method, layer.weight_q.quantized(W))
        if with_baseline and layer.weight_q.method != "tanh_max":
            rows += _histogram_rows(k, "tanh_max", baseline_tanh_max(W, layer.weight_q.n))
    frame = pd.DataFrame(rows, columns=WEIGHT_COLUMNS)
    if not frame.empty:
        summary = frame.groupby(["layer", "method"])["entropy_bits"].first()
        logger.info("[INSPECT] weight entropy %s", summary.round(4).to_dict())
    return frame